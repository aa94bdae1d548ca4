//! Tensor-train factorization of captured gradient matrices.
//!
//! A gradient matrix is reshaped into d modes and swept left to right with
//! truncated SVDs, yielding 3-mode cores [r_{i-1}, f_i, r_i] with r_0 = r_d
//! = 1. For clustering, every record is factorized with the SAME fixed ranks
//! so the flattened concatenation of cores has a constant length L, and the
//! gradient is normalized to unit Frobenius norm first so the output depends
//! only on the gradient's direction.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::gradtap::GradientRecord;
use crate::tensor::Tensor;

/// Rank truncation policy for the TT sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Truncation {
    /// Keep exactly these ranks at each split (pad-free: the spec validator
    /// rejects ranks the mode sizes cannot support). Output length is fixed.
    MaxRanks(Vec<usize>),
    /// Keep the smallest ranks such that the reconstruction error satisfies
    /// ||G - G_hat||_F <= tol * ||G||_F.
    Tolerance(f64),
}

/// How the reshaped tensor is factorized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReshapeSpec {
    /// Target mode sizes [f_1, ..., f_d]; their product must equal the
    /// element count of the tensor being factorized.
    pub modes: Vec<usize>,
    pub truncation: Truncation,
}

/// Which cores contribute to the factor vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoreSelection {
    All,
    FirstOnly,
}

impl ReshapeSpec {
    /// Split n into two near-balanced integer factors (a, n/a) with a the
    /// largest divisor not exceeding sqrt(n).
    fn split_balanced(n: usize) -> (usize, usize) {
        assert!(n > 0);
        let mut best = 1;
        let mut d = 1;
        while d * d <= n {
            if n.is_multiple_of(d) {
                best = d;
            }
            d += 1;
        }
        (best, n / best)
    }

    /// Default 4-mode reshape for a [rows, cols] gradient: each matrix
    /// dimension splits into two near-balanced factors.
    pub fn balanced_modes(rows: usize, cols: usize) -> Vec<usize> {
        let (a1, a2) = Self::split_balanced(rows);
        let (b1, b2) = Self::split_balanced(cols);
        vec![a1, a2, b1, b2]
    }

    /// Fixed-rank spec for gradient matrices (the clustering path): balanced
    /// 4-mode reshape with uniform rank, capped per split by the unfolding
    /// bound so every gradient shape yields a deterministic factor length.
    pub fn for_gradient(rows: usize, cols: usize, rank: usize) -> Result<Self> {
        if rank == 0 {
            return Err(Error::config("factorization rank must be at least 1"));
        }
        let modes = Self::balanced_modes(rows, cols);
        let mut ranks = Vec::with_capacity(modes.len() - 1);
        let mut r_prev = 1usize;
        let mut rest: usize = modes.iter().product();
        for &f in &modes[..modes.len() - 1] {
            rest /= f;
            let r = rank.min((r_prev * f).min(rest));
            ranks.push(r);
            r_prev = r;
        }
        let spec = ReshapeSpec {
            modes,
            truncation: Truncation::MaxRanks(ranks),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_tolerance(modes: Vec<usize>, tol: f64) -> Result<Self> {
        let spec = ReshapeSpec {
            modes,
            truncation: Truncation::Tolerance(tol),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_max_ranks(modes: Vec<usize>, ranks: Vec<usize>) -> Result<Self> {
        let spec = ReshapeSpec {
            modes,
            truncation: Truncation::MaxRanks(ranks),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn element_count(&self) -> usize {
        self.modes.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.modes.is_empty() || self.modes.contains(&0) {
            return Err(Error::config(format!(
                "reshape modes must be non-empty and positive, got {:?}",
                self.modes
            )));
        }
        match &self.truncation {
            Truncation::Tolerance(t) => {
                if !(*t > 0.0 && *t < 1.0) {
                    return Err(Error::config(format!(
                        "tolerance must be in (0, 1), got {t}"
                    )));
                }
            }
            Truncation::MaxRanks(ranks) => {
                if ranks.len() + 1 != self.modes.len() {
                    return Err(Error::config(format!(
                        "{} modes need {} ranks, got {}",
                        self.modes.len(),
                        self.modes.len() - 1,
                        ranks.len()
                    )));
                }
                // Each split's rank is capped by both unfolding dimensions;
                // fixed ranks beyond that cap cannot produce constant-length
                // factor vectors, so reject them up front.
                let mut r_prev = 1usize;
                let mut rest: usize = self.modes.iter().product();
                for (i, (&f, &r)) in self.modes.iter().zip(ranks.iter()).enumerate() {
                    rest /= f;
                    let rows = r_prev * f;
                    if r == 0 || r > rows.min(rest) {
                        return Err(Error::config(format!(
                            "rank {r} at split {i} exceeds unfolding bound min({rows}, {rest})"
                        )));
                    }
                    r_prev = r;
                }
            }
        }
        Ok(())
    }

    /// Ranks including the boundary ones: [1, r_1, ..., r_{d-1}, 1]. Fixed
    /// ranks only.
    fn full_ranks(&self) -> Result<Vec<usize>> {
        match &self.truncation {
            Truncation::MaxRanks(ranks) => {
                let mut all = Vec::with_capacity(ranks.len() + 2);
                all.push(1);
                all.extend_from_slice(ranks);
                all.push(1);
                Ok(all)
            }
            Truncation::Tolerance(_) => Err(Error::usage(
                "fixed ranks required; tolerance mode has data-dependent ranks",
            )),
        }
    }

    /// Length of the concatenated factor vector under fixed ranks.
    pub fn factor_len(&self, selection: CoreSelection) -> Result<usize> {
        let ranks = self.full_ranks()?;
        let total = self
            .modes
            .iter()
            .enumerate()
            .map(|(i, &f)| ranks[i] * f * ranks[i + 1]);
        Ok(match selection {
            CoreSelection::All => total.sum(),
            CoreSelection::FirstOnly => self.modes[0] * ranks[1],
        })
    }
}

/// The chain of 3-mode TT cores.
#[derive(Debug, Clone, PartialEq)]
pub struct TtCores {
    pub cores: Vec<Tensor>,
}

impl TtCores {
    pub fn mode_sizes(&self) -> Vec<usize> {
        self.cores.iter().map(|c| c.shape()[1]).collect()
    }

    /// Internal ranks [r_1, ..., r_{d-1}].
    pub fn ranks(&self) -> Vec<usize> {
        self.cores[..self.cores.len() - 1]
            .iter()
            .map(|c| c.shape()[2])
            .collect()
    }

    pub fn element_count(&self) -> usize {
        self.cores.iter().map(|c| c.len()).sum()
    }
}

/// Thin SVD via cyclic one-sided Jacobi rotations, returning (U, s, V^T) with
/// the singular values sorted descending. Rotation-based orthogonalization
/// stays valid on exactly rank-deficient input, where bidiagonal QR iteration
/// can hand back an inconsistent factorization without reporting failure.
fn jacobi_svd(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<f64>, DMatrix<f64>)> {
    let transposed = a.nrows() < a.ncols();
    let mut w = if transposed { a.transpose() } else { a.clone() };
    let (m, n) = (w.nrows(), w.ncols());
    let mut v = DMatrix::<f64>::identity(n, n);

    let tol = 1e-14;
    let mut converged = false;
    for _ in 0..100 {
        converged = true;
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                let mut alpha = 0.0;
                let mut beta = 0.0;
                let mut gamma = 0.0;
                for i in 0..m {
                    alpha += w[(i, p)] * w[(i, p)];
                    beta += w[(i, q)] * w[(i, q)];
                    gamma += w[(i, p)] * w[(i, q)];
                }
                if alpha == 0.0 || beta == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                converged = false;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let wp = w[(i, p)];
                    let wq = w[(i, q)];
                    w[(i, p)] = c * wp - s * wq;
                    w[(i, q)] = s * wp + c * wq;
                }
                for i in 0..n {
                    let vp = v[(i, p)];
                    let vq = v[(i, q)];
                    v[(i, p)] = c * vp - s * vq;
                    v[(i, q)] = s * vp + c * vq;
                }
            }
        }
        if converged {
            break;
        }
    }
    if !converged {
        return Err(Error::numeric(format!(
            "jacobi svd did not converge on a {}x{} matrix",
            a.nrows(),
            a.ncols()
        )));
    }

    // Column norms are the singular values; zero columns keep a zero U
    // column, which downstream truncation either discards or multiplies by a
    // zero singular value.
    let norms: Vec<f64> = (0..n).map(|j| w.column(j).norm()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| norms[y].partial_cmp(&norms[x]).unwrap().then(x.cmp(&y)));

    let mut u = DMatrix::<f64>::zeros(m, n);
    let mut vt = DMatrix::<f64>::zeros(n, n);
    let mut sing = Vec::with_capacity(n);
    for (slot, &j) in order.iter().enumerate() {
        let s = norms[j];
        sing.push(s);
        if s > 0.0 {
            for i in 0..m {
                u[(i, slot)] = w[(i, j)] / s;
            }
        }
        for i in 0..n {
            vt[(slot, i)] = v[(i, j)];
        }
    }

    if transposed {
        // a^T = u diag(s) vt, so a = vt^T diag(s) u^T.
        Ok((vt.transpose(), sing, u.transpose()))
    } else {
        Ok((u, sing, vt))
    }
}

/// Sequential TT-SVD sweep. The tensor's element count must match the spec's
/// mode product; the tensor's own shape is otherwise ignored (it is read as a
/// flat row-major buffer over the modes).
pub fn tt_svd(tensor: &Tensor, spec: &ReshapeSpec) -> Result<TtCores> {
    spec.validate()?;
    if tensor.len() != spec.element_count() {
        return Err(Error::input(format!(
            "tensor has {} elements but modes {:?} need {}",
            tensor.len(),
            spec.modes,
            spec.element_count()
        )));
    }
    tensor.ensure_finite("tt_svd input")?;

    let d = spec.modes.len();
    let norm = tensor.frobenius_norm();
    if norm == 0.0 {
        // Zero tensor: all-zero cores reconstruct it exactly. Fixed mode
        // keeps the requested ranks so factor vectors stay constant-length;
        // tolerance mode uses the minimal rank 1.
        let ranks = match &spec.truncation {
            Truncation::MaxRanks(r) => {
                let mut all = vec![1];
                all.extend_from_slice(r);
                all.push(1);
                all
            }
            Truncation::Tolerance(_) => vec![1; d + 1],
        };
        let cores = (0..d)
            .map(|i| Tensor::zeros(vec![ranks[i], spec.modes[i], ranks[i + 1]]))
            .collect();
        return Ok(TtCores { cores });
    }

    // Per-split tail-energy budget for tolerance mode: splitting the total
    // budget evenly across d-1 SVDs guarantees the overall bound.
    let step_budget_sq = match &spec.truncation {
        Truncation::Tolerance(tol) => {
            let total = tol * norm;
            (total * total) / (d as f64 - 1.0).max(1.0)
        }
        Truncation::MaxRanks(_) => 0.0,
    };

    let mut cores = Vec::with_capacity(d);
    let mut carry: Vec<f64> = tensor.data().to_vec();
    let mut r_prev = 1usize;

    for (i, &f) in spec.modes.iter().enumerate().take(d - 1) {
        let rows = r_prev * f;
        let cols = carry.len() / rows;
        let mat = DMatrix::from_row_slice(rows, cols, &carry);
        let (mut u, sing, mut v_t) = jacobi_svd(&mat)?;

        let q = sing.len();
        let r = match &spec.truncation {
            Truncation::MaxRanks(ranks) => ranks[i],
            Truncation::Tolerance(_) => {
                // Smallest r whose discarded tail energy fits the budget.
                let mut tail = 0.0;
                let mut r = q;
                for j in (0..q).rev() {
                    let add = sing[j] * sing[j];
                    if tail + add <= step_budget_sq {
                        tail += add;
                        r = j;
                    } else {
                        break;
                    }
                }
                r.max(1)
            }
        };
        if r > q {
            return Err(Error::internal(format!(
                "rank {r} exceeds available singular values {q} at split {i}"
            )));
        }

        // Canonical sign per kept left singular vector. The cube-sum is a
        // smooth odd statistic, so two nearly parallel vectors get the same
        // sign even when their largest-magnitude entries differ; the
        // largest-entry rule only breaks the (rare) exact zero.
        for j in 0..r {
            let col = u.column(j);
            let cube_sum: f64 = col.iter().map(|v| v * v * v).sum();
            let flip = if cube_sum != 0.0 {
                cube_sum < 0.0
            } else {
                let mut best = 0usize;
                let mut best_abs = -1.0;
                for (idx, v) in col.iter().enumerate() {
                    if v.abs() > best_abs {
                        best_abs = v.abs();
                        best = idx;
                    }
                }
                u[(best, j)] < 0.0
            };
            if flip {
                for idx in 0..rows {
                    u[(idx, j)] = -u[(idx, j)];
                }
                for c in 0..cols {
                    v_t[(j, c)] = -v_t[(j, c)];
                }
            }
        }

        let mut core_data = Vec::with_capacity(rows * r);
        for row in 0..rows {
            for j in 0..r {
                core_data.push(u[(row, j)]);
            }
        }
        cores.push(Tensor::new(vec![r_prev, f, r], core_data)?);

        carry = Vec::with_capacity(r * cols);
        for j in 0..r {
            let s = sing[j];
            for c in 0..cols {
                carry.push(s * v_t[(j, c)]);
            }
        }
        r_prev = r;
    }

    let f_last = spec.modes[d - 1];
    cores.push(Tensor::new(vec![r_prev, f_last, 1], carry)?);
    Ok(TtCores { cores })
}

/// Contract the core chain back into a flat tensor shaped by the mode sizes.
pub fn tt_reconstruct(cores: &TtCores) -> Tensor {
    let modes = cores.mode_sizes();
    let first = &cores.cores[0];
    let mut acc = first
        .clone()
        .reshaped(vec![first.shape()[1], first.shape()[2]])
        .unwrap();
    for core in &cores.cores[1..] {
        let (r_in, f, r_out) = (core.shape()[0], core.shape()[1], core.shape()[2]);
        let mat = core.clone().reshaped(vec![r_in, f * r_out]).unwrap();
        let p = acc.rows();
        acc = acc.matmul(&mat).reshaped(vec![p * f, r_out]).unwrap();
    }
    acc.reshaped(modes).unwrap()
}

/// One task's gradient record factorized into a unit vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorVector {
    pub task_id: usize,
    pub epoch: usize,
    pub batch_index: usize,
    pub values: Vec<f64>,
    /// A zero gradient cannot be normalized; it is flagged and skipped by
    /// clustering instead of contributing a meaningless point.
    pub degenerate: bool,
}

/// All factor vectors captured for one task in one epoch, in batch order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorMatrix {
    pub task_id: usize,
    pub rows: Vec<FactorVector>,
}

/// Factorize one captured gradient into a unit-length factor vector. The
/// gradient is scaled to unit Frobenius norm first, so any positive rescaling
/// of the input yields the same output. Requires a fixed-rank spec.
pub fn factorize_record(
    record: &GradientRecord,
    spec: &ReshapeSpec,
    selection: CoreSelection,
) -> Result<FactorVector> {
    let want_len = spec.factor_len(selection)?;
    let norm = record.gradient.frobenius_norm();
    if norm == 0.0 {
        return Ok(FactorVector {
            task_id: record.task_id,
            epoch: record.epoch,
            batch_index: record.batch_index,
            values: vec![0.0; want_len],
            degenerate: true,
        });
    }
    let mut g = record.gradient.clone();
    g.scale(1.0 / norm);
    let cores = tt_svd(&g, spec)?;

    let mut values = Vec::with_capacity(want_len);
    match selection {
        CoreSelection::All => {
            for core in &cores.cores {
                values.extend_from_slice(core.data());
            }
        }
        CoreSelection::FirstOnly => values.extend_from_slice(cores.cores[0].data()),
    }
    if values.len() != want_len {
        return Err(Error::internal(format!(
            "factor vector length {} != expected {}",
            values.len(),
            want_len
        )));
    }
    let vnorm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if vnorm == 0.0 {
        return Err(Error::internal(
            "non-degenerate record produced a zero factor vector",
        ));
    }
    for v in &mut values {
        *v /= vnorm;
    }
    Ok(FactorVector {
        task_id: record.task_id,
        epoch: record.epoch,
        batch_index: record.batch_index,
        values,
        degenerate: false,
    })
}

/// Factorize a whole epoch's drained records into per-task factor matrices.
/// Every task must have contributed the same number of records. Records are
/// processed as one ordered batch (parallel when the feature is on), so the
/// output is identical across lanes.
pub fn stack_epoch(
    drained: &BTreeMap<usize, Vec<GradientRecord>>,
    spec: &ReshapeSpec,
    selection: CoreSelection,
) -> Result<BTreeMap<usize, FactorMatrix>> {
    let counts: Vec<usize> = drained.values().map(|v| v.len()).collect();
    if let (Some(&min), Some(&max)) = (counts.iter().min(), counts.iter().max()) {
        if min != max {
            // Every task sees every batch, so the tap can only produce equal
            // counts; anything else means the capture path is broken.
            return Err(Error::internal(format!(
                "record counts differ across tasks (min {min}, max {max})"
            )));
        }
    }
    let flat: Vec<&GradientRecord> = drained.values().flatten().collect();
    let results = exec::map_ordered(&flat, |rec| factorize_record(rec, spec, selection));
    let mut it = results.into_iter();
    let mut out = BTreeMap::new();
    for (&task_id, records) in drained {
        let mut rows = Vec::with_capacity(records.len());
        for _ in records {
            rows.push(it.next().expect("one result per record")?);
        }
        out.insert(task_id, FactorMatrix { task_id, rows });
    }
    Ok(out)
}

/// Dump factor matrices as CSV (one row per factor vector) for offline
/// analysis.
pub fn export_factor_csv(
    matrices: &BTreeMap<usize, FactorMatrix>,
    path: &Path,
) -> Result<()> {
    let width = matrices
        .values()
        .flat_map(|m| m.rows.first())
        .map(|r| r.values.len())
        .next()
        .unwrap_or(0);
    let mut file = std::fs::File::create(path)?;
    let mut header = String::from("task_id,epoch,batch_index,degenerate");
    for i in 0..width {
        header.push_str(&format!(",v{i}"));
    }
    writeln!(file, "{header}")?;
    for matrix in matrices.values() {
        for row in &matrix.rows {
            let mut line = format!(
                "{},{},{},{}",
                row.task_id, row.epoch, row.batch_index, row.degenerate as u8
            );
            for v in &row.values {
                line.push_str(&format!(",{v}"));
            }
            writeln!(file, "{line}")?;
        }
    }
    Ok(())
}
