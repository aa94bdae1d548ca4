//! Data plumbing: IDX image/label files, one-vs-all task targets, planted
//! multi-task regression problems with known group structure, deterministic
//! splits, and a procedural glyph corpus for desk-scale image runs.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{forward_stack, Activation, DenseLayer};
use crate::tensor::Tensor;

const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

/// Inputs plus one target tensor per task, all row-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiTaskData {
    pub inputs: Tensor,
    pub targets: BTreeMap<usize, Tensor>,
}

impl MultiTaskData {
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-gather a subset (a split or a batch) by index.
    pub fn subset(&self, idx: &[usize]) -> Result<MultiTaskData> {
        let gather = |t: &Tensor| -> Result<Tensor> {
            let cols = t.cols();
            let mut data = Vec::with_capacity(idx.len() * cols);
            for &i in idx {
                if i >= t.rows() {
                    return Err(Error::input(format!("row {i} out of range")));
                }
                data.extend_from_slice(t.row(i));
            }
            Tensor::new(vec![idx.len(), cols], data)
        };
        Ok(MultiTaskData {
            inputs: gather(&self.inputs)?,
            targets: self
                .targets
                .iter()
                .map(|(&t, v)| gather(v).map(|g| (t, g)))
                .collect::<Result<_>>()?,
        })
    }
}

fn read_u32(reader: &mut impl Read, path: &Path, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    reader
        .read_exact(&mut buf)
        .map_err(|_| Error::ingest(format!("{}: truncated before {what}", path.display())))?;
    Ok(u32::from_be_bytes(buf))
}

/// Big-endian IDX image file -> [n, rows*cols] tensor with pixels in [0, 1].
pub fn load_idx_images(path: &Path) -> Result<Tensor> {
    let mut file = std::fs::File::open(path)
        .map_err(|e| Error::ingest(format!("cannot open {}: {e}", path.display())))?;
    let magic = read_u32(&mut file, path, "magic")?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::ingest(format!(
            "{}: magic {magic:#010x} is not an IDX image file",
            path.display()
        )));
    }
    let n = read_u32(&mut file, path, "image count")? as usize;
    let rows = read_u32(&mut file, path, "row count")? as usize;
    let cols = read_u32(&mut file, path, "column count")? as usize;
    let mut pixels = Vec::new();
    file.read_to_end(&mut pixels)?;
    if pixels.len() != n * rows * cols {
        return Err(Error::ingest(format!(
            "{}: header promises {} pixels but the file holds {}",
            path.display(),
            n * rows * cols,
            pixels.len()
        )));
    }
    Tensor::new(
        vec![n, rows * cols],
        pixels.iter().map(|&p| p as f64 / 255.0).collect(),
    )
}

/// Big-endian IDX label file -> raw class labels.
pub fn load_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let mut file = std::fs::File::open(path)
        .map_err(|e| Error::ingest(format!("cannot open {}: {e}", path.display())))?;
    let magic = read_u32(&mut file, path, "magic")?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::ingest(format!(
            "{}: magic {magic:#010x} is not an IDX label file",
            path.display()
        )));
    }
    let n = read_u32(&mut file, path, "label count")? as usize;
    let mut labels = Vec::new();
    file.read_to_end(&mut labels)?;
    if labels.len() != n {
        return Err(Error::ingest(format!(
            "{}: header promises {n} labels but the file holds {}",
            path.display(),
            labels.len()
        )));
    }
    Ok(labels)
}

pub fn write_idx_images(path: &Path, images: &[Vec<u8>], rows: usize, cols: usize) -> Result<()> {
    for (i, img) in images.iter().enumerate() {
        if img.len() != rows * cols {
            return Err(Error::input(format!(
                "image {i} has {} pixels, expected {}",
                img.len(),
                rows * cols
            )));
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&IDX_IMAGE_MAGIC.to_be_bytes())?;
    file.write_all(&(images.len() as u32).to_be_bytes())?;
    file.write_all(&(rows as u32).to_be_bytes())?;
    file.write_all(&(cols as u32).to_be_bytes())?;
    for img in images {
        file.write_all(img)?;
    }
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    file.write_all(&IDX_LABEL_MAGIC.to_be_bytes())?;
    file.write_all(&(labels.len() as u32).to_be_bytes())?;
    file.write_all(labels)?;
    Ok(())
}

/// One binary target column per class: task c says "is this class c?".
pub fn make_one_vs_all(labels: &[u8], num_classes: usize) -> Result<BTreeMap<usize, Tensor>> {
    if num_classes < 2 {
        return Err(Error::config("one-vs-all needs at least 2 classes"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| (l as usize) >= num_classes) {
        return Err(Error::input(format!(
            "label {bad} out of range for {num_classes} classes"
        )));
    }
    Ok((0..num_classes)
        .map(|c| {
            let col: Vec<f64> = labels
                .iter()
                .map(|&l| if l as usize == c { 1.0 } else { 0.0 })
                .collect();
            (c, Tensor::new(vec![labels.len(), 1], col).unwrap())
        })
        .collect())
}

pub const PLANTED_SPEC_VERSION: u32 = 1;

/// Recipe for a regression problem whose tasks come in groups that share a
/// hidden teacher trunk. Recovering `groups` from training signals is the
/// benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedSpec {
    pub format_version: u32,
    pub num_examples: usize,
    pub input_dim: usize,
    /// Hidden widths of each group's teacher trunk.
    pub teacher_hidden: Vec<usize>,
    /// Partition of task ids 0..T into groups.
    pub groups: Vec<Vec<usize>>,
    /// Within a group, each task's head is the group's base head plus this
    /// much i.i.d. perturbation: 0 makes group members identical targets,
    /// large values make them unrelated.
    pub head_jitter: f64,
    pub noise_sigma: f64,
}

impl PlantedSpec {
    pub fn validate(&self) -> Result<()> {
        if self.format_version != PLANTED_SPEC_VERSION {
            return Err(Error::config(format!(
                "planted spec version {} unsupported",
                self.format_version
            )));
        }
        if self.num_examples == 0 || self.input_dim == 0 || self.teacher_hidden.is_empty() {
            return Err(Error::config("planted spec has an empty dimension"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma must be finite and >= 0"));
        }
        if !(self.head_jitter >= 0.0 && self.head_jitter.is_finite()) {
            return Err(Error::config("head_jitter must be finite and >= 0"));
        }
        let mut seen: Vec<usize> = self.groups.iter().flatten().copied().collect();
        seen.sort_unstable();
        let total = seen.len();
        if total < 2 || self.groups.iter().any(|g| g.is_empty()) {
            return Err(Error::config("groups must be non-empty and cover >= 2 tasks"));
        }
        if seen.iter().enumerate().any(|(i, &t)| i != t) {
            return Err(Error::config(
                "groups must partition task ids 0..T exactly",
            ));
        }
        if self.input_dim < self.groups.len() {
            return Err(Error::config(
                "input_dim must be at least the number of groups",
            ));
        }
        Ok(())
    }

    pub fn num_tasks(&self) -> usize {
        self.groups.iter().map(|g| g.len()).sum()
    }

    /// group index of each task id.
    pub fn group_of(&self) -> Vec<usize> {
        let mut out = vec![0; self.num_tasks()];
        for (g, tasks) in self.groups.iter().enumerate() {
            for &t in tasks {
                out[t] = g;
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<PlantedSpec> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::ingest(format!("cannot read {}: {e}", path.display())))?;
        let spec: PlantedSpec = serde_json::from_str(&text)
            .map_err(|e| Error::ingest(format!("{}: {e}", path.display())))?;
        spec.validate()?;
        Ok(spec)
    }
}

/// The hidden generators behind a planted dataset: one trunk per group, one
/// scalar head per task.
#[derive(Debug, Clone)]
pub struct PlantedTeachers {
    pub trunks: Vec<Vec<DenseLayer>>,
    pub heads: Vec<DenseLayer>,
    pub group_of: Vec<usize>,
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; u in (0, 1] keeps the log finite.
    let u: f64 = 1.0 - rng.gen::<f64>();
    let v: f64 = rng.gen::<f64>();
    (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
}

pub fn draw_planted_teachers(spec: &PlantedSpec, rng: &mut ChaCha8Rng) -> PlantedTeachers {
    // Each group's trunk reads its own contiguous slice of the input, so the
    // groups place demands on disjoint features and the grouping is
    // recoverable from training signals rather than drowned by overlap.
    let num_groups = spec.groups.len();
    let slice_width = spec.input_dim / num_groups;
    let trunks = (0..num_groups)
        .map(|g| {
            let mut prev = spec.input_dim;
            spec.teacher_hidden
                .iter()
                .enumerate()
                .map(|(depth, &w)| {
                    let mut l = DenseLayer::new_seeded(prev, w, Activation::Relu, rng);
                    if depth == 0 {
                        let lo = g * slice_width;
                        let hi = if g + 1 == num_groups {
                            spec.input_dim
                        } else {
                            lo + slice_width
                        };
                        let data = l.weights.data_mut();
                        for row in (0..prev).filter(|r| *r < lo || *r >= hi) {
                            data[row * w..(row + 1) * w].fill(0.0);
                        }
                        // Restore the scale the dense init would have given the
                        // surviving rows, so narrower slices don't mean weaker
                        // teachers.
                        let gain = (prev as f64 / (hi - lo) as f64).sqrt();
                        for v in data[lo * w..hi * w].iter_mut() {
                            *v *= gain;
                        }
                    }
                    prev = w;
                    l
                })
                .collect()
        })
        .collect();
    let feat = *spec.teacher_hidden.last().unwrap();
    let base_heads: Vec<DenseLayer> = (0..spec.groups.len())
        .map(|_| DenseLayer::new_seeded(feat, 1, Activation::Linear, rng))
        .collect();
    let group_of = spec.group_of();
    let heads = (0..spec.num_tasks())
        .map(|t| {
            let mut head = DenseLayer::new_seeded(feat, 1, Activation::Linear, rng);
            let base = &base_heads[group_of[t]];
            for (w, b) in head
                .weights
                .data_mut()
                .iter_mut()
                .zip(base.weights.data())
            {
                *w = b + spec.head_jitter * *w;
            }
            head
        })
        .collect();
    PlantedTeachers {
        trunks,
        heads,
        group_of,
    }
}

/// Evaluate given teachers on given inputs and add noise. Exposed so tests
/// can pin teacher weights directly.
pub fn gen_planted_from_teachers(
    inputs: &Tensor,
    teachers: &PlantedTeachers,
    noise_sigma: f64,
    noise_rng: &mut ChaCha8Rng,
) -> Result<MultiTaskData> {
    let mut group_features = Vec::with_capacity(teachers.trunks.len());
    for trunk in &teachers.trunks {
        group_features.push(forward_stack(trunk, inputs)?.last().unwrap().clone());
    }
    let mut targets = BTreeMap::new();
    for (task, head) in teachers.heads.iter().enumerate() {
        let mut y = head.forward(&group_features[teachers.group_of[task]])?;
        if noise_sigma > 0.0 {
            for v in y.data_mut() {
                *v += noise_sigma * standard_normal(noise_rng);
            }
        }
        y.ensure_finite("planted target")?;
        targets.insert(task, y);
    }
    Ok(MultiTaskData {
        inputs: inputs.clone(),
        targets,
    })
}

/// Draw inputs, teachers, and noise from one seed. Bit-identical per
/// (spec, seed).
pub fn gen_planted(spec: &PlantedSpec, seed: u64) -> Result<(MultiTaskData, PlantedTeachers)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = Tensor::new(
        vec![spec.num_examples, spec.input_dim],
        (0..spec.num_examples * spec.input_dim)
            .map(|_| standard_normal(&mut rng))
            .collect(),
    )?;
    let teachers = draw_planted_teachers(spec, &mut rng);
    let data = gen_planted_from_teachers(&inputs, &teachers, spec.noise_sigma, &mut rng)?;
    Ok((data, teachers))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Disjoint seeded split of 0..n. Test takes the remainder.
pub fn make_splits(n: usize, train_frac: f64, val_frac: f64, seed: u64) -> Result<Splits> {
    if !(train_frac > 0.0 && val_frac >= 0.0 && train_frac + val_frac < 1.0 + 1e-12) {
        return Err(Error::config(format!(
            "bad split fractions {train_frac}/{val_frac}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let n_train = ((n as f64) * train_frac).round() as usize;
    let n_val = ((n as f64) * val_frac).round() as usize;
    if n_train + n_val > n {
        return Err(Error::config("split fractions overflow the dataset"));
    }
    Ok(Splits {
        train: idx[..n_train].to_vec(),
        val: idx[n_train..n_train + n_val].to_vec(),
        test: idx[n_train + n_val..].to_vec(),
    })
}

// ---------------------------------------------------------------------------
// Procedural digit glyphs. Ten classes built from a small vocabulary of
// strokes (circles, arcs, bars, diagonals) so that some classes genuinely
// share visual structure. 28x28 grayscale, jittered per image.

const GLYPH_SIDE: usize = 28;

enum Stroke {
    /// Line segment in unit-square coordinates.
    Seg([f64; 2], [f64; 2]),
    /// Elliptical arc: center, radii, angle range (radians).
    Ellipse { c: [f64; 2], rx: f64, ry: f64, a0: f64, a1: f64 },
}

fn class_strokes(digit: u8) -> Vec<Stroke> {
    use std::f64::consts::PI;
    use Stroke::*;
    match digit {
        0 => vec![Ellipse { c: [0.5, 0.5], rx: 0.28, ry: 0.40, a0: 0.0, a1: 2.0 * PI }],
        1 => vec![
            Seg([0.52, 0.10], [0.52, 0.90]),
            Seg([0.52, 0.10], [0.36, 0.28]),
        ],
        2 => vec![
            Ellipse { c: [0.5, 0.32], rx: 0.26, ry: 0.22, a0: PI, a1: 2.2 * PI },
            Seg([0.72, 0.42], [0.26, 0.88]),
            Seg([0.26, 0.88], [0.78, 0.88]),
        ],
        3 => vec![
            Ellipse { c: [0.46, 0.30], rx: 0.24, ry: 0.20, a0: -0.6 * PI, a1: 0.5 * PI },
            Ellipse { c: [0.46, 0.70], rx: 0.26, ry: 0.22, a0: -0.5 * PI, a1: 0.6 * PI },
        ],
        4 => vec![
            Seg([0.34, 0.10], [0.22, 0.58]),
            Seg([0.22, 0.58], [0.80, 0.58]),
            Seg([0.64, 0.10], [0.64, 0.90]),
        ],
        5 => vec![
            Seg([0.72, 0.12], [0.30, 0.12]),
            Seg([0.30, 0.12], [0.28, 0.48]),
            Ellipse { c: [0.47, 0.68], rx: 0.25, ry: 0.22, a0: -0.55 * PI, a1: 0.6 * PI },
        ],
        6 => vec![
            Ellipse { c: [0.62, 0.30], rx: 0.30, ry: 0.26, a0: 0.7 * PI, a1: 1.35 * PI },
            Ellipse { c: [0.47, 0.68], rx: 0.22, ry: 0.20, a0: 0.0, a1: 2.0 * PI },
        ],
        7 => vec![
            Seg([0.24, 0.12], [0.78, 0.12]),
            Seg([0.78, 0.12], [0.40, 0.90]),
        ],
        8 => vec![
            Ellipse { c: [0.5, 0.30], rx: 0.19, ry: 0.17, a0: 0.0, a1: 2.0 * PI },
            Ellipse { c: [0.5, 0.70], rx: 0.23, ry: 0.21, a0: 0.0, a1: 2.0 * PI },
        ],
        9 => vec![
            Ellipse { c: [0.52, 0.32], rx: 0.21, ry: 0.19, a0: 0.0, a1: 2.0 * PI },
            Seg([0.73, 0.34], [0.66, 0.90]),
        ],
        _ => unreachable!("digit classes are 0..10"),
    }
}

fn splat(canvas: &mut [f64], x: f64, y: f64) {
    // Gaussian ink blob over the 5x5 neighborhood of the sample point.
    const SIGMA2: f64 = 2.0 * 0.55 * 0.55;
    let cx = x.round() as isize;
    let cy = y.round() as isize;
    for dy in -2..=2isize {
        for dx in -2..=2isize {
            let px = cx + dx;
            let py = cy + dy;
            if px < 0 || py < 0 || px >= GLYPH_SIDE as isize || py >= GLYPH_SIDE as isize {
                continue;
            }
            let ddx = px as f64 - x;
            let ddy = py as f64 - y;
            canvas[py as usize * GLYPH_SIDE + px as usize] +=
                (-(ddx * ddx + ddy * ddy) / SIGMA2).exp();
        }
    }
}

fn render_glyph(digit: u8, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let rot: f64 = Uniform::new_inclusive(-0.12, 0.12).sample(rng);
    let scale = 19.0 * Uniform::new_inclusive(0.9, 1.08).sample(rng);
    let tx = 14.0 + Uniform::new_inclusive(-1.3, 1.3).sample(rng);
    let ty = 14.0 + Uniform::new_inclusive(-1.3, 1.3).sample(rng);
    let (sin, cos) = rot.sin_cos();
    let place = |p: [f64; 2]| -> (f64, f64) {
        let ux = (p[0] - 0.5) * scale;
        let uy = (p[1] - 0.5) * scale;
        (ux * cos - uy * sin + tx, ux * sin + uy * cos + ty)
    };

    let mut canvas = vec![0.0f64; GLYPH_SIDE * GLYPH_SIDE];
    for stroke in class_strokes(digit) {
        match stroke {
            Stroke::Seg(p0, p1) => {
                let steps = 40;
                for s in 0..=steps {
                    let t = s as f64 / steps as f64;
                    let p = [p0[0] + t * (p1[0] - p0[0]), p0[1] + t * (p1[1] - p0[1])];
                    let (x, y) = place(p);
                    splat(&mut canvas, x, y);
                }
            }
            Stroke::Ellipse { c, rx, ry, a0, a1 } => {
                let steps = 70;
                for s in 0..=steps {
                    let a = a0 + (a1 - a0) * s as f64 / steps as f64;
                    let p = [c[0] + rx * a.cos(), c[1] + ry * a.sin()];
                    let (x, y) = place(p);
                    splat(&mut canvas, x, y);
                }
            }
        }
    }

    // Saturating ink: a pixel that accumulates one full Gaussian weight is
    // fully dark, so stroke cores stay bright regardless of how much the
    // strokes of a class overlap elsewhere.
    let noise = Uniform::new_inclusive(-7.0, 7.0);
    canvas
        .iter()
        .map(|&v| {
            let base = 255.0 * v.min(1.0);
            let jittered = if base > 0.5 { base + noise.sample(rng) } else { base };
            jittered.clamp(0.0, 255.0) as u8
        })
        .collect()
}

/// Deterministic labeled glyph corpus: `count` images of 28x28, classes
/// cycling 0..9 before a final seeded shuffle, so every class appears
/// `count/10` times (within one).
pub fn gen_digits(count: usize, seed: u64) -> (Vec<Vec<u8>>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs: Vec<(Vec<u8>, u8)> = (0..count)
        .map(|i| {
            let digit = (i % 10) as u8;
            (render_glyph(digit, &mut rng), digit)
        })
        .collect();
    pairs.shuffle(&mut rng);
    pairs.into_iter().unzip()
}

/// Generate a glyph corpus and write it as an IDX image/label pair.
pub fn write_digit_corpus(dir: &Path, stem: &str, count: usize, seed: u64) -> Result<()> {
    let (images, labels) = gen_digits(count, seed);
    write_idx_images(
        &dir.join(format!("{stem}-images-idx3-ubyte")),
        &images,
        GLYPH_SIDE,
        GLYPH_SIDE,
    )?;
    write_idx_labels(&dir.join(format!("{stem}-labels-idx1-ubyte")), &labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idx_round_trip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let images = vec![vec![0u8, 17, 255, 3], vec![9, 9, 9, 9]];
        let labels = vec![3u8, 7];
        let ipath = dir.path().join("imgs");
        let lpath = dir.path().join("lbls");
        write_idx_images(&ipath, &images, 2, 2).unwrap();
        write_idx_labels(&lpath, &labels).unwrap();

        let mut expect = Vec::new();
        expect.extend(0x0000_0803u32.to_be_bytes());
        expect.extend(2u32.to_be_bytes());
        expect.extend(2u32.to_be_bytes());
        expect.extend(2u32.to_be_bytes());
        expect.extend([0u8, 17, 255, 3, 9, 9, 9, 9]);
        assert_eq!(std::fs::read(&ipath).unwrap(), expect);

        let tensor = load_idx_images(&ipath).unwrap();
        assert_eq!(tensor.shape(), &[2, 4]);
        assert_eq!(tensor.at2(0, 1), 17.0 / 255.0);
        assert_eq!(load_idx_labels(&lpath).unwrap(), labels);
    }

    #[test]
    fn idx_errors_name_the_offending_file() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bogus-file");
        std::fs::write(&bad, 0x0000_0801u32.to_be_bytes()).unwrap();
        let err = load_idx_images(&bad).unwrap_err().to_string();
        assert!(err.contains("bogus-file"), "{err}");

        let truncated = dir.path().join("short");
        let mut bytes = Vec::new();
        bytes.extend(0x0000_0803u32.to_be_bytes());
        bytes.extend(5u32.to_be_bytes());
        bytes.extend(28u32.to_be_bytes());
        bytes.extend(28u32.to_be_bytes());
        bytes.extend([1u8, 2, 3]); // far fewer than 5*28*28
        std::fs::write(&truncated, bytes).unwrap();
        let err = load_idx_images(&truncated).unwrap_err().to_string();
        assert!(err.contains("short") && err.contains("3"), "{err}");
    }

    #[test]
    fn one_vs_all_positive_counts_match_class_counts() {
        let labels = vec![0u8, 1, 2, 1, 1, 0];
        let targets = make_one_vs_all(&labels, 3).unwrap();
        assert_eq!(targets.len(), 3);
        let positives = |c: usize| targets[&c].data().iter().filter(|&&v| v == 1.0).count();
        assert_eq!(positives(0), 2);
        assert_eq!(positives(1), 3);
        assert_eq!(positives(2), 1);
        assert!(make_one_vs_all(&labels, 1).is_err());
        assert!(make_one_vs_all(&[5u8], 3).is_err());
    }

    fn toy_spec() -> PlantedSpec {
        PlantedSpec {
            format_version: PLANTED_SPEC_VERSION,
            num_examples: 40,
            input_dim: 6,
            teacher_hidden: vec![8, 4],
            groups: vec![vec![0, 1, 2], vec![3, 4, 5]],
            head_jitter: 0.3,
            noise_sigma: 0.1,
        }
    }

    #[test]
    fn planted_generation_is_bit_identical_per_seed() {
        let spec = toy_spec();
        let (a, _) = gen_planted(&spec, 42).unwrap();
        let (b, _) = gen_planted(&spec, 42).unwrap();
        assert_eq!(a, b);
        let (c, _) = gen_planted(&spec, 43).unwrap();
        assert_ne!(a.inputs, c.inputs);
    }

    #[test]
    fn same_group_with_identical_heads_and_no_noise_gives_identical_targets() {
        let spec = PlantedSpec {
            noise_sigma: 0.0,
            ..toy_spec()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let inputs = Tensor::new(
            vec![20, 6],
            (0..120).map(|_| standard_normal(&mut rng)).collect(),
        )
        .unwrap();
        let mut teachers = draw_planted_teachers(&spec, &mut rng);
        teachers.heads[1] = teachers.heads[0].clone();
        teachers.heads[4] = teachers.heads[3].clone();
        let data = gen_planted_from_teachers(&inputs, &teachers, 0.0, &mut rng).unwrap();
        assert_eq!(data.targets[&0], data.targets[&1]);
        assert_eq!(data.targets[&3], data.targets[&4]);
        // Different trunks: task 0 and task 3 disagree even with equal heads.
        teachers.heads[3] = teachers.heads[0].clone();
        let data = gen_planted_from_teachers(&inputs, &teachers, 0.0, &mut rng).unwrap();
        assert_ne!(data.targets[&0], data.targets[&3]);
    }

    #[test]
    fn planted_spec_validates_partition_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let spec = toy_spec();
        let path = dir.path().join("planted.json");
        spec.save(&path).unwrap();
        assert_eq!(PlantedSpec::load(&path).unwrap(), spec);

        let mut gap = spec.clone();
        gap.groups = vec![vec![0, 1], vec![3]];
        assert!(gap.validate().is_err());
        let mut dup = spec.clone();
        dup.groups = vec![vec![0, 1], vec![1, 2]];
        assert!(dup.validate().is_err());

        // Unknown fields in the file are rejected.
        std::fs::write(&path, r#"{"format_version":1,"num_examples":4,"input_dim":2,"teacher_hidden":[2],"groups":[[0],[1]],"noise_sigma":0.0,"bogus":1}"#).unwrap();
        assert!(PlantedSpec::load(&path).is_err());
    }

    #[test]
    fn splits_are_disjoint_cover_everything_and_reproduce() {
        let s = make_splits(100, 0.7, 0.15, 5).unwrap();
        assert_eq!(s.train.len(), 70);
        assert_eq!(s.val.len(), 15);
        assert_eq!(s.test.len(), 15);
        let mut all: Vec<usize> = s
            .train
            .iter()
            .chain(&s.val)
            .chain(&s.test)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(make_splits(100, 0.7, 0.15, 5).unwrap(), s);
        assert_ne!(make_splits(100, 0.7, 0.15, 6).unwrap().train, s.train);
        assert!(make_splits(10, 0.9, 0.5, 0).is_err());
    }

    #[test]
    fn glyph_corpus_is_deterministic_balanced_and_inked() {
        let (images, labels) = gen_digits(50, 11);
        let (again, labels2) = gen_digits(50, 11);
        assert_eq!(images, again);
        assert_eq!(labels, labels2);
        for c in 0..10u8 {
            assert_eq!(labels.iter().filter(|&&l| l == c).count(), 5);
        }
        for img in &images {
            assert_eq!(img.len(), 784);
            let ink: usize = img.iter().filter(|&&p| p > 128).count();
            assert!(ink > 20, "glyph nearly blank: {ink} bright pixels");
        }
        let (other, _) = gen_digits(50, 12);
        assert_ne!(images, other);
    }

    #[test]
    fn digit_corpus_writes_loadable_idx_pair() {
        let dir = tempfile::tempdir().unwrap();
        write_digit_corpus(dir.path(), "train", 20, 3).unwrap();
        let imgs = load_idx_images(&dir.path().join("train-images-idx3-ubyte")).unwrap();
        let labels = load_idx_labels(&dir.path().join("train-labels-idx1-ubyte")).unwrap();
        assert_eq!(imgs.shape(), &[20, 784]);
        assert_eq!(labels.len(), 20);
        assert!(labels.iter().all(|&l| l < 10));
    }
}
