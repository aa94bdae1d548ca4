//! Shared fixtures for the end-to-end contract suite: independent reference
//! implementations (mutual reachability, condensed-tree clustering, gradient
//! cosine grouping) and cached training runs reused across several tests.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::OnceLock;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use selshare::datasets::PlantedSpec;
use selshare::groupmgr::{MergeRule, SharingCriterion};
use selshare::harness::config::{
    CaptureConfig, DatasetConfig, IdxOneVsAllConfig, PlantedConfig, SharingConfig, SplitConfig,
    TrainConfig, CONFIG_VERSION,
};
use selshare::harness::{load_dataset, run_experiment, RunOutput};
use selshare::mtmodel::{apply_step, backward_all, build_model, forward_all, ArchConfig, ModelOptimizer};
use selshare::net::{Activation, OptimizerKind};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_coords(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect()
}

// ---------------------------------------------------------------------------
// Reference mutual reachability
// ---------------------------------------------------------------------------

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Straight-from-the-definition mutual reachability matrix: core distance is
/// the k-th nearest neighbor (self excluded), pair weight is the max of both
/// cores and the base distance.
pub fn brute_mreach(coords: &[Vec<f64>], k: usize) -> Vec<Vec<f64>> {
    let n = coords.len();
    assert!(k >= 1 && k < n);
    let mut core = vec![0.0f64; n];
    for i in 0..n {
        let mut ds: Vec<f64> = (0..n)
            .filter(|&j| j != i)
            .map(|j| euclid(&coords[i], &coords[j]))
            .collect();
        ds.sort_by(|a, b| a.partial_cmp(b).unwrap());
        core[i] = ds[k - 1];
    }
    let mut m = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                m[i][j] = euclid(&coords[i], &coords[j]).max(core[i]).max(core[j]);
            }
        }
    }
    m
}

// ---------------------------------------------------------------------------
// Reference density clustering (single linkage -> condensed tree -> most
// persistent clusters), written against the distance matrix directly.
// ---------------------------------------------------------------------------

struct Merge {
    kids: (usize, usize),
    dist: f64,
    size: usize,
}

/// Kruskal-style single linkage over a full distance matrix. Node ids:
/// points are 0..n, the m-th merge is node n+m, the root is 2n-2.
fn linkage(m: &[Vec<f64>]) -> Vec<Merge> {
    let n = m.len();
    let mut edges = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            edges.push((m[i][j], i, j));
        }
    }
    edges.sort_by(|a, b| a.partial_cmp(b).unwrap());

    fn find(parent: &mut Vec<usize>, mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut parent: Vec<usize> = (0..n).collect();
    let mut node_of: Vec<usize> = (0..n).collect();
    let mut size = vec![1usize; 2 * n - 1];
    let mut merges: Vec<Merge> = Vec::with_capacity(n - 1);
    for (w, i, j) in edges {
        let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
        if ri == rj {
            continue;
        }
        let id = n + merges.len();
        size[id] = size[node_of[ri]] + size[node_of[rj]];
        merges.push(Merge {
            kids: (node_of[ri], node_of[rj]),
            dist: w,
            size: size[id],
        });
        parent[ri] = rj;
        node_of[rj] = id;
    }
    assert_eq!(merges.len(), n - 1);
    merges
}

fn lambda(d: f64) -> f64 {
    if d > 0.0 {
        1.0 / d
    } else {
        f64::INFINITY
    }
}

struct RefCluster {
    birth: f64,
    /// Points leaving this cluster directly, with their departure density.
    fallout: Vec<(usize, f64)>,
    /// Child clusters with the density of the split that created them.
    kids: Vec<(usize, f64)>,
    /// Every point that ever sat inside this cluster or a descendant.
    members: BTreeSet<usize>,
}

fn points_under(merges: &[Merge], n: usize, node: usize, out: &mut BTreeSet<usize>) {
    if node < n {
        out.insert(node);
    } else {
        let (a, b) = merges[node - n].kids;
        points_under(merges, n, a, out);
        points_under(merges, n, b, out);
    }
}

fn build_condensed(merges: &[Merge], n: usize, mcs: usize) -> Vec<RefCluster> {
    assert!(mcs >= 2, "reference tree assumes min cluster size >= 2");
    let size_of = |id: usize| if id < n { 1 } else { merges[id - n].size };
    let mut all = BTreeSet::new();
    points_under(merges, n, 2 * n - 2, &mut all);
    let mut clusters = vec![RefCluster {
        birth: 0.0,
        fallout: Vec::new(),
        kids: Vec::new(),
        members: all,
    }];
    let mut stack = vec![(2 * n - 2, 0usize)];
    while let Some((node, c)) = stack.pop() {
        let m = &merges[node - n];
        let lam = lambda(m.dist);
        let (a, b) = m.kids;
        match (size_of(a) >= mcs, size_of(b) >= mcs) {
            (true, true) => {
                for side in [a, b] {
                    let mut members = BTreeSet::new();
                    points_under(merges, n, side, &mut members);
                    let idx = clusters.len();
                    clusters.push(RefCluster {
                        birth: lam,
                        fallout: Vec::new(),
                        kids: Vec::new(),
                        members,
                    });
                    clusters[c].kids.push((idx, lam));
                    // A side of size >= mcs >= 2 is always an internal node.
                    stack.push((side, idx));
                }
            }
            (false, false) => {
                for side in [a, b] {
                    let mut pts = BTreeSet::new();
                    points_under(merges, n, side, &mut pts);
                    for p in pts {
                        clusters[c].fallout.push((p, lam));
                    }
                }
            }
            (a_big, _) => {
                let (big, small) = if a_big { (a, b) } else { (b, a) };
                let mut pts = BTreeSet::new();
                points_under(merges, n, small, &mut pts);
                for p in pts {
                    clusters[c].fallout.push((p, lam));
                }
                stack.push((big, c));
            }
        }
    }
    clusters
}

fn ref_stability(clusters: &[RefCluster], c: usize) -> f64 {
    let cl = &clusters[c];
    let from_points: f64 = cl.fallout.iter().map(|&(_, l)| l - cl.birth).sum();
    let from_kids: f64 = cl
        .kids
        .iter()
        .map(|&(k, l)| (l - cl.birth) * clusters[k].members.len() as f64)
        .sum();
    from_points + from_kids
}

/// Returns (best persistence total, chosen cluster indices) for the subtree.
fn ref_select(clusters: &[RefCluster], c: usize) -> (f64, Vec<usize>) {
    let mut kid_total = 0.0;
    let mut kid_sel = Vec::new();
    for &(k, _) in &clusters[c].kids {
        let (s, mut v) = ref_select(clusters, k);
        kid_total += s;
        kid_sel.append(&mut v);
    }
    let own = ref_stability(clusters, c);
    if own > kid_total {
        (own, vec![c])
    } else {
        (kid_total, kid_sel)
    }
}

/// Full reference pipeline: mutual reachability -> single linkage ->
/// condensed tree -> persistence-based selection. Returns the selected
/// clusters as point sets (ordered by smallest member) plus the noise set.
pub fn oracle_extract(
    coords: &[Vec<f64>],
    k: usize,
    mcs: usize,
) -> (Vec<BTreeSet<usize>>, BTreeSet<usize>) {
    oracle_extract_matrix(&brute_mreach(coords, k), mcs)
}

/// Same reference pipeline, starting from an explicit dissimilarity matrix.
pub fn oracle_extract_matrix(
    m: &[Vec<f64>],
    mcs: usize,
) -> (Vec<BTreeSet<usize>>, BTreeSet<usize>) {
    let merges = linkage(m);
    let clusters = build_condensed(&merges, m.len(), mcs);
    // The all-points root is never a candidate; resolve each of its subtrees.
    let mut chosen = Vec::new();
    for &(kid, _) in &clusters[0].kids {
        let (_, mut v) = ref_select(&clusters, kid);
        chosen.append(&mut v);
    }
    let mut sets: Vec<BTreeSet<usize>> = chosen
        .iter()
        .map(|&c| clusters[c].members.clone())
        .collect();
    sets.sort_by_key(|s| *s.iter().next().unwrap());
    let covered: BTreeSet<usize> = sets.iter().flatten().copied().collect();
    let noise = (0..m.len()).filter(|p| !covered.contains(p)).collect();
    (sets, noise)
}

/// Group a label vector (noise < 0) into point sets ordered by smallest
/// member, plus the noise set — shape-compatible with `oracle_extract`.
pub fn partition_from_labels(labels: &[i64]) -> (Vec<BTreeSet<usize>>, BTreeSet<usize>) {
    let mut by: BTreeMap<i64, BTreeSet<usize>> = BTreeMap::new();
    let mut noise = BTreeSet::new();
    for (p, &l) in labels.iter().enumerate() {
        if l < 0 {
            noise.insert(p);
        } else {
            by.entry(l).or_default().insert(p);
        }
    }
    let mut sets: Vec<BTreeSet<usize>> = by.into_values().collect();
    sets.sort_by_key(|s| *s.iter().next().unwrap());
    (sets, noise)
}

// ---------------------------------------------------------------------------
// Planted-group recovery runs (cached: several tests look at them)
// ---------------------------------------------------------------------------

pub const PLANTED_SEEDS: usize = 10;

pub fn planted_groups() -> Vec<Vec<usize>> {
    vec![vec![0, 1, 2], vec![3, 4, 5]]
}

pub fn planted_config(seed_idx: usize) -> TrainConfig {
    TrainConfig {
        format_version: CONFIG_VERSION,
        seed: 1000 + seed_idx as u64,
        epochs: 8,
        batch_size: 192,
        optimizer: OptimizerKind::SgdMomentum {
            learning_rate: 0.01,
            momentum: 0.0,
        },
        arch: ArchConfig {
            input_dim: 16,
            extractor_dims: vec![],
            extractor_frozen: false,
            shared_dim: 16,
            trunk_dims: vec![16, 8],
            hidden_activation: Activation::Linear,
        },
        dataset: DatasetConfig::Planted(PlantedConfig {
            spec: PlantedSpec {
                format_version: 1,
                num_examples: 1536,
                input_dim: 16,
                teacher_hidden: vec![12, 6],
                groups: planted_groups(),
                head_jitter: 0.1,
                noise_sigma: 0.1,
            },
            data_seed: 2000 + seed_idx as u64,
            ranking: false,
        }),
        split: SplitConfig {
            train_frac: 0.75,
            val_frac: 0.125,
            split_seed: 99,
        },
        sharing: SharingConfig {
            criterion: SharingCriterion::Similarity,
            merge_rule: MergeRule::KeepLowestLoss,
            warmup_epochs: 0,
            theta: 0.5,
            k_neighbors: None,
            min_cluster_size: None,
        },
        capture: CaptureConfig {
            enabled: true,
            stride: 1,
            capacity_per_task: 0,
            include_bias: false,
            first_core_only: true,
            tt_rank: 1,
            tt_tolerance: None,
        },
    }
}

/// Final branch composition of a trained model as task-id sets ordered by
/// smallest task.
pub fn branch_partition(model: &selshare::mtmodel::MultiTaskModel) -> Vec<BTreeSet<usize>> {
    let mut sets: Vec<BTreeSet<usize>> = model
        .branches
        .values()
        .map(|b| b.task_ids().into_iter().collect())
        .collect();
    sets.sort_by_key(|s| *s.iter().next().unwrap());
    sets
}

pub fn as_sets(groups: &[Vec<usize>]) -> Vec<BTreeSet<usize>> {
    let mut sets: Vec<BTreeSet<usize>> = groups
        .iter()
        .map(|g| g.iter().copied().collect())
        .collect();
    sets.sort_by_key(|s| *s.iter().next().unwrap());
    sets
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Independent grouping reference: train the same configuration briefly with
/// no merging at all, average each task's raw branch-entry gradient, and pick
/// the 3+3 split with the highest mean within-group cosine similarity.
pub fn gradient_cosine_groups(cfg: &TrainConfig) -> Vec<BTreeSet<usize>> {
    let loaded = load_dataset(cfg).unwrap();
    let mut model = build_model(&loaded.tasks, &cfg.arch, cfg.seed).unwrap();
    let mut opt = ModelOptimizer::new(&model, cfg.optimizer).unwrap();
    let n_train = loaded.splits.train.len();
    let num_batches = n_train / cfg.batch_size;

    let mut sums: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for epoch in 0..3usize {
        for bi in 0..num_batches {
            let idx: Vec<usize> = loaded.splits.train
                [bi * cfg.batch_size..(bi + 1) * cfg.batch_size]
                .to_vec();
            let batch = loaded.data.subset(&idx).unwrap();
            let fwd = forward_all(&model, &batch.inputs).unwrap();
            let out =
                backward_all(&model, &fwd, &batch.targets, epoch, bi, epoch > 0, false).unwrap();
            for rec in &out.records {
                let sum = sums
                    .entry(rec.task_id)
                    .or_insert_with(|| vec![0.0; rec.gradient.len()]);
                for (s, g) in sum.iter_mut().zip(rec.gradient.data()) {
                    *s += g;
                }
            }
            apply_step(&mut model, &mut opt, &out.grads).unwrap();
        }
    }
    assert_eq!(sums.len(), 6, "need gradients for all six tasks");

    let vecs: Vec<Vec<f64>> = (0..6).map(|t| sums[&t].clone()).collect();
    // All 3+3 splits containing task 0 in the first group: choose 2 partners
    // for task 0 out of the remaining five.
    let mut best: Option<(f64, Vec<BTreeSet<usize>>)> = None;
    for p in 1..6usize {
        for q in (p + 1)..6 {
            let g0: BTreeSet<usize> = [0, p, q].into_iter().collect();
            let g1: BTreeSet<usize> = (1..6).filter(|t| !g0.contains(t)).collect();
            let within = |g: &BTreeSet<usize>| -> f64 {
                let ids: Vec<usize> = g.iter().copied().collect();
                let mut total = 0.0;
                let mut pairs = 0.0;
                for i in 0..ids.len() {
                    for j in (i + 1)..ids.len() {
                        total += cosine(&vecs[ids[i]], &vecs[ids[j]]);
                        pairs += 1.0;
                    }
                }
                total / pairs
            };
            let score = (within(&g0) + within(&g1)) / 2.0;
            if best.as_ref().map_or(true, |(b, _)| score > *b) {
                best = Some((score, vec![g0, g1]));
            }
        }
    }
    let mut sets = best.unwrap().1;
    sets.sort_by_key(|s| *s.iter().next().unwrap());
    sets
}

pub struct PlantedCase {
    pub out: RunOutput,
    pub pipeline: Vec<BTreeSet<usize>>,
    pub oracle: Vec<BTreeSet<usize>>,
}

pub struct PlantedRuns {
    #[allow(dead_code)]
    dir: tempfile::TempDir,
    pub cases: Vec<PlantedCase>,
    /// Wall-clock seconds spent building all runs and oracles.
    pub build_secs: f64,
}

static PLANTED: OnceLock<PlantedRuns> = OnceLock::new();

pub fn planted_runs() -> &'static PlantedRuns {
    PLANTED.get_or_init(|| {
        let started = std::time::Instant::now();
        let dir = tempfile::tempdir().unwrap();
        let cases = (0..PLANTED_SEEDS)
            .map(|s| {
                let cfg = planted_config(s);
                let out_dir = dir.path().join(format!("planted_{s}"));
                let out = run_experiment(&cfg, &out_dir).unwrap();
                let pipeline = branch_partition(&out.final_model);
                let oracle = gradient_cosine_groups(&cfg);
                PlantedCase {
                    out,
                    pipeline,
                    oracle,
                }
            })
            .collect();
        PlantedRuns {
            dir,
            cases,
            build_secs: started.elapsed().as_secs_f64(),
        }
    })
}

// ---------------------------------------------------------------------------
// Desk-scale glyph runs (cached: accuracy, sizing, and timing tests share
// one set of fifteen runs)
// ---------------------------------------------------------------------------

pub const DESK_SEEDS: [u64; 5] = [11, 12, 13, 14, 15];
pub const DESK_EPOCHS: usize = 10;

pub fn desk_config(
    images: &Path,
    labels: &Path,
    criterion: SharingCriterion,
    seed: u64,
) -> TrainConfig {
    let capture_on = criterion != SharingCriterion::None;
    TrainConfig {
        format_version: CONFIG_VERSION,
        seed,
        epochs: DESK_EPOCHS,
        batch_size: 64,
        optimizer: OptimizerKind::SgdMomentum {
            learning_rate: 0.02,
            momentum: 0.5,
        },
        arch: ArchConfig {
            input_dim: 784,
            extractor_dims: vec![64],
            extractor_frozen: false,
            shared_dim: 64,
            trunk_dims: vec![32, 16],
            hidden_activation: Activation::Relu,
        },
        dataset: DatasetConfig::IdxOneVsAll(IdxOneVsAllConfig {
            images: images.to_string_lossy().into_owned(),
            labels: labels.to_string_lossy().into_owned(),
            num_classes: 10,
            limit: 0,
        }),
        split: SplitConfig {
            train_frac: 0.8,
            val_frac: 0.1,
            split_seed: 7,
        },
        sharing: SharingConfig {
            criterion,
            merge_rule: MergeRule::KeepLowestLoss,
            warmup_epochs: 2,
            theta: 0.5,
            k_neighbors: None,
            min_cluster_size: None,
        },
        capture: CaptureConfig {
            enabled: capture_on,
            stride: 2,
            capacity_per_task: 0,
            include_bias: false,
            first_core_only: false,
            tt_rank: 4,
            tt_tolerance: None,
        },
    }
}

pub struct DeskRuns {
    #[allow(dead_code)]
    dir: tempfile::TempDir,
    pub by: BTreeMap<(&'static str, u64), RunOutput>,
    /// Size of one branch trunk in this architecture (identical across
    /// branches by construction).
    pub trunk_params: usize,
    /// Wall-clock seconds spent building all fifteen runs.
    pub build_secs: f64,
}

static DESK: OnceLock<DeskRuns> = OnceLock::new();

pub fn desk_runs() -> &'static DeskRuns {
    DESK.get_or_init(|| {
        let started = std::time::Instant::now();
        let dir = tempfile::tempdir().unwrap();
        selshare::datasets::write_digit_corpus(dir.path(), "desk", 12_500, 4242).unwrap();
        let images = dir.path().join("desk-images-idx3-ubyte");
        let labels = dir.path().join("desk-labels-idx1-ubyte");

        let lanes: [(&'static str, SharingCriterion); 3] = [
            ("similarity", SharingCriterion::Similarity),
            ("random", SharingCriterion::Random),
            ("none", SharingCriterion::None),
        ];
        let mut by = BTreeMap::new();
        let mut trunk_params = 0;
        for (label, criterion) in lanes {
            for seed in DESK_SEEDS {
                let cfg = desk_config(&images, &labels, criterion, seed);
                if trunk_params == 0 {
                    let loaded = load_dataset(&cfg).unwrap();
                    let model = build_model(&loaded.tasks, &cfg.arch, cfg.seed).unwrap();
                    trunk_params = model.branches[&0].trunk_param_count();
                }
                let out_dir = dir.path().join(format!("run_{label}_{seed}"));
                let out = run_experiment(&cfg, &out_dir).unwrap();
                by.insert((label, seed), out);
            }
        }
        DeskRuns {
            dir,
            by,
            trunk_params,
            build_secs: started.elapsed().as_secs_f64(),
        }
    })
}

pub fn median(mut xs: Vec<f64>) -> f64 {
    assert!(!xs.is_empty());
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty());
    xs.iter().sum::<f64>() / xs.len() as f64
}
