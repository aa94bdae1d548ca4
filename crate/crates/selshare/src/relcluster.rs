//! Density clustering of factor vectors over mutual reachability distances.
//!
//! Pipeline: pairwise Euclidean distances -> per-point core distance (k-th
//! nearest neighbor, self excluded) -> mutual reachability graph -> minimum
//! spanning tree (Prim) -> single-linkage dendrogram -> condensed tree with
//! min-cluster-size fall-outs -> cluster selection by excess-of-mass
//! stability. Noise points get label -1. The root of the condensed tree is
//! never selected, so the outcome is always a proper partition attempt, not
//! one blanket cluster.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::ttfact::FactorMatrix;

/// Clustering input: one row per non-degenerate factor vector, tagged with
/// the task that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    pub coords: Vec<Vec<f64>>,
    pub task_of: Vec<usize>,
}

impl PointSet {
    pub fn new(coords: Vec<Vec<f64>>, task_of: Vec<usize>) -> Result<Self> {
        if coords.len() != task_of.len() {
            return Err(Error::input(format!(
                "{} points but {} task labels",
                coords.len(),
                task_of.len()
            )));
        }
        if let Some(first) = coords.first() {
            let dim = first.len();
            if coords.iter().any(|c| c.len() != dim) {
                return Err(Error::input("points have mixed dimensions"));
            }
        }
        Ok(PointSet { coords, task_of })
    }

    /// Flatten per-task factor matrices into points, skipping degenerate
    /// rows. Order: ascending task id, then capture order within the task.
    pub fn from_factor_matrices(mats: &BTreeMap<usize, FactorMatrix>) -> Result<Self> {
        let mut coords = Vec::new();
        let mut task_of = Vec::new();
        for (task_id, mat) in mats {
            for row in &mat.rows {
                if row.degenerate {
                    continue;
                }
                coords.push(row.values.clone());
                task_of.push(*task_id);
            }
        }
        PointSet::new(coords, task_of)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn points_per_task(&self) -> BTreeMap<usize, usize> {
        let mut out = BTreeMap::new();
        for &t in &self.task_of {
            *out.entry(t).or_insert(0) += 1;
        }
        out
    }
}

/// Default minimum cluster size given the number of captured points per task.
pub fn default_min_cluster_size(points_per_task: usize) -> usize {
    (points_per_task / 4).max(5)
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Dense symmetric mutual reachability structure: base distances plus core
/// distances. Mutual reachability is derived on access.
#[derive(Debug, Clone)]
pub struct MutualReachGraph {
    n: usize,
    pub core: Vec<f64>,
    dist: Vec<f64>,
}

impl MutualReachGraph {
    pub fn n(&self) -> usize {
        self.n
    }

    /// Base (Euclidean) distance; d(i, i) = 0.
    pub fn base(&self, i: usize, j: usize) -> f64 {
        self.dist[i * self.n + j]
    }

    pub fn core_of(&self, i: usize) -> f64 {
        self.core[i]
    }

    /// Mutual reachability distance: max of both core distances and the base
    /// distance. By convention the diagonal stays 0.
    pub fn mreach(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return 0.0;
        }
        self.base(i, j).max(self.core[i]).max(self.core[j])
    }

    /// Build from a precomputed base-distance matrix (any metric). Cores are
    /// derived from the matrix exactly as in `mutual_reachability`.
    pub fn from_matrix(matrix: &[Vec<f64>], k: usize) -> Result<MutualReachGraph> {
        let n = matrix.len();
        if k == 0 {
            return Err(Error::config("k must be >= 1"));
        }
        if n < 2 {
            return Err(Error::input("need at least 2 points"));
        }
        if k > n - 1 {
            return Err(Error::config(format!("k = {k} exceeds {} neighbors", n - 1)));
        }
        let mut dist = Vec::with_capacity(n * n);
        for (i, row) in matrix.iter().enumerate() {
            if row.len() != n {
                return Err(Error::input("distance matrix must be square"));
            }
            for (j, &d) in row.iter().enumerate() {
                if !d.is_finite() || d < 0.0 {
                    return Err(Error::input(format!("bad distance at ({i}, {j})")));
                }
                if (matrix[j][i] - d).abs() > 1e-12 {
                    return Err(Error::input(format!("asymmetry at ({i}, {j})")));
                }
                if i == j && d != 0.0 {
                    return Err(Error::input(format!("nonzero diagonal at {i}")));
                }
                dist.push(d);
            }
        }
        let core = (0..n)
            .map(|i| {
                let mut others: Vec<f64> = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| dist[i * n + j])
                    .collect();
                others.sort_by(|a, b| a.partial_cmp(b).unwrap());
                others[k - 1]
            })
            .collect();
        Ok(MutualReachGraph { n, core, dist })
    }
}

/// Build the mutual reachability graph. `k` counts neighbors EXCLUDING the
/// point itself: core(i) is the distance to its k-th nearest other point.
pub fn mutual_reachability(points: &PointSet, k: usize) -> Result<MutualReachGraph> {
    let n = points.len();
    if k == 0 {
        return Err(Error::config("k must be >= 1"));
    }
    if n < 2 {
        return Err(Error::input(format!(
            "need at least 2 points to cluster, got {n}"
        )));
    }
    if k > n - 1 {
        return Err(Error::config(format!(
            "k = {k} but only {} other points exist per point",
            n - 1
        )));
    }
    // Row-parallel distance fill: each row is an independent ordered map, so
    // thread count cannot change a single bit of the output.
    let rows = exec::map_indices(n, |i| {
        let mut row = vec![0.0; n];
        for (j, slot) in row.iter_mut().enumerate() {
            if j != i {
                *slot = euclidean(&points.coords[i], &points.coords[j]);
            }
        }
        row
    });
    let mut dist = Vec::with_capacity(n * n);
    for row in rows {
        dist.extend_from_slice(&row);
    }

    let core = exec::map_indices(n, |i| {
        let mut others: Vec<f64> = (0..n)
            .filter(|&j| j != i)
            .map(|j| dist[i * n + j])
            .collect();
        others.sort_by(|a, b| a.partial_cmp(b).unwrap());
        others[k - 1]
    });

    Ok(MutualReachGraph { n, core, dist })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MstEdge {
    pub a: usize,
    pub b: usize,
    pub weight: f64,
}

/// Prim's algorithm over the implicit complete mutual reachability graph,
/// rooted at point 0. Ties pick the lower-indexed candidate vertex.
pub fn minimum_spanning_tree(graph: &MutualReachGraph) -> Vec<MstEdge> {
    let n = graph.n();
    let mut in_tree = vec![false; n];
    // best[0] is never read: point 0 is in the tree from the start.
    let mut best: Vec<f64> = (0..n)
        .map(|v| if v == 0 { f64::INFINITY } else { graph.mreach(0, v) })
        .collect();
    let mut parent = vec![0usize; n];
    in_tree[0] = true;
    let mut edges = Vec::with_capacity(n - 1);
    for _ in 1..n {
        let mut pick = usize::MAX;
        let mut w = f64::INFINITY;
        for v in 0..n {
            if !in_tree[v] && best[v] < w {
                w = best[v];
                pick = v;
            }
        }
        in_tree[pick] = true;
        edges.push(MstEdge {
            a: parent[pick],
            b: pick,
            weight: w,
        });
        for v in 0..n {
            if !in_tree[v] {
                let d = graph.mreach(pick, v);
                if d < best[v] {
                    best[v] = d;
                    parent[v] = pick;
                }
            }
        }
    }
    edges
}

/// One merge in the single-linkage dendrogram. `left`/`right` are ids of the
/// merged components: 0..n are points, n.. are earlier merge nodes. Merge i
/// has id n + i; the final merge (the root) has id 2n - 2.
#[derive(Debug, Clone, PartialEq)]
pub struct SlNode {
    pub left: usize,
    pub right: usize,
    pub distance: f64,
    pub size: usize,
}

/// Sort the MST edges and merge components in weight order. Equal-weight
/// edges merge in (weight, a, b) order so the dendrogram is deterministic.
pub fn single_linkage(mst: &[MstEdge], n: usize) -> Vec<SlNode> {
    let mut edges = mst.to_vec();
    edges.sort_by(|x, y| {
        x.weight
            .partial_cmp(&y.weight)
            .unwrap()
            .then(x.a.cmp(&y.a))
            .then(x.b.cmp(&y.b))
    });

    // Union-find where each component is labeled by its newest merge node.
    let mut label: Vec<usize> = (0..2 * n - 1).collect();
    fn find(label: &mut [usize], mut x: usize) -> usize {
        while label[x] != x {
            label[x] = label[label[x]];
            x = label[x];
        }
        x
    }
    let mut size = vec![1usize; 2 * n - 1];
    let mut tree = Vec::with_capacity(n - 1);
    for (i, e) in edges.iter().enumerate() {
        let la = find(&mut label, e.a);
        let lb = find(&mut label, e.b);
        let new_id = n + i;
        label[la] = new_id;
        label[lb] = new_id;
        size[new_id] = size[la] + size[lb];
        tree.push(SlNode {
            left: la,
            right: lb,
            distance: e.weight,
            size: size[new_id],
        });
    }
    tree
}

/// Condensed-tree entry: `child` (a point id < n or a cluster id >= n) left
/// or was born under `parent` at density `lambda` (= 1 / distance).
#[derive(Debug, Clone, PartialEq)]
pub struct CondensedNode {
    pub parent: usize,
    pub child: usize,
    pub lambda: f64,
    pub size: usize,
}

fn lambda_of(dist: f64) -> f64 {
    if dist > 0.0 {
        1.0 / dist
    } else {
        f64::INFINITY
    }
}

/// Walk the dendrogram top-down. Splits where both sides reach
/// `min_cluster_size` create two new condensed clusters; smaller sides
/// dissolve into their points at the split's lambda. Cluster ids: root is n,
/// new clusters take n+1, n+2, ... in breadth-first discovery order.
pub fn condense_tree(sl: &[SlNode], n: usize, min_cluster_size: usize) -> Vec<CondensedNode> {
    assert_eq!(sl.len(), n - 1, "dendrogram must have n - 1 merges");
    let root = 2 * n - 2;
    let size_of = |id: usize| -> usize {
        if id < n {
            1
        } else {
            sl[id - n].size
        }
    };

    // Collect every point id reachable below a dendrogram node.
    let points_below = |start: usize| -> Vec<usize> {
        let mut queue = VecDeque::from([start]);
        let mut pts = Vec::new();
        while let Some(id) = queue.pop_front() {
            if id < n {
                pts.push(id);
            } else {
                let node = &sl[id - n];
                queue.push_back(node.left);
                queue.push_back(node.right);
            }
        }
        pts
    };

    let mut new_id = vec![usize::MAX; 2 * n - 1];
    new_id[root] = n;
    let mut next_cluster_id = n + 1;
    let mut out = Vec::new();
    let mut queue = VecDeque::from([root]);

    while let Some(id) = queue.pop_front() {
        let node = &sl[id - n];
        let lambda = lambda_of(node.distance);
        let cur = new_id[id];
        let (ls, rs) = (size_of(node.left), size_of(node.right));
        let left_big = ls >= min_cluster_size;
        let right_big = rs >= min_cluster_size;

        match (left_big, right_big) {
            (true, true) => {
                for (child, csize) in [(node.left, ls), (node.right, rs)] {
                    new_id[child] = next_cluster_id;
                    next_cluster_id += 1;
                    out.push(CondensedNode {
                        parent: cur,
                        child: new_id[child],
                        lambda,
                        size: csize,
                    });
                    if child >= n {
                        queue.push_back(child);
                    } else {
                        // A single point forming a "cluster" can only happen
                        // with min_cluster_size = 1; it has no further splits.
                    }
                }
            }
            (false, false) => {
                for side in [node.left, node.right] {
                    for p in points_below(side) {
                        out.push(CondensedNode {
                            parent: cur,
                            child: p,
                            lambda,
                            size: 1,
                        });
                    }
                }
            }
            (true, false) | (false, true) => {
                let (big, small) = if left_big {
                    (node.left, node.right)
                } else {
                    (node.right, node.left)
                };
                // The big side continues as the same condensed cluster.
                new_id[big] = cur;
                if big >= n {
                    queue.push_back(big);
                }
                for p in points_below(small) {
                    out.push(CondensedNode {
                        parent: cur,
                        child: p,
                        lambda,
                        size: 1,
                    });
                }
            }
        }
    }
    out
}

/// Stability of each condensed cluster: sum over direct children of
/// (child's departure lambda - cluster's birth lambda) * child size. The
/// root (id = n) is born at lambda 0.
pub fn cluster_stabilities(condensed: &[CondensedNode], n: usize) -> BTreeMap<usize, f64> {
    let mut birth: BTreeMap<usize, f64> = BTreeMap::new();
    birth.insert(n, 0.0);
    for e in condensed {
        if e.child >= n {
            birth.insert(e.child, e.lambda);
        }
    }
    let mut stab: BTreeMap<usize, f64> = birth.keys().map(|&c| (c, 0.0)).collect();
    for e in condensed {
        if let Some(s) = stab.get_mut(&e.parent) {
            *s += (e.lambda - birth[&e.parent]) * e.size as f64;
        }
    }
    stab
}

/// Excess-of-mass selection: walk clusters bottom-up; keep a cluster when its
/// own stability beats the sum of its already-resolved child subtrees,
/// deselecting any descendants. The root is never eligible. Returns selected
/// cluster ids, ascending.
pub fn select_clusters(condensed: &[CondensedNode], n: usize) -> Vec<usize> {
    let stabilities = cluster_stabilities(condensed, n);
    let mut resolved: BTreeMap<usize, f64> = stabilities.clone();
    let mut selected: BTreeMap<usize, bool> =
        stabilities.keys().map(|&c| (c, false)).collect();

    let mut ids: Vec<usize> = stabilities.keys().cloned().filter(|&c| c != n).collect();
    ids.sort_unstable_by(|a, b| b.cmp(a));

    let children_of = |c: usize| -> Vec<usize> {
        condensed
            .iter()
            .filter(|e| e.parent == c && e.child >= n)
            .map(|e| e.child)
            .collect()
    };

    for &c in &ids {
        let child_sum: f64 = children_of(c).iter().map(|ch| resolved[ch]).sum();
        if stabilities[&c] > child_sum {
            selected.insert(c, true);
            // Deselect every descendant cluster.
            let mut queue: VecDeque<usize> = children_of(c).into();
            while let Some(d) = queue.pop_front() {
                selected.insert(d, false);
                queue.extend(children_of(d));
            }
        } else {
            resolved.insert(c, child_sum);
        }
    }
    selected
        .into_iter()
        .filter_map(|(c, keep)| keep.then_some(c))
        .collect()
}

/// Per-cluster summary in the final outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterInfo {
    pub cluster_id: usize,
    pub size: usize,
    pub stability: f64,
    pub mean_core_distance: f64,
    /// Point index of the member minimizing total mutual reachability
    /// distance to the other members (ties: lower index).
    pub medoid: usize,
    /// How many of each task's points landed here.
    pub task_histogram: BTreeMap<usize, usize>,
    pub distinct_task_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterOutcome {
    /// Per point: cluster id (dense, 0-based) or -1 for noise.
    pub labels: Vec<i64>,
    pub clusters: Vec<ClusterInfo>,
    pub noise_count: usize,
}

/// Full extraction: dendrogram -> condensed tree -> stability selection ->
/// labels and per-cluster summaries. Cluster ids are renumbered 0.. in
/// ascending condensed-id order (deterministic).
pub fn extract_clusters(
    graph: &MutualReachGraph,
    points: &PointSet,
    min_cluster_size: usize,
) -> Result<ClusterOutcome> {
    if min_cluster_size < 2 {
        return Err(Error::config("min_cluster_size must be >= 2"));
    }
    let n = points.len();
    if graph.n() != n {
        return Err(Error::input(format!(
            "graph has {} points but point set has {n}",
            graph.n()
        )));
    }
    let mst = minimum_spanning_tree(graph);
    let sl = single_linkage(&mst, n);
    let condensed = condense_tree(&sl, n, min_cluster_size);
    let selected = select_clusters(&condensed, n);
    let stabilities = cluster_stabilities(&condensed, n);

    let mut labels = vec![-1i64; n];
    let mut clusters = Vec::with_capacity(selected.len());
    for (dense_id, &cid) in selected.iter().enumerate() {
        // Every point entry below this cluster (through any dissolved
        // descendant) belongs to it.
        let mut members = Vec::new();
        let mut queue = VecDeque::from([cid]);
        while let Some(cur) = queue.pop_front() {
            for e in &condensed {
                if e.parent != cur {
                    continue;
                }
                if e.child >= n {
                    queue.push_back(e.child);
                } else {
                    members.push(e.child);
                }
            }
        }
        members.sort_unstable();
        for &p in &members {
            labels[p] = dense_id as i64;
        }

        let mean_core =
            members.iter().map(|&p| graph.core_of(p)).sum::<f64>() / members.len() as f64;
        let mut medoid = members[0];
        let mut best = f64::INFINITY;
        for &i in &members {
            let total: f64 = members
                .iter()
                .filter(|&&j| j != i)
                .map(|&j| graph.mreach(i, j))
                .sum();
            if total < best {
                best = total;
                medoid = i;
            }
        }
        let mut histogram: BTreeMap<usize, usize> = BTreeMap::new();
        for &p in &members {
            *histogram.entry(points.task_of[p]).or_insert(0) += 1;
        }
        clusters.push(ClusterInfo {
            cluster_id: dense_id,
            size: members.len(),
            stability: stabilities[&cid],
            mean_core_distance: mean_core,
            medoid,
            distinct_task_count: histogram.len(),
            task_histogram: histogram,
        });
    }
    let noise_count = labels.iter().filter(|&&l| l < 0).count();
    Ok(ClusterOutcome {
        labels,
        clusters,
        noise_count,
    })
}

/// Assign each task to the cluster holding at least `theta` of its NON-NOISE
/// points. A task whose points are all noise stays unassigned. The
/// qualifying cluster with the largest fraction wins; exact ties go to the
/// lower cluster id.
pub fn assign_tasks(
    outcome: &ClusterOutcome,
    points: &PointSet,
    theta: f64,
) -> Result<BTreeMap<usize, Option<usize>>> {
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(Error::config(format!("theta must be in (0, 1], got {theta}")));
    }
    let mut clustered: BTreeMap<usize, usize> = BTreeMap::new();
    for info in &outcome.clusters {
        for (&task, &count) in &info.task_histogram {
            *clustered.entry(task).or_insert(0) += count;
        }
    }
    let mut assignment = BTreeMap::new();
    for &task in points.points_per_task().keys() {
        let denom = clustered.get(&task).copied().unwrap_or(0);
        if denom == 0 {
            assignment.insert(task, None);
            continue;
        }
        let mut best: Option<(f64, usize)> = None;
        for info in &outcome.clusters {
            let here = info.task_histogram.get(&task).copied().unwrap_or(0);
            let frac = here as f64 / denom as f64;
            if frac >= theta {
                let better = match best {
                    None => true,
                    Some((bf, bid)) => frac > bf || (frac == bf && info.cluster_id < bid),
                };
                if better {
                    best = Some((frac, info.cluster_id));
                }
            }
        }
        assignment.insert(task, best.map(|(_, id)| id));
    }
    Ok(assignment)
}

/// Per-epoch clustering summary written alongside the training trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusteringReport {
    pub epoch: usize,
    pub points: usize,
    pub k: usize,
    pub min_cluster_size: usize,
    pub theta: f64,
    pub clusters: Vec<ClusterInfo>,
    pub noise_count: usize,
    pub assignment: BTreeMap<usize, Option<usize>>,
}
