//! Group selection and branch merging.
//!
//! After each clustering pass a criterion turns the cluster/assignment
//! picture into candidate task groups, a merge rule turns groups into a
//! concrete plan (which branches die, which survives), and `apply_merge`
//! rewires the model atomically. A lock tracker decides when the topology
//! stops changing for good.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mtmodel::{EpochLossLedger, ModelOptimizer, MultiTaskModel};
use crate::relcluster::{ClusterOutcome, MutualReachGraph};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharingCriterion {
    /// Merge tasks that fell into the same dense cluster; densest first.
    Similarity,
    /// Merge the assigned tasks of the two clusters farthest apart
    /// (medoid-to-medoid mutual reachability).
    Dissimilarity,
    /// Merge the assigned tasks of the cluster spanning the most distinct
    /// tasks.
    Variance,
    /// Merge the assigned tasks of one uniformly drawn eligible cluster.
    Random,
    /// Never merge; fixed topology control.
    None,
}

/// One candidate group: the tasks to co-locate, the clusters that justified
/// it, and the criterion's ranking score (meaning depends on the criterion:
/// mean core distance for similarity, medoid separation for dissimilarity,
/// distinct-task count for variance, drawn cluster id for random).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupProposal {
    pub tasks: Vec<usize>,
    pub clusters: Vec<usize>,
    pub score: f64,
}

/// Stateful selector: owns the criterion, the seeded draw stream for
/// `Random`, and the memory of previously emitted task sets used to
/// de-duplicate random draws across epochs.
#[derive(Debug, Clone)]
pub struct GroupSelector {
    criterion: SharingCriterion,
    rng: ChaCha8Rng,
    emitted: BTreeSet<Vec<usize>>,
}

impl GroupSelector {
    pub fn new(criterion: SharingCriterion, seed: u64) -> Self {
        GroupSelector {
            criterion,
            rng: ChaCha8Rng::seed_from_u64(seed),
            emitted: BTreeSet::new(),
        }
    }

    pub fn criterion(&self) -> SharingCriterion {
        self.criterion
    }

    /// Tasks assigned to each cluster, sorted. Clusters with no assigned
    /// task do not appear.
    fn assigned_by_cluster(
        assignment: &BTreeMap<usize, Option<usize>>,
    ) -> BTreeMap<usize, Vec<usize>> {
        let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (&task, &cluster) in assignment {
            if let Some(c) = cluster {
                out.entry(c).or_default().push(task);
            }
        }
        out
    }

    pub fn select_groups(
        &mut self,
        outcome: &ClusterOutcome,
        assignment: &BTreeMap<usize, Option<usize>>,
        graph: &MutualReachGraph,
    ) -> Vec<GroupProposal> {
        if outcome.clusters.is_empty() {
            return Vec::new();
        }
        let by_cluster = Self::assigned_by_cluster(assignment);
        match self.criterion {
            SharingCriterion::None => Vec::new(),
            SharingCriterion::Similarity => {
                let mut ranked: Vec<(f64, usize, &Vec<usize>)> = outcome
                    .clusters
                    .iter()
                    .filter_map(|info| {
                        by_cluster
                            .get(&info.cluster_id)
                            .filter(|tasks| tasks.len() >= 2)
                            .map(|tasks| (info.mean_core_distance, info.cluster_id, tasks))
                    })
                    .collect();
                ranked.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
                // Assignment is a function task -> cluster, so groups are
                // already disjoint; the claim set is defensive.
                let mut claimed = BTreeSet::new();
                let mut out = Vec::new();
                for (score, cid, tasks) in ranked {
                    let free: Vec<usize> = tasks
                        .iter()
                        .copied()
                        .filter(|t| !claimed.contains(t))
                        .collect();
                    if free.len() >= 2 {
                        claimed.extend(free.iter().copied());
                        out.push(GroupProposal {
                            tasks: free,
                            clusters: vec![cid],
                            score,
                        });
                    }
                }
                out
            }
            SharingCriterion::Dissimilarity => {
                if outcome.clusters.len() < 2 {
                    return Vec::new();
                }
                let mut best: Option<(f64, usize, usize)> = None;
                for i in 0..outcome.clusters.len() {
                    for j in (i + 1)..outcome.clusters.len() {
                        let a = &outcome.clusters[i];
                        let b = &outcome.clusters[j];
                        let d = graph.mreach(a.medoid, b.medoid);
                        // Strict > keeps the lexicographically first pair on
                        // ties.
                        if best.map(|(bd, _, _)| d > bd).unwrap_or(true) {
                            best = Some((d, a.cluster_id, b.cluster_id));
                        }
                    }
                }
                let (score, ca, cb) = best.unwrap();
                let mut tasks: Vec<usize> = Vec::new();
                for c in [ca, cb] {
                    if let Some(t) = by_cluster.get(&c) {
                        tasks.extend(t.iter().copied());
                    }
                }
                tasks.sort_unstable();
                tasks.dedup();
                if tasks.len() >= 2 {
                    vec![GroupProposal {
                        tasks,
                        clusters: vec![ca, cb],
                        score,
                    }]
                } else {
                    Vec::new()
                }
            }
            SharingCriterion::Variance => {
                let mut ranked: Vec<&crate::relcluster::ClusterInfo> = outcome
                    .clusters
                    .iter()
                    .filter(|info| info.distinct_task_count >= 2)
                    .collect();
                ranked.sort_by(|a, b| {
                    b.distinct_task_count
                        .cmp(&a.distinct_task_count)
                        .then(b.size.cmp(&a.size))
                        .then(a.cluster_id.cmp(&b.cluster_id))
                });
                let Some(top) = ranked.first() else {
                    return Vec::new();
                };
                match by_cluster.get(&top.cluster_id) {
                    Some(tasks) if tasks.len() >= 2 => vec![GroupProposal {
                        tasks: tasks.clone(),
                        clusters: vec![top.cluster_id],
                        score: top.distinct_task_count as f64,
                    }],
                    _ => Vec::new(),
                }
            }
            SharingCriterion::Random => {
                let eligible: Vec<(usize, &Vec<usize>)> = by_cluster
                    .iter()
                    .filter(|(_, tasks)| tasks.len() >= 2 && !self.emitted.contains(*tasks))
                    .map(|(&c, tasks)| (c, tasks))
                    .collect();
                if eligible.is_empty() {
                    return Vec::new();
                }
                let pick = self.rng.gen_range(0..eligible.len());
                let (cid, tasks) = eligible[pick];
                self.emitted.insert(tasks.clone());
                vec![GroupProposal {
                    tasks: tasks.clone(),
                    clusters: vec![cid],
                    score: cid as f64,
                }]
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeRule {
    /// The surviving trunk is the one whose tasks carried the lowest
    /// aggregated epoch loss; other trunks are discarded as-is.
    KeepLowestLoss,
    /// Surviving slot as above, but its trunk weights are replaced by a
    /// pairwise elementwise fold over all source trunks (ascending branch
    /// id).
    ElementwiseMax,
    ElementwiseMin,
    ElementwiseMean,
}

/// One group made concrete: which branches feed the merge and which survives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeAction {
    pub tasks: Vec<usize>,
    pub source_branches: Vec<usize>,
    pub survivor: usize,
    /// Aggregated epoch loss of the surviving branch at planning time.
    pub survivor_loss: f64,
    pub clusters: Vec<usize>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergePlan {
    pub rule: MergeRule,
    pub actions: Vec<MergeAction>,
}

impl MergePlan {
    pub fn empty(rule: MergeRule) -> Self {
        MergePlan {
            rule,
            actions: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Turn proposals into a concrete plan. Groups that already live on a single
/// branch are dropped (nothing to merge); later proposals touching a branch
/// an earlier action already claimed are dropped to keep actions disjoint.
pub fn plan_merge(
    model: &MultiTaskModel,
    ledger: &EpochLossLedger,
    proposals: &[GroupProposal],
    rule: MergeRule,
) -> Result<MergePlan> {
    let branch_loss = ledger.branch_totals(model);
    let mut claimed: BTreeSet<usize> = BTreeSet::new();
    let mut actions = Vec::new();
    for prop in proposals {
        let mut branches = BTreeSet::new();
        for &task in &prop.tasks {
            branches.insert(model.branch_of_task(task)?);
        }
        if branches.len() < 2 {
            continue;
        }
        if branches.iter().any(|b| claimed.contains(b)) {
            continue;
        }
        // Lowest aggregated loss wins; ascending branch-id iteration makes
        // the strict < keep the lowest id on ties.
        let mut survivor = None;
        let mut best = f64::INFINITY;
        for &b in &branches {
            let loss = *branch_loss
                .get(&b)
                .ok_or_else(|| Error::internal(format!("no loss total for branch {b}")))?;
            if loss < best {
                best = loss;
                survivor = Some(b);
            }
        }
        let survivor = survivor.unwrap();
        claimed.extend(branches.iter().copied());
        actions.push(MergeAction {
            tasks: prop.tasks.clone(),
            source_branches: branches.into_iter().collect(),
            survivor,
            survivor_loss: best,
            clusters: prop.clusters.clone(),
            score: prop.score,
        });
    }
    Ok(MergePlan { rule, actions })
}

/// Parameters freed if `plan` were applied now: the discarded trunks,
/// exactly. Heads move, the surviving trunk stays.
pub fn discarded_trunk_params(model: &MultiTaskModel, plan: &MergePlan) -> Result<usize> {
    let mut total = 0;
    for action in &plan.actions {
        for &b in &action.source_branches {
            if b == action.survivor {
                continue;
            }
            let branch = model
                .branches
                .get(&b)
                .ok_or_else(|| Error::structure(format!("plan references missing branch {b}")))?;
            total += branch.trunk_param_count();
        }
    }
    Ok(total)
}

fn validate_plan(model: &MultiTaskModel, plan: &MergePlan) -> Result<()> {
    let mut seen_branches = BTreeSet::new();
    for action in &plan.actions {
        if action.source_branches.len() < 2 {
            return Err(Error::structure("action with fewer than 2 branches"));
        }
        if !action.source_branches.contains(&action.survivor) {
            return Err(Error::structure(format!(
                "survivor {} not among its source branches",
                action.survivor
            )));
        }
        for &b in &action.source_branches {
            if !model.branches.contains_key(&b) {
                return Err(Error::structure(format!(
                    "plan references branch {b} which does not exist (already applied?)"
                )));
            }
            if !seen_branches.insert(b) {
                return Err(Error::structure(format!(
                    "branch {b} appears in two merge actions"
                )));
            }
        }
        for &task in &action.tasks {
            let owner = model.branch_of_task(task)?;
            if !action.source_branches.contains(&owner) {
                return Err(Error::structure(format!(
                    "task {task} lives on branch {owner}, outside its action"
                )));
            }
        }
    }
    Ok(())
}

fn fold_tensors(acc: &Tensor, next: &Tensor, rule: MergeRule) -> Tensor {
    let data = acc
        .data()
        .iter()
        .zip(next.data())
        .map(|(&a, &b)| match rule {
            MergeRule::ElementwiseMax => a.max(b),
            MergeRule::ElementwiseMin => a.min(b),
            MergeRule::ElementwiseMean => (a + b) / 2.0,
            MergeRule::KeepLowestLoss => a,
        })
        .collect();
    Tensor::new(acc.shape().to_vec(), data).unwrap()
}

/// Rewire the model according to `plan`. All-or-nothing: every check runs
/// before the first mutation, so a rejected plan leaves model and optimizer
/// untouched. Moved heads keep their weights and optimizer state; discarded
/// trunks drop both.
pub fn apply_merge(
    model: &mut MultiTaskModel,
    opt: &mut ModelOptimizer,
    plan: &MergePlan,
) -> Result<()> {
    validate_plan(model, plan)?;
    for action in &plan.actions {
        // Combined trunk is computed from the sources before any removal.
        let combined = if plan.rule != MergeRule::KeepLowestLoss {
            let first = &model.branches[&action.source_branches[0]].trunk;
            let mut acc: Vec<(Tensor, Tensor)> = first
                .iter()
                .map(|l| (l.weights.clone(), l.bias.clone()))
                .collect();
            for &b in &action.source_branches[1..] {
                for (slot, layer) in acc.iter_mut().zip(model.branches[&b].trunk.iter()) {
                    slot.0 = fold_tensors(&slot.0, &layer.weights, plan.rule);
                    slot.1 = fold_tensors(&slot.1, &layer.bias, plan.rule);
                }
            }
            Some(acc)
        } else {
            None
        };

        for &b in &action.source_branches {
            if b == action.survivor {
                continue;
            }
            let dead = model.branches.remove(&b).expect("validated");
            let dead_opt = opt.branches.remove(&b).expect("validated");
            let survivor_branch = model.branches.get_mut(&action.survivor).expect("validated");
            let survivor_opt = opt.branches.get_mut(&action.survivor).expect("validated");
            for ((task, head), (opt_task, head_opt)) in
                dead.heads.into_iter().zip(dead_opt.heads)
            {
                debug_assert_eq!(task, opt_task);
                survivor_branch.heads.insert(task, head);
                survivor_opt.heads.insert(task, head_opt);
                model.task_to_branch.insert(task, action.survivor);
            }
        }

        if let Some(acc) = combined {
            let survivor_branch = model.branches.get_mut(&action.survivor).expect("validated");
            for (layer, (w, b)) in survivor_branch.trunk.iter_mut().zip(acc) {
                layer.weights = w;
                layer.bias = b;
            }
        }
    }
    model.check_consistent()
}

/// Sticky lock: once set it never clears. Set when every branch owns at
/// least two tasks, or after three consecutive merge rounds that applied an
/// empty plan.
#[derive(Debug, Clone, Default)]
pub struct LockTracker {
    consecutive_empty: usize,
    locked: bool,
}

impl LockTracker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_locked(&self) -> bool {
        self.locked
    }

    /// Record one merge round (after the plan was applied) and return the
    /// lock state.
    pub fn observe(&mut self, model: &MultiTaskModel, plan_was_empty: bool) -> bool {
        if self.locked {
            return true;
        }
        if plan_was_empty {
            self.consecutive_empty += 1;
        } else {
            self.consecutive_empty = 0;
        }
        let all_shared = model.branches.values().all(|b| b.heads.len() >= 2);
        if all_shared || self.consecutive_empty >= 3 {
            self.locked = true;
        }
        self.locked
    }
}

/// One line of the architecture history: what changed at this epoch and the
/// size of the model on both sides of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchEvent {
    pub epoch: usize,
    pub plan: MergePlan,
    pub param_count_before: usize,
    pub param_count_after: usize,
    pub branch_count_before: usize,
    pub branch_count_after: usize,
    pub locked: bool,
}

/// Append one event as a JSON line.
pub fn append_arch_event(path: &Path, event: &ArchEvent) -> Result<()> {
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    let line = serde_json::to_string(event)?;
    writeln!(file, "{line}")?;
    Ok(())
}

pub fn read_arch_events(path: &Path) -> Result<Vec<ArchEvent>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::ingest(format!("cannot read {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let event: ArchEvent = serde_json::from_str(&line).map_err(|e| {
            Error::ingest(format!("{} line {}: {e}", path.display(), i + 1))
        })?;
        out.push(event);
    }
    Ok(out)
}

/// Invariant over a recorded history: parameter count never increases,
/// within or across events, and lock never clears.
pub fn validate_event_sequence(events: &[ArchEvent]) -> Result<()> {
    let mut prev_params: Option<usize> = None;
    let mut locked = false;
    for (i, e) in events.iter().enumerate() {
        if e.param_count_after > e.param_count_before {
            return Err(Error::structure(format!(
                "event {i}: parameter count grew within the event"
            )));
        }
        if let Some(p) = prev_params {
            if e.param_count_before > p {
                return Err(Error::structure(format!(
                    "event {i}: parameter count grew between events"
                )));
            }
        }
        if locked && !e.locked {
            return Err(Error::structure(format!("event {i}: lock cleared")));
        }
        locked = e.locked;
        prev_params = Some(e.param_count_after);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mtmodel::{
        build_model, param_count, ArchConfig, TaskKind, TaskSpec,
    };
    use crate::net::{Activation, LossKind, OptimizerKind};
    use crate::relcluster::ClusterInfo;

    fn tasks(n: usize) -> Vec<TaskSpec> {
        (0..n)
            .map(|i| TaskSpec {
                task_id: i,
                name: format!("t{i}"),
                kind: TaskKind::BinaryClassification,
                output_width: 1,
                loss: LossKind::BinaryCrossEntropy,
            })
            .collect()
    }

    fn arch() -> ArchConfig {
        ArchConfig {
            input_dim: 4,
            extractor_dims: vec![],
            extractor_frozen: false,
            shared_dim: 3,
            trunk_dims: vec![3, 2],
            hidden_activation: Activation::Relu,
        }
    }

    fn info(cluster_id: usize, size: usize, mean_core: f64, medoid: usize) -> ClusterInfo {
        ClusterInfo {
            cluster_id,
            size,
            stability: 1.0,
            mean_core_distance: mean_core,
            medoid,
            task_histogram: BTreeMap::new(),
            distinct_task_count: 0,
        }
    }

    /// Line of points 0..5 at x = 0, 1, 2, 10, 11, 12 with k = 1: medoid
    /// distances are controllable and exact.
    fn line_graph() -> MutualReachGraph {
        let xs: [f64; 6] = [0.0, 1.0, 2.0, 10.0, 11.0, 12.0];
        let matrix: Vec<Vec<f64>> = xs
            .iter()
            .map(|a| xs.iter().map(|b| (a - b).abs()).collect())
            .collect();
        MutualReachGraph::from_matrix(&matrix, 1).unwrap()
    }

    fn outcome_two_clusters() -> ClusterOutcome {
        let mut a = info(0, 3, 0.5, 1);
        a.task_histogram = BTreeMap::from([(0, 2), (1, 1)]);
        a.distinct_task_count = 2;
        let mut b = info(1, 3, 0.2, 4);
        b.task_histogram = BTreeMap::from([(2, 1), (3, 1), (4, 1)]);
        b.distinct_task_count = 3;
        ClusterOutcome {
            labels: vec![0, 0, 0, 1, 1, 1],
            clusters: vec![a, b],
            noise_count: 0,
        }
    }

    fn assignment_two_clusters() -> BTreeMap<usize, Option<usize>> {
        BTreeMap::from([
            (0, Some(0)),
            (1, Some(0)),
            (2, Some(1)),
            (3, Some(1)),
            (4, Some(1)),
            (5, None),
        ])
    }

    #[test]
    fn similarity_ranks_densest_first_and_needs_two_tasks() {
        let mut sel = GroupSelector::new(SharingCriterion::Similarity, 0);
        let groups = sel.select_groups(
            &outcome_two_clusters(),
            &assignment_two_clusters(),
            &line_graph(),
        );
        assert_eq!(groups.len(), 2);
        // Cluster 1 has the smaller mean core distance, so it ranks first.
        assert_eq!(groups[0].tasks, vec![2, 3, 4]);
        assert_eq!(groups[0].clusters, vec![1]);
        assert_eq!(groups[1].tasks, vec![0, 1]);

        // A cluster whose assignment holds a single task produces nothing.
        let lonely = BTreeMap::from([(0, Some(0)), (1, None), (2, Some(1)), (3, Some(1))]);
        let groups = sel.select_groups(&outcome_two_clusters(), &lonely, &line_graph());
        assert_eq!(groups.len(), 1);
        assert_eq!(groups[0].tasks, vec![2, 3]);
    }

    #[test]
    fn dissimilarity_pairs_farthest_medoids() {
        let mut sel = GroupSelector::new(SharingCriterion::Dissimilarity, 0);
        let groups = sel.select_groups(
            &outcome_two_clusters(),
            &assignment_two_clusters(),
            &line_graph(),
        );
        // Only one pair exists; medoids 1 and 4 sit 10 apart.
        assert_eq!(groups.len(), 1);
        assert_eq!(groups[0].tasks, vec![0, 1, 2, 3, 4]);
        assert_eq!(groups[0].clusters, vec![0, 1]);
        assert!((groups[0].score - 10.0).abs() < 1e-12);

        // A single cluster cannot form a pair.
        let single = ClusterOutcome {
            labels: vec![0; 6],
            clusters: vec![info(0, 6, 0.3, 0)],
            noise_count: 0,
        };
        assert!(sel
            .select_groups(&single, &assignment_two_clusters(), &line_graph())
            .is_empty());
    }

    #[test]
    fn variance_takes_widest_task_spread() {
        let mut sel = GroupSelector::new(SharingCriterion::Variance, 0);
        let groups = sel.select_groups(
            &outcome_two_clusters(),
            &assignment_two_clusters(),
            &line_graph(),
        );
        assert_eq!(groups.len(), 1);
        assert_eq!(groups[0].tasks, vec![2, 3, 4]);
        assert_eq!(groups[0].score, 3.0);
    }

    #[test]
    fn random_draws_are_deduplicated_across_calls() {
        let mut sel = GroupSelector::new(SharingCriterion::Random, 7);
        let outcome = outcome_two_clusters();
        let assignment = assignment_two_clusters();
        let graph = line_graph();
        let first = sel.select_groups(&outcome, &assignment, &graph);
        assert_eq!(first.len(), 1);
        let second = sel.select_groups(&outcome, &assignment, &graph);
        assert_eq!(second.len(), 1);
        assert_ne!(first[0].tasks, second[0].tasks);
        // Both eligible sets are spent now.
        assert!(sel.select_groups(&outcome, &assignment, &graph).is_empty());

        // Same seed, same sequence.
        let mut again = GroupSelector::new(SharingCriterion::Random, 7);
        assert_eq!(again.select_groups(&outcome, &assignment, &graph), first);
    }

    #[test]
    fn none_and_empty_outcomes_select_nothing() {
        let empty = ClusterOutcome {
            labels: vec![],
            clusters: vec![],
            noise_count: 0,
        };
        for crit in [
            SharingCriterion::None,
            SharingCriterion::Similarity,
            SharingCriterion::Dissimilarity,
            SharingCriterion::Variance,
            SharingCriterion::Random,
        ] {
            let mut sel = GroupSelector::new(crit, 0);
            assert!(sel
                .select_groups(&empty, &BTreeMap::new(), &line_graph())
                .is_empty());
        }
        let mut none = GroupSelector::new(SharingCriterion::None, 0);
        assert!(none
            .select_groups(
                &outcome_two_clusters(),
                &assignment_two_clusters(),
                &line_graph()
            )
            .is_empty());
    }

    #[test]
    fn survivor_is_lowest_loss_branch() {
        let model = build_model(&tasks(8), &arch(), 0).unwrap();
        let mut ledger = EpochLossLedger::new(0, &model.task_ids());
        let mut batch = BTreeMap::new();
        for t in model.task_ids() {
            batch.insert(t, 0.1);
        }
        batch.insert(1, 0.9);
        batch.insert(4, 0.4);
        batch.insert(7, 0.7);
        ledger.add_batch(&batch).unwrap();

        let proposal = GroupProposal {
            tasks: vec![1, 4, 7],
            clusters: vec![0],
            score: 0.0,
        };
        let plan = plan_merge(&model, &ledger, &[proposal], MergeRule::KeepLowestLoss).unwrap();
        assert_eq!(plan.actions.len(), 1);
        assert_eq!(plan.actions[0].survivor, 4);
        assert_eq!(plan.actions[0].source_branches, vec![1, 4, 7]);
        assert!((plan.actions[0].survivor_loss - 0.4).abs() < 1e-12);
    }

    #[test]
    fn single_branch_groups_drop_out_of_the_plan() {
        let mut model = build_model(&tasks(4), &arch(), 1).unwrap();
        let mut opt = ModelOptimizer::new(
            &model,
            OptimizerKind::SgdMomentum {
                learning_rate: 0.1,
                momentum: 0.0,
            },
        )
        .unwrap();
        let ledger = EpochLossLedger::new(0, &model.task_ids());
        // First merge 0 and 1 onto one branch.
        let plan = plan_merge(
            &model,
            &ledger,
            &[GroupProposal {
                tasks: vec![0, 1],
                clusters: vec![0],
                score: 0.0,
            }],
            MergeRule::KeepLowestLoss,
        )
        .unwrap();
        apply_merge(&mut model, &mut opt, &plan).unwrap();
        // Proposing the same pair again is now a single-branch group.
        let again = plan_merge(
            &model,
            &ledger,
            &[GroupProposal {
                tasks: vec![0, 1],
                clusters: vec![0],
                score: 0.0,
            }],
            MergeRule::KeepLowestLoss,
        )
        .unwrap();
        assert!(again.is_empty());
    }

    #[test]
    fn overlapping_branch_claims_resolve_in_rank_order() {
        let model = build_model(&tasks(4), &arch(), 2).unwrap();
        let ledger = EpochLossLedger::new(0, &model.task_ids());
        let proposals = vec![
            GroupProposal {
                tasks: vec![0, 1],
                clusters: vec![0],
                score: 0.1,
            },
            GroupProposal {
                tasks: vec![1, 2],
                clusters: vec![1],
                score: 0.2,
            },
            GroupProposal {
                tasks: vec![2, 3],
                clusters: vec![2],
                score: 0.3,
            },
        ];
        let plan = plan_merge(&model, &ledger, &proposals, MergeRule::KeepLowestLoss).unwrap();
        assert_eq!(plan.actions.len(), 2);
        assert_eq!(plan.actions[0].tasks, vec![0, 1]);
        assert_eq!(plan.actions[1].tasks, vec![2, 3]);
    }

    #[test]
    fn apply_moves_heads_frees_trunks_and_is_atomic() {
        let mut model = build_model(&tasks(4), &arch(), 3).unwrap();
        let mut opt = ModelOptimizer::new(
            &model,
            OptimizerKind::SgdMomentum {
                learning_rate: 0.1,
                momentum: 0.5,
            },
        )
        .unwrap();
        let ledger = EpochLossLedger::new(0, &model.task_ids());
        let before_params = param_count(&model);
        let head1 = model.branches[&1].heads[&1].clone();

        let plan = plan_merge(
            &model,
            &ledger,
            &[GroupProposal {
                tasks: vec![0, 1],
                clusters: vec![0],
                score: 0.0,
            }],
            MergeRule::KeepLowestLoss,
        )
        .unwrap();
        let freed = discarded_trunk_params(&model, &plan).unwrap();
        let dropped_trunk = model.branches[&1].trunk_param_count();
        assert_eq!(freed, dropped_trunk);

        apply_merge(&mut model, &mut opt, &plan).unwrap();
        assert_eq!(param_count(&model), before_params - freed);
        assert_eq!(model.branch_count(), 3);
        assert_eq!(model.branch_of_task(1).unwrap(), 0);
        assert_eq!(model.branches[&0].heads[&1], head1);
        assert!(opt.branches.contains_key(&0) && !opt.branches.contains_key(&1));
        assert!(opt.branches[&0].heads.contains_key(&1));

        // Re-applying the same plan must fail and leave everything intact.
        let snapshot = model.clone();
        let err = apply_merge(&mut model, &mut opt, &plan);
        assert!(matches!(err, Err(Error::Structure(_))));
        assert_eq!(model, snapshot);
    }

    #[test]
    fn merging_two_single_task_branches_frees_exactly_one_trunk() {
        let mut model = build_model(&tasks(2), &arch(), 4).unwrap();
        let mut opt = ModelOptimizer::new(
            &model,
            OptimizerKind::SgdMomentum {
                learning_rate: 0.1,
                momentum: 0.0,
            },
        )
        .unwrap();
        let ledger = EpochLossLedger::new(0, &model.task_ids());
        let one_trunk = model.branches[&0].trunk_param_count();
        let before = param_count(&model);
        let plan = plan_merge(
            &model,
            &ledger,
            &[GroupProposal {
                tasks: vec![0, 1],
                clusters: vec![0],
                score: 0.0,
            }],
            MergeRule::KeepLowestLoss,
        )
        .unwrap();
        apply_merge(&mut model, &mut opt, &plan).unwrap();
        assert_eq!(param_count(&model), before - one_trunk);
        assert_eq!(model.branch_count(), 1);
    }

    #[test]
    fn elementwise_rules_fold_trunks_pairwise_in_branch_order() {
        let mut model = build_model(&tasks(3), &arch(), 5).unwrap();
        // Make the trunks distinguishable.
        for (i, bid) in [0usize, 1, 2].iter().enumerate() {
            for l in model.branches.get_mut(bid).unwrap().trunk.iter_mut() {
                l.weights.scale(0.0);
                l.weights.data_mut().iter_mut().for_each(|w| *w = i as f64);
                l.bias.data_mut().iter_mut().for_each(|b| *b = (i * 10) as f64);
            }
        }
        let mut opt = ModelOptimizer::new(
            &model,
            OptimizerKind::SgdMomentum {
                learning_rate: 0.1,
                momentum: 0.0,
            },
        )
        .unwrap();
        let ledger = EpochLossLedger::new(0, &model.task_ids());
        let plan = plan_merge(
            &model,
            &ledger,
            &[GroupProposal {
                tasks: vec![0, 1, 2],
                clusters: vec![0],
                score: 0.0,
            }],
            MergeRule::ElementwiseMean,
        )
        .unwrap();
        apply_merge(&mut model, &mut opt, &plan).unwrap();
        // Pairwise fold: ((0 + 1)/2 + 2)/2 = 1.25; bias ((0+10)/2+20)/2 = 12.5.
        let trunk = &model.branches[&plan.actions[0].survivor].trunk;
        assert!(trunk[0].weights.data().iter().all(|&w| w == 1.25));
        assert!(trunk[0].bias.data().iter().all(|&b| b == 12.5));

        let mut model2 = build_model(&tasks(2), &arch(), 6).unwrap();
        for (i, bid) in [0usize, 1].iter().enumerate() {
            for l in model2.branches.get_mut(bid).unwrap().trunk.iter_mut() {
                l.weights.data_mut().iter_mut().for_each(|w| *w = if i == 0 { -2.0 } else { 5.0 });
            }
        }
        let mut opt2 = ModelOptimizer::new(&model2, OptimizerKind::adam_default(0.001)).unwrap();
        let plan2 = plan_merge(
            &model2,
            &EpochLossLedger::new(0, &model2.task_ids()),
            &[GroupProposal {
                tasks: vec![0, 1],
                clusters: vec![0],
                score: 0.0,
            }],
            MergeRule::ElementwiseMax,
        )
        .unwrap();
        apply_merge(&mut model2, &mut opt2, &plan2).unwrap();
        let trunk2 = &model2.branches[&plan2.actions[0].survivor].trunk;
        assert!(trunk2[0].weights.data().iter().all(|&w| w == 5.0));
    }

    #[test]
    fn lock_needs_three_consecutive_empty_rounds() {
        let model = build_model(&tasks(4), &arch(), 7).unwrap();
        let mut lock = LockTracker::new();
        assert!(!lock.observe(&model, true));
        assert!(!lock.observe(&model, true));
        assert!(!lock.observe(&model, false)); // a merge resets the streak
        assert!(!lock.observe(&model, true));
        assert!(!lock.observe(&model, true));
        assert!(lock.observe(&model, true));
        // Sticky from here on.
        assert!(lock.observe(&model, false));
        assert!(lock.is_locked());
    }

    #[test]
    fn lock_fires_immediately_once_every_branch_owns_two_tasks() {
        let mut model = build_model(&tasks(4), &arch(), 8).unwrap();
        let mut opt = ModelOptimizer::new(
            &model,
            OptimizerKind::SgdMomentum {
                learning_rate: 0.1,
                momentum: 0.0,
            },
        )
        .unwrap();
        let ledger = EpochLossLedger::new(0, &model.task_ids());
        let proposals = vec![
            GroupProposal {
                tasks: vec![0, 1],
                clusters: vec![0],
                score: 0.0,
            },
            GroupProposal {
                tasks: vec![2, 3],
                clusters: vec![1],
                score: 0.1,
            },
        ];
        let plan = plan_merge(&model, &ledger, &proposals, MergeRule::KeepLowestLoss).unwrap();
        apply_merge(&mut model, &mut opt, &plan).unwrap();
        let mut lock = LockTracker::new();
        assert!(lock.observe(&model, false));
    }

    #[test]
    fn event_log_round_trips_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.jsonl");
        let e0 = ArchEvent {
            epoch: 1,
            plan: MergePlan::empty(MergeRule::KeepLowestLoss),
            param_count_before: 100,
            param_count_after: 100,
            branch_count_before: 4,
            branch_count_after: 4,
            locked: false,
        };
        let mut e1 = e0.clone();
        e1.epoch = 2;
        e1.param_count_before = 100;
        e1.param_count_after = 80;
        e1.branch_count_after = 3;
        append_arch_event(&path, &e0).unwrap();
        append_arch_event(&path, &e1).unwrap();
        let back = read_arch_events(&path).unwrap();
        assert_eq!(back, vec![e0.clone(), e1.clone()]);
        validate_event_sequence(&back).unwrap();

        let mut grew = e1.clone();
        grew.param_count_after = 200;
        assert!(validate_event_sequence(&[e0, grew]).is_err());
    }
}
