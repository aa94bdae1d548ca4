//! The multi-task model: a shared feature path feeding per-task branches.
//!
//! Topology: extractor stack (optional, freezable) -> hard-shared layer ->
//! branches. Each branch is a trunk (layer stack) plus one output head per
//! task it owns. At construction every task gets its own branch and all
//! trunks are clones of one seeded initialization, so branches differ only
//! in their heads until training separates them. Merging moves heads onto a
//! surviving trunk and drops the rest.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradtap::GradientRecord;
use crate::net::{
    backward_stack, forward_stack, loss_grad, loss_value, Activation, DenseLayer, LayerGrads,
    LossKind, OptimizerKind, OptimizerState,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    BinaryClassification,
    MulticlassClassification,
    Regression,
    Ranking,
}

impl TaskKind {
    /// Output activation implied by the task kind.
    pub fn head_activation(&self) -> Activation {
        match self {
            TaskKind::BinaryClassification => Activation::Sigmoid,
            TaskKind::MulticlassClassification => Activation::Softmax,
            TaskKind::Regression | TaskKind::Ranking => Activation::Linear,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: usize,
    pub name: String,
    pub kind: TaskKind,
    pub output_width: usize,
    pub loss: LossKind,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.output_width == 0 {
            return Err(Error::config(format!(
                "task {}: output width must be >= 1",
                self.task_id
            )));
        }
        let ok = match self.kind {
            TaskKind::BinaryClassification => {
                self.output_width == 1
                    && matches!(self.loss, LossKind::BinaryCrossEntropy | LossKind::Mse)
            }
            TaskKind::MulticlassClassification => {
                self.output_width >= 2 && matches!(self.loss, LossKind::CategoricalCrossEntropy)
            }
            TaskKind::Regression => matches!(self.loss, LossKind::Mse),
            TaskKind::Ranking => {
                self.output_width == 1 && matches!(self.loss, LossKind::PairwiseRanking)
            }
        };
        if !ok {
            return Err(Error::config(format!(
                "task {}: kind {:?} is incompatible with loss {:?} / width {}",
                self.task_id, self.kind, self.loss, self.output_width
            )));
        }
        Ok(())
    }
}

/// Static architecture dimensions shared by every branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub input_dim: usize,
    /// Hidden widths of the extractor stack; empty means identity (inputs
    /// feed the shared layer directly).
    pub extractor_dims: Vec<usize>,
    pub extractor_frozen: bool,
    /// Width of the hard-shared layer, the representation every branch
    /// consumes.
    pub shared_dim: usize,
    /// Hidden widths of each branch trunk; at least one layer (the capture
    /// point is the first trunk layer).
    pub trunk_dims: Vec<usize>,
    pub hidden_activation: Activation,
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.shared_dim == 0 {
            return Err(Error::config("input_dim and shared_dim must be >= 1"));
        }
        if self.trunk_dims.is_empty() || self.trunk_dims.contains(&0) {
            return Err(Error::config(
                "trunk needs at least one layer of positive width",
            ));
        }
        if self.extractor_dims.contains(&0) {
            return Err(Error::config("extractor widths must be positive"));
        }
        Ok(())
    }

    /// Width of the representation entering the shared layer.
    fn shared_input_dim(&self) -> usize {
        self.extractor_dims.last().copied().unwrap_or(self.input_dim)
    }
}

/// One branch: a trunk plus the output heads of the tasks it owns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub trunk: Vec<DenseLayer>,
    pub heads: BTreeMap<usize, DenseLayer>,
}

impl Branch {
    pub fn task_ids(&self) -> Vec<usize> {
        self.heads.keys().cloned().collect()
    }

    pub fn trunk_param_count(&self) -> usize {
        self.trunk.iter().map(|l| l.param_count()).sum()
    }

    /// Trainable scalars in this branch: trunk plus all heads.
    pub fn param_count(&self) -> usize {
        self.trunk_param_count()
            + self.heads.values().map(|l| l.param_count()).sum::<usize>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiTaskModel {
    pub tasks: Vec<TaskSpec>,
    pub extractor: Vec<DenseLayer>,
    pub extractor_frozen: bool,
    pub shared: DenseLayer,
    /// Branch id -> branch. Ids are the founding task's id and stay stable
    /// across merges (survivors keep their id, discarded ids disappear).
    pub branches: BTreeMap<usize, Branch>,
    pub task_to_branch: BTreeMap<usize, usize>,
}

impl MultiTaskModel {
    pub fn task_ids(&self) -> Vec<usize> {
        self.tasks.iter().map(|t| t.task_id).collect()
    }

    pub fn task_spec(&self, task_id: usize) -> Result<&TaskSpec> {
        self.tasks
            .iter()
            .find(|t| t.task_id == task_id)
            .ok_or_else(|| Error::input(format!("unknown task {task_id}")))
    }

    pub fn branch_of_task(&self, task_id: usize) -> Result<usize> {
        self.task_to_branch
            .get(&task_id)
            .copied()
            .ok_or_else(|| Error::input(format!("task {task_id} has no branch")))
    }

    pub fn branch_count(&self) -> usize {
        self.branches.len()
    }

    /// Structural consistency: every task on exactly one existing branch,
    /// every branch owning >= 1 task that maps back to it.
    pub fn check_consistent(&self) -> Result<()> {
        let mut owned = 0usize;
        for (bid, branch) in &self.branches {
            if branch.heads.is_empty() {
                return Err(Error::structure(format!("branch {bid} owns no tasks")));
            }
            for task in branch.heads.keys() {
                if self.task_to_branch.get(task) != Some(bid) {
                    return Err(Error::structure(format!(
                        "task {task} head lives on branch {bid} but maps elsewhere"
                    )));
                }
                owned += 1;
            }
        }
        if owned != self.tasks.len() || self.task_to_branch.len() != self.tasks.len() {
            return Err(Error::structure(format!(
                "{} tasks but {} heads owned",
                self.tasks.len(),
                owned
            )));
        }
        Ok(())
    }
}

/// Build the initial one-branch-per-task model. All trunks are clones of a
/// single seeded draw, so they start bit-identical.
pub fn build_model(tasks: &[TaskSpec], arch: &ArchConfig, seed: u64) -> Result<MultiTaskModel> {
    use rand::SeedableRng;
    arch.validate()?;
    if tasks.len() < 2 {
        return Err(Error::config("need at least 2 tasks"));
    }
    let mut seen = std::collections::BTreeSet::new();
    for (i, t) in tasks.iter().enumerate() {
        t.validate()?;
        if !seen.insert(t.task_id) {
            return Err(Error::config(format!("duplicate task id {}", t.task_id)));
        }
        if t.task_id != i {
            return Err(Error::config(format!(
                "task ids must be contiguous from 0 (position {i} has id {})",
                t.task_id
            )));
        }
    }

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut extractor = Vec::new();
    let mut prev = arch.input_dim;
    for &w in &arch.extractor_dims {
        extractor.push(DenseLayer::new_seeded(prev, w, arch.hidden_activation, &mut rng));
        prev = w;
    }
    let shared = DenseLayer::new_seeded(
        arch.shared_input_dim(),
        arch.shared_dim,
        arch.hidden_activation,
        &mut rng,
    );
    let mut trunk = Vec::new();
    prev = arch.shared_dim;
    for &w in &arch.trunk_dims {
        trunk.push(DenseLayer::new_seeded(prev, w, arch.hidden_activation, &mut rng));
        prev = w;
    }
    let trunk_out = prev;

    let mut branches = BTreeMap::new();
    let mut task_to_branch = BTreeMap::new();
    for t in tasks {
        // Heads start at zero so initial predictions carry no seed noise:
        // the first gradients into each branch are driven by the data alone,
        // which keeps early training signals comparable across tasks. The
        // head's own gradient is nonzero, so training breaks the symmetry on
        // the first step.
        let mut head = DenseLayer::new_seeded(
            trunk_out,
            t.output_width,
            t.kind.head_activation(),
            &mut rng,
        );
        head.weights.data_mut().fill(0.0);
        branches.insert(
            t.task_id,
            Branch {
                trunk: trunk.clone(),
                heads: BTreeMap::from([(t.task_id, head)]),
            },
        );
        task_to_branch.insert(t.task_id, t.task_id);
    }
    let model = MultiTaskModel {
        tasks: tasks.to_vec(),
        extractor,
        extractor_frozen: arch.extractor_frozen,
        shared,
        branches,
        task_to_branch,
    };
    model.check_consistent()?;
    Ok(model)
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// Input plus each extractor layer's output; last entry feeds the shared
    /// layer.
    pub extractor_acts: Vec<Tensor>,
    pub shared_out: Tensor,
    /// Per branch: shared_out plus each trunk layer's output.
    pub trunk_acts: BTreeMap<usize, Vec<Tensor>>,
    pub predictions: BTreeMap<usize, Tensor>,
}

/// Run the whole model on one batch. The extractor and shared layer are
/// evaluated once; every branch trunk once; every head once.
pub fn forward_all(model: &MultiTaskModel, batch: &Tensor) -> Result<ForwardPass> {
    if batch.shape().len() != 2 {
        return Err(Error::config("batch must be [rows, features]"));
    }
    let want = model
        .extractor
        .first()
        .map(|l| l.in_dim())
        .unwrap_or(model.shared.in_dim());
    if batch.cols() != want {
        return Err(Error::config(format!(
            "batch width {} does not match model input {want}",
            batch.cols()
        )));
    }
    let extractor_acts = forward_stack(&model.extractor, batch)?;
    let shared_out = model.shared.forward(extractor_acts.last().unwrap())?;
    let mut trunk_acts = BTreeMap::new();
    let mut predictions = BTreeMap::new();
    for (&bid, branch) in &model.branches {
        let acts = forward_stack(&branch.trunk, &shared_out)?;
        for (&task, head) in &branch.heads {
            predictions.insert(task, head.forward(acts.last().unwrap())?);
        }
        trunk_acts.insert(bid, acts);
    }
    Ok(ForwardPass {
        extractor_acts,
        shared_out,
        trunk_acts,
        predictions,
    })
}

#[derive(Debug, Clone)]
pub struct BranchGrads {
    pub trunk: Vec<LayerGrads>,
    pub heads: BTreeMap<usize, LayerGrads>,
}

#[derive(Debug, Clone)]
pub struct ModelGrads {
    /// Empty when the extractor is frozen or absent.
    pub extractor: Vec<LayerGrads>,
    pub shared: LayerGrads,
    pub branches: BTreeMap<usize, BranchGrads>,
}

#[derive(Debug, Clone)]
pub struct BackwardOutput {
    pub grads: ModelGrads,
    /// One record per task (ascending task id) when capture was requested,
    /// empty otherwise.
    pub records: Vec<GradientRecord>,
    pub per_task_loss: BTreeMap<usize, f64>,
}

impl BackwardOutput {
    /// The shared layer's weight gradient G.
    pub fn shared_gradient(&self) -> &Tensor {
        &self.grads.shared.d_weights
    }
}

/// Joint backward over the summed task losses. The parameter-update path is
/// identical whether records are requested or not: records come from an
/// extra read-only pass per task, so capturing never perturbs training.
pub fn backward_all(
    model: &MultiTaskModel,
    fwd: &ForwardPass,
    targets: &BTreeMap<usize, Tensor>,
    epoch: usize,
    batch_index: usize,
    with_records: bool,
    records_include_bias: bool,
) -> Result<BackwardOutput> {
    let batch_rows = fwd.shared_out.rows();
    let mut d_shared_out = Tensor::zeros(vec![batch_rows, model.shared.out_dim()]);
    let mut branch_grads = BTreeMap::new();
    let mut records = Vec::new();
    let mut per_task_loss = BTreeMap::new();

    for (&bid, branch) in &model.branches {
        let acts = &fwd.trunk_acts[&bid];
        let trunk_last = acts.last().unwrap();
        let mut d_trunk_out = Tensor::zeros(vec![batch_rows, trunk_last.cols()]);
        let mut head_grads = BTreeMap::new();

        for (&task, head) in &branch.heads {
            let spec = model.task_spec(task)?;
            let pred = &fwd.predictions[&task];
            let target = targets
                .get(&task)
                .ok_or_else(|| Error::input(format!("missing target for task {task}")))?;
            per_task_loss.insert(task, loss_value(spec.loss, pred, target)?);
            let d_pred = loss_grad(spec.loss, pred, target)?;
            let (hg, d_head_in) = head.backward(trunk_last, pred, &d_pred);
            head_grads.insert(task, hg);
            d_trunk_out.add_assign(&d_head_in);

            if with_records {
                // Observational per-task pass: gradient of THIS task's loss
                // w.r.t. the branch's first trunk layer.
                let (task_trunk_grads, _) = backward_stack(&branch.trunk, acts, &d_head_in);
                let first = &task_trunk_grads[0];
                let gradient = if records_include_bias {
                    let w = &first.d_weights;
                    let (rows, cols) = (w.rows(), w.cols());
                    let mut data = Vec::with_capacity((rows + 1) * cols);
                    data.extend_from_slice(w.data());
                    data.extend_from_slice(first.d_bias.data());
                    Tensor::new(vec![rows + 1, cols], data)?
                } else {
                    first.d_weights.clone()
                };
                gradient.ensure_finite("gradient record")?;
                records.push(GradientRecord {
                    task_id: task,
                    epoch,
                    batch_index,
                    gradient,
                });
            }
        }

        let (trunk_grads, d_branch_in) = backward_stack(&branch.trunk, acts, &d_trunk_out);
        d_shared_out.add_assign(&d_branch_in);
        branch_grads.insert(
            bid,
            BranchGrads {
                trunk: trunk_grads,
                heads: head_grads,
            },
        );
    }

    let shared_in = fwd.extractor_acts.last().unwrap();
    let (shared_grads, d_extr_out) =
        model
            .shared
            .backward(shared_in, &fwd.shared_out, &d_shared_out);

    let extractor_grads = if model.extractor_frozen || model.extractor.is_empty() {
        Vec::new()
    } else {
        let (g, _) = backward_stack(&model.extractor, &fwd.extractor_acts, &d_extr_out);
        g
    };

    records.sort_by_key(|r| r.task_id);
    Ok(BackwardOutput {
        grads: ModelGrads {
            extractor: extractor_grads,
            shared: shared_grads,
            branches: branch_grads,
        },
        records,
        per_task_loss,
    })
}

/// Shared-layer weight gradient produced by ONE task's loss alone. Test
/// support for the additivity contract: summing this over all tasks must
/// reproduce the joint backward's shared gradient.
pub fn shared_gradient_of_task(
    model: &MultiTaskModel,
    fwd: &ForwardPass,
    task_id: usize,
    target: &Tensor,
) -> Result<Tensor> {
    let spec = model.task_spec(task_id)?;
    let bid = model.branch_of_task(task_id)?;
    let branch = &model.branches[&bid];
    let acts = &fwd.trunk_acts[&bid];
    let pred = &fwd.predictions[&task_id];
    let d_pred = loss_grad(spec.loss, pred, target)?;
    let head = &branch.heads[&task_id];
    let (_, d_head_in) = head.backward(acts.last().unwrap(), pred, &d_pred);
    let (_, d_branch_in) = backward_stack(&branch.trunk, acts, &d_head_in);
    let shared_in = fwd.extractor_acts.last().unwrap();
    let (shared_grads, _) = model
        .shared
        .backward(shared_in, &fwd.shared_out, &d_branch_in);
    Ok(shared_grads.d_weights)
}

/// Count of trainable scalars: shared layer + every branch (trunks and
/// heads) + the extractor only when it trains.
pub fn param_count(model: &MultiTaskModel) -> usize {
    let extractor = if model.extractor_frozen {
        0
    } else {
        model.extractor.iter().map(|l| l.param_count()).sum()
    };
    extractor
        + model.shared.param_count()
        + model.branches.values().map(|b| b.param_count()).sum::<usize>()
}

/// Optimizer state for one layer's weight and bias tensors.
#[derive(Debug, Clone)]
pub struct LayerOpt {
    pub w: OptimizerState,
    pub b: OptimizerState,
}

impl LayerOpt {
    fn new(kind: OptimizerKind, layer: &DenseLayer) -> Self {
        LayerOpt {
            w: OptimizerState::new(kind, layer.weights.shape()),
            b: OptimizerState::new(kind, layer.bias.shape()),
        }
    }

    fn step(&mut self, layer: &mut DenseLayer, grads: &LayerGrads) -> Result<()> {
        self.w.step(&mut layer.weights, &grads.d_weights)?;
        self.b.step(&mut layer.bias, &grads.d_bias)
    }
}

#[derive(Debug, Clone)]
pub struct BranchOpt {
    pub trunk: Vec<LayerOpt>,
    pub heads: BTreeMap<usize, LayerOpt>,
}

/// Optimizer state mirroring the model tree. Merges move or drop subtrees in
/// lockstep with the branches they belong to.
#[derive(Debug, Clone)]
pub struct ModelOptimizer {
    pub kind: OptimizerKind,
    pub extractor: Vec<LayerOpt>,
    pub shared: LayerOpt,
    pub branches: BTreeMap<usize, BranchOpt>,
}

impl ModelOptimizer {
    pub fn new(model: &MultiTaskModel, kind: OptimizerKind) -> Result<Self> {
        kind.validate()?;
        Ok(ModelOptimizer {
            kind,
            extractor: model
                .extractor
                .iter()
                .map(|l| LayerOpt::new(kind, l))
                .collect(),
            shared: LayerOpt::new(kind, &model.shared),
            branches: model
                .branches
                .iter()
                .map(|(&bid, b)| {
                    (
                        bid,
                        BranchOpt {
                            trunk: b.trunk.iter().map(|l| LayerOpt::new(kind, l)).collect(),
                            heads: b
                                .heads
                                .iter()
                                .map(|(&t, h)| (t, LayerOpt::new(kind, h)))
                                .collect(),
                        },
                    )
                })
                .collect(),
        })
    }
}

/// One optimizer step over every trainable tensor. A frozen extractor has no
/// gradients and is left untouched.
pub fn apply_step(
    model: &mut MultiTaskModel,
    opt: &mut ModelOptimizer,
    grads: &ModelGrads,
) -> Result<()> {
    if !grads.extractor.is_empty() {
        if grads.extractor.len() != model.extractor.len() {
            return Err(Error::input("extractor gradient count mismatch"));
        }
        for ((layer, state), g) in model
            .extractor
            .iter_mut()
            .zip(opt.extractor.iter_mut())
            .zip(grads.extractor.iter())
        {
            state.step(layer, g)?;
        }
    }
    opt.shared.step(&mut model.shared, &grads.shared)?;
    for (&bid, bg) in &grads.branches {
        let branch = model
            .branches
            .get_mut(&bid)
            .ok_or_else(|| Error::input(format!("gradients for unknown branch {bid}")))?;
        let bopt = opt
            .branches
            .get_mut(&bid)
            .ok_or_else(|| Error::internal(format!("optimizer missing branch {bid}")))?;
        for ((layer, state), g) in branch
            .trunk
            .iter_mut()
            .zip(bopt.trunk.iter_mut())
            .zip(bg.trunk.iter())
        {
            state.step(layer, g)?;
        }
        for (&task, hg) in &bg.heads {
            let head = branch
                .heads
                .get_mut(&task)
                .ok_or_else(|| Error::input(format!("gradients for unknown head {task}")))?;
            let hopt = bopt
                .heads
                .get_mut(&task)
                .ok_or_else(|| Error::internal(format!("optimizer missing head {task}")))?;
            hopt.step(head, hg)?;
        }
    }
    Ok(())
}

/// Per-task loss sums for the current epoch; the merge rule ranks branches
/// by these.
#[derive(Debug, Clone)]
pub struct EpochLossLedger {
    pub epoch: usize,
    totals: BTreeMap<usize, f64>,
}

impl EpochLossLedger {
    pub fn new(epoch: usize, task_ids: &[usize]) -> Self {
        EpochLossLedger {
            epoch,
            totals: task_ids.iter().map(|&t| (t, 0.0)).collect(),
        }
    }

    pub fn add_batch(&mut self, per_task_loss: &BTreeMap<usize, f64>) -> Result<()> {
        for (&task, &loss) in per_task_loss {
            if !loss.is_finite() || loss < 0.0 {
                return Err(Error::numeric(format!(
                    "task {task}: batch loss {loss} is not a valid loss"
                )));
            }
            *self
                .totals
                .get_mut(&task)
                .ok_or_else(|| Error::input(format!("ledger knows no task {task}")))? += loss;
        }
        Ok(())
    }

    pub fn task_total(&self, task: usize) -> Option<f64> {
        self.totals.get(&task).copied()
    }

    /// Aggregated loss per branch: sum over the tasks it owns.
    pub fn branch_totals(&self, model: &MultiTaskModel) -> BTreeMap<usize, f64> {
        let mut out: BTreeMap<usize, f64> = model.branches.keys().map(|&b| (b, 0.0)).collect();
        for (&task, &loss) in &self.totals {
            if let Some(&bid) = model.task_to_branch.get(&task) {
                *out.get_mut(&bid).unwrap() += loss;
            }
        }
        out
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Versioned JSON container for a model snapshot. `meta` carries
/// driver-level context (config echo, validation metrics) that the model
/// layer does not interpret.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub epoch: usize,
    pub model: MultiTaskModel,
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    let json = serde_json::to_string(checkpoint)?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::ingest(format!("cannot read {}: {e}", path.display())))?;
    let cp: Checkpoint = serde_json::from_str(&text)
        .map_err(|e| Error::ingest(format!("{} is not a checkpoint: {e}", path.display())))?;
    if cp.format_version != CHECKPOINT_VERSION {
        return Err(Error::ingest(format!(
            "{}: checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
            path.display(),
            cp.format_version
        )));
    }
    cp.model.check_consistent()?;
    Ok(cp)
}
