//! The training loop: batches, gradient capture, epoch-end merge rounds,
//! validation tracking, checkpoints, and trace output.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datasets::{
    gen_planted, load_idx_images, load_idx_labels, make_one_vs_all, make_splits,
    MultiTaskData, Splits,
};
use crate::error::{Error, Result};
use crate::gradtap::EpochGradientBuffer;
use crate::groupmgr::{
    append_arch_event, apply_merge, plan_merge, ArchEvent, GroupSelector, LockTracker, MergePlan,
    SharingCriterion,
};
use crate::harness::config::{DatasetConfig, TrainConfig};
use crate::harness::eval::{evaluate_model, mean_score};
use crate::harness::trace::{EpochTrace, RunPaths, RunSummary, TraceWriter};
use crate::mtmodel::{
    apply_step, backward_all, build_model, forward_all, param_count, save_checkpoint, Checkpoint,
    EpochLossLedger, ModelOptimizer, MultiTaskModel, TaskSpec, CHECKPOINT_VERSION,
};
use crate::relcluster::{
    assign_tasks, default_min_cluster_size, extract_clusters, mutual_reachability,
    ClusteringReport, PointSet,
};
use crate::ttfact::{stack_epoch, CoreSelection};

pub struct LoadedData {
    pub data: MultiTaskData,
    pub splits: Splits,
    pub tasks: Vec<TaskSpec>,
}

pub fn load_dataset(config: &TrainConfig) -> Result<LoadedData> {
    let tasks = config.derive_tasks();
    let data = match &config.dataset {
        DatasetConfig::IdxOneVsAll(c) => {
            let images = load_idx_images(Path::new(&c.images))?;
            let labels = load_idx_labels(Path::new(&c.labels))?;
            if images.rows() != labels.len() {
                return Err(Error::ingest(format!(
                    "{} holds {} images but {} holds {} labels",
                    c.images,
                    images.rows(),
                    c.labels,
                    labels.len()
                )));
            }
            let (images, labels) = if c.limit > 0 && c.limit < labels.len() {
                let idx: Vec<usize> = (0..c.limit).collect();
                (
                    MultiTaskData {
                        inputs: images,
                        targets: BTreeMap::new(),
                    }
                    .subset(&idx)?
                    .inputs,
                    labels[..c.limit].to_vec(),
                )
            } else {
                (images, labels)
            };
            MultiTaskData {
                targets: make_one_vs_all(&labels, c.num_classes)?,
                inputs: images,
            }
        }
        DatasetConfig::Planted(c) => gen_planted(&c.spec, c.data_seed)?.0,
    };
    let splits = make_splits(
        data.len(),
        config.split.train_frac,
        config.split.val_frac,
        config.split.split_seed,
    )?;
    Ok(LoadedData {
        data,
        splits,
        tasks,
    })
}

pub struct RunOutput {
    pub paths: RunPaths,
    pub epochs: Vec<EpochTrace>,
    pub summary: RunSummary,
    pub final_model: MultiTaskModel,
}

struct EpochStats {
    train_loss: BTreeMap<usize, f64>,
    arch_event: Option<ArchEvent>,
}

pub fn run_experiment(config: &TrainConfig, out_dir: &Path) -> Result<RunOutput> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let paths = RunPaths::new(out_dir);

    let loaded = load_dataset(config)?;
    if loaded.data.inputs.cols() != config.arch.input_dim {
        return Err(Error::config(format!(
            "dataset feeds {} features but the architecture expects {}",
            loaded.data.inputs.cols(),
            config.arch.input_dim
        )));
    }
    let task_ids: Vec<usize> = loaded.tasks.iter().map(|t| t.task_id).collect();
    let val_data = loaded.data.subset(&loaded.splits.val)?;
    let test_data = loaded.data.subset(&loaded.splits.test)?;
    let n_train = loaded.splits.train.len();
    let num_batches = n_train / config.batch_size;
    if num_batches == 0 {
        return Err(Error::config(format!(
            "batch_size {} exceeds the {} training examples",
            config.batch_size, n_train
        )));
    }

    let mut model = build_model(&loaded.tasks, &config.arch, config.seed)?;
    let mut opt = ModelOptimizer::new(&model, config.optimizer)?;
    let sharing_on =
        config.capture.enabled && config.sharing.criterion != SharingCriterion::None;
    let mut selector = GroupSelector::new(config.sharing.criterion, config.seed);
    let mut lock = LockTracker::new();

    // Capture plumbing. The captured gradient is the first trunk layer's
    // weight block (optionally with the bias row appended).
    let grad_rows = config.arch.shared_dim + config.capture.include_bias as usize;
    let grad_cols = config.arch.trunk_dims[0];
    let tt_spec = config.capture.reshape_spec(grad_rows, grad_cols)?;
    let selection = if config.capture.first_core_only {
        CoreSelection::FirstOnly
    } else {
        CoreSelection::All
    };
    let auto_capacity = num_batches.div_ceil(config.capture.stride.max(1)).max(1);
    let capacity = if config.capture.capacity_per_task > 0 {
        config.capture.capacity_per_task
    } else {
        auto_capacity
    };
    let mut buffer = if config.capture.enabled {
        Some(EpochGradientBuffer::new(
            config.capture.stride,
            capacity,
            false,
        )?)
    } else {
        None
    };

    let mut writer = TraceWriter::create(out_dir, config)?;
    let mut epochs: Vec<EpochTrace> = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, BTreeMap<usize, f64>, MultiTaskModel)> = None;
    let mut last_good = Checkpoint {
        format_version: CHECKPOINT_VERSION,
        epoch: 0,
        model: model.clone(),
        meta: serde_json::json!({"state": "initial"}),
    };
    let mut locked_at: Option<usize> = None;
    let mut first_merge_epoch: Option<usize> = None;

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let capture_now = config.capture.enabled
            && !lock.is_locked()
            && epoch >= config.sharing.warmup_epochs;

        let epoch_result: Result<EpochStats> = (|| {
            let mut order = loaded.splits.train.clone();
            let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
            shuffle_rng.set_stream(epoch as u64 + 1);
            order.shuffle(&mut shuffle_rng);

            if capture_now {
                buffer.as_mut().unwrap().begin_epoch(epoch, &task_ids);
            }
            let mut ledger = EpochLossLedger::new(epoch, &task_ids);

            for bi in 0..num_batches {
                let idx = &order[bi * config.batch_size..(bi + 1) * config.batch_size];
                let batch = loaded.data.subset(idx)?;
                let fwd = forward_all(&model, &batch.inputs)?;
                let want_records =
                    capture_now && buffer.as_ref().unwrap().wants(bi);
                let out = backward_all(
                    &model,
                    &fwd,
                    &batch.targets,
                    epoch,
                    bi,
                    want_records,
                    config.capture.include_bias,
                )?;
                ledger.add_batch(&out.per_task_loss)?;
                if want_records {
                    buffer.as_mut().unwrap().capture(out.records)?;
                }
                apply_step(&mut model, &mut opt, &out.grads)?;
            }

            // Merge round: factorize this epoch's records, cluster, select,
            // plan, apply, and log — one architecture event per round. With
            // the criterion disabled the tap still drains (capture must stay
            // purely observational) but no round happens.
            let mut arch_event = None;
            if capture_now {
                let buf = buffer.as_mut().unwrap();
                buf.mark_epoch_complete();
                let drained = buf.drain_epoch()?;
                let ppt = drained.values().map(|v| v.len()).max().unwrap_or(0);
                let total: usize = drained.values().map(|v| v.len()).sum();

                let mut plan = MergePlan::empty(config.sharing.merge_rule);
                if sharing_on && total >= 2 {
                    let matrices = stack_epoch(&drained, &tt_spec, selection)?;
                    let points = PointSet::from_factor_matrices(&matrices)?;
                    let n = points.len();
                    let mcs = config
                        .sharing
                        .min_cluster_size
                        .unwrap_or_else(|| default_min_cluster_size(ppt))
                        .max(2);
                    if n >= 2 && n > mcs {
                        let k = config.sharing.k_neighbors.unwrap_or(mcs).clamp(1, n - 1);
                        let graph = mutual_reachability(&points, k)?;
                        let outcome = extract_clusters(&graph, &points, mcs)?;
                        let assignment =
                            assign_tasks(&outcome, &points, config.sharing.theta)?;
                        let proposals = selector.select_groups(&outcome, &assignment, &graph);
                        plan = plan_merge(
                            &model,
                            &ledger,
                            &proposals,
                            config.sharing.merge_rule,
                        )?;
                        std::fs::create_dir_all(paths.reports_dir())?;
                        let report = ClusteringReport {
                            epoch,
                            points: n,
                            k,
                            min_cluster_size: mcs,
                            theta: config.sharing.theta,
                            clusters: outcome.clusters.clone(),
                            noise_count: outcome.noise_count,
                            assignment,
                        };
                        std::fs::write(
                            paths.report(epoch),
                            serde_json::to_string_pretty(&report)?,
                        )?;
                    }
                }

                if sharing_on {
                    let param_before = param_count(&model);
                    let branches_before = model.branch_count();
                    if !plan.is_empty() {
                        apply_merge(&mut model, &mut opt, &plan)?;
                        first_merge_epoch.get_or_insert(epoch);
                    }
                    let was_empty = plan.is_empty();
                    let locked_now = lock.observe(&model, was_empty);
                    if locked_now && locked_at.is_none() {
                        locked_at = Some(epoch);
                    }
                    let event = ArchEvent {
                        epoch,
                        plan,
                        param_count_before: param_before,
                        param_count_after: param_count(&model),
                        branch_count_before: branches_before,
                        branch_count_after: model.branch_count(),
                        locked: locked_now,
                    };
                    append_arch_event(&paths.arch_events(), &event)?;
                    arch_event = Some(event);
                }
            }

            let train_loss = task_ids
                .iter()
                .map(|&t| {
                    (
                        t,
                        ledger.task_total(t).unwrap_or(f64::NAN) / num_batches as f64,
                    )
                })
                .collect();
            Ok(EpochStats {
                train_loss,
                arch_event,
            })
        })();

        let stats = match epoch_result {
            Ok(stats) => stats,
            Err(err) => {
                // Training blew up: preserve the last finished epoch's model
                // so the run is recoverable, then surface the error.
                save_checkpoint(&last_good, &out_dir.join("model_last_good.json"))?;
                return Err(err);
            }
        };

        let val_metric = evaluate_model(&model, &val_data)?;
        let val_mean = mean_score(&model, &val_metric);
        // Strict > keeps the earliest epoch on exact ties.
        if best.as_ref().map(|(_, b, _, _)| val_mean > *b).unwrap_or(true) {
            best = Some((epoch, val_mean, val_metric.clone(), model.clone()));
        }

        let trace = EpochTrace {
            epoch,
            train_loss: stats.train_loss,
            val_metric,
            val_mean,
            param_count: param_count(&model),
            branch_count: model.branch_count(),
            arch_event: stats.arch_event,
            locked: lock.is_locked(),
            duration_secs: started.elapsed().as_secs_f64(),
        };
        writer.append(&trace)?;
        epochs.push(trace);

        last_good = Checkpoint {
            format_version: CHECKPOINT_VERSION,
            epoch,
            model: model.clone(),
            meta: serde_json::json!({"state": "epoch_complete"}),
        };
    }

    let (best_epoch, best_val_mean, best_val_metrics, best_model) =
        best.expect("at least one epoch ran");
    let test_metrics = evaluate_model(&best_model, &test_data)?;
    let test_mean = mean_score(&best_model, &test_metrics);

    save_checkpoint(
        &Checkpoint {
            format_version: CHECKPOINT_VERSION,
            epoch: best_epoch,
            model: best_model,
            meta: serde_json::json!({
                "config": config,
                "val_metrics": best_val_metrics,
                "val_mean": best_val_mean,
            }),
        },
        &paths.best_checkpoint(),
    )?;
    save_checkpoint(
        &Checkpoint {
            format_version: CHECKPOINT_VERSION,
            epoch: config.epochs - 1,
            model: model.clone(),
            meta: serde_json::json!({"config": config}),
        },
        &paths.final_checkpoint(),
    )?;

    let summary = RunSummary {
        best_epoch,
        best_val_mean,
        val_metrics: best_val_metrics,
        test_metrics,
        test_mean,
        param_count_final: param_count(&model),
        branch_count_final: model.branch_count(),
        locked_at,
        first_merge_epoch,
    };
    std::fs::write(paths.summary(), serde_json::to_string_pretty(&summary)?)?;

    Ok(RunOutput {
        paths,
        epochs,
        summary,
        final_model: model,
    })
}

/// Re-evaluate a saved checkpoint on one split of its own dataset.
pub fn evaluate_checkpoint(
    checkpoint_path: &Path,
    split: &str,
) -> Result<(BTreeMap<usize, f64>, f64, serde_json::Value)> {
    let cp = crate::mtmodel::load_checkpoint(checkpoint_path)?;
    let config: TrainConfig = serde_json::from_value(
        cp.meta
            .get("config")
            .cloned()
            .ok_or_else(|| Error::ingest("checkpoint carries no config"))?,
    )
    .map_err(|e| Error::ingest(format!("checkpoint config: {e}")))?;
    let loaded = load_dataset(&config)?;
    let idx = match split {
        "train" => &loaded.splits.train,
        "val" => &loaded.splits.val,
        "test" => &loaded.splits.test,
        other => {
            return Err(Error::usage(format!(
                "unknown split '{other}' (expected train|val|test)"
            )))
        }
    };
    let data = loaded.data.subset(idx)?;
    let metrics = evaluate_model(&cp.model, &data)?;
    let mean = mean_score(&cp.model, &metrics);
    Ok((metrics, mean, cp.meta))
}
