//! Validation/test metrics. Each task kind has one canonical metric plus a
//! "higher is better" score form so different kinds can be averaged.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datasets::MultiTaskData;
use crate::error::{Error, Result};
use crate::mtmodel::{forward_all, MultiTaskModel, TaskKind};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    /// Threshold at 0.5.
    BinaryAccuracy,
    ArgmaxAccuracy,
    MeanAbsoluteError,
    /// Rank correlation over all pairs; ties contribute zero.
    KendallTau,
}

pub fn metric_for(kind: TaskKind) -> MetricKind {
    match kind {
        TaskKind::BinaryClassification => MetricKind::BinaryAccuracy,
        TaskKind::MulticlassClassification => MetricKind::ArgmaxAccuracy,
        TaskKind::Regression => MetricKind::MeanAbsoluteError,
        TaskKind::Ranking => MetricKind::KendallTau,
    }
}

/// Map a raw metric to "higher is better" for averaging and best-model
/// selection (absolute error flips sign, the rest pass through).
pub fn metric_as_score(metric: MetricKind, value: f64) -> f64 {
    match metric {
        MetricKind::MeanAbsoluteError => -value,
        _ => value,
    }
}

pub fn binary_accuracy(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() || pred.cols() != 1 {
        return Err(Error::input("binary accuracy expects matching [n, 1]"));
    }
    if pred.rows() == 0 {
        return Err(Error::input("empty evaluation split"));
    }
    let hits = pred
        .data()
        .iter()
        .zip(target.data())
        .filter(|(&p, &t)| (p >= 0.5) == (t >= 0.5))
        .count();
    Ok(hits as f64 / pred.rows() as f64)
}

pub fn argmax_accuracy(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() || pred.cols() < 2 {
        return Err(Error::input("argmax accuracy expects matching [n, c>=2]"));
    }
    if pred.rows() == 0 {
        return Err(Error::input("empty evaluation split"));
    }
    let argmax = |row: &[f64]| {
        row.iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
            .unwrap()
            .0
    };
    let hits = (0..pred.rows())
        .filter(|&r| argmax(pred.row(r)) == argmax(target.row(r)))
        .count();
    Ok(hits as f64 / pred.rows() as f64)
}

pub fn mean_absolute_error(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::input("mae expects matching shapes"));
    }
    if pred.is_empty() {
        return Err(Error::input("empty evaluation split"));
    }
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / pred.len() as f64)
}

/// Pair-counting rank correlation in [-1, 1]: (concordant - discordant) over
/// all pairs. Pairs tied in either list count as neither.
pub fn kendall_tau(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::input("rank correlation needs equal lengths"));
    }
    let n = pred.len();
    if n < 2 {
        return Err(Error::input("rank correlation needs at least 2 items"));
    }
    let mut net = 0i64;
    for i in 0..n {
        for j in (i + 1)..n {
            // signum() maps 0.0 to 1.0, so compare directly to keep ties at zero.
            let dp = pred[i] - pred[j];
            let dt = target[i] - target[j];
            if dp != 0.0 && dt != 0.0 {
                net += if (dp > 0.0) == (dt > 0.0) { 1 } else { -1 };
            }
        }
    }
    let pairs = (n * (n - 1) / 2) as f64;
    Ok(net as f64 / pairs)
}

pub fn evaluate_task(kind: TaskKind, pred: &Tensor, target: &Tensor) -> Result<f64> {
    match metric_for(kind) {
        MetricKind::BinaryAccuracy => binary_accuracy(pred, target),
        MetricKind::ArgmaxAccuracy => argmax_accuracy(pred, target),
        MetricKind::MeanAbsoluteError => mean_absolute_error(pred, target),
        MetricKind::KendallTau => kendall_tau(pred.data(), target.data()),
    }
}

/// Raw metric per task on one split.
pub fn evaluate_model(
    model: &MultiTaskModel,
    data: &MultiTaskData,
) -> Result<BTreeMap<usize, f64>> {
    let fwd = forward_all(model, &data.inputs)?;
    let mut out = BTreeMap::new();
    for spec in &model.tasks {
        let target = data
            .targets
            .get(&spec.task_id)
            .ok_or_else(|| Error::input(format!("no targets for task {}", spec.task_id)))?;
        out.insert(
            spec.task_id,
            evaluate_task(spec.kind, &fwd.predictions[&spec.task_id], target)?,
        );
    }
    Ok(out)
}

/// Mean of the per-task scores (metrics mapped to higher-is-better).
pub fn mean_score(model: &MultiTaskModel, metrics: &BTreeMap<usize, f64>) -> f64 {
    let mut sum = 0.0;
    for spec in &model.tasks {
        sum += metric_as_score(metric_for(spec.kind), metrics[&spec.task_id]);
    }
    sum / model.tasks.len() as f64
}
