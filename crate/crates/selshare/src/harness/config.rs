//! Run configuration: a versioned JSON schema with strict key checking.
//! Tasks are derived from the dataset, never listed twice.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::PlantedSpec;
use crate::error::{Error, Result};
use crate::groupmgr::{MergeRule, SharingCriterion};
use crate::mtmodel::{ArchConfig, TaskKind, TaskSpec};
use crate::net::{LossKind, OptimizerKind};
use crate::ttfact::ReshapeSpec;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxOneVsAllConfig {
    pub images: String,
    pub labels: String,
    pub num_classes: usize,
    /// Keep only the first `limit` examples (0 = all).
    #[serde(default)]
    pub limit: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedConfig {
    pub spec: PlantedSpec,
    pub data_seed: u64,
    /// Treat targets as ranking scores (pairwise loss, rank-correlation
    /// metric) instead of regression values.
    #[serde(default)]
    pub ranking: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetConfig {
    IdxOneVsAll(IdxOneVsAllConfig),
    Planted(PlantedConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub train_frac: f64,
    pub val_frac: f64,
    pub split_seed: u64,
}

fn default_stride() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptureConfig {
    pub enabled: bool,
    /// Record every stride-th batch.
    #[serde(default = "default_stride")]
    pub stride: usize,
    /// Per-task record cap per epoch (0 = sized automatically).
    #[serde(default)]
    pub capacity_per_task: usize,
    /// Append the bias row to each captured gradient.
    #[serde(default)]
    pub include_bias: bool,
    /// Keep only the first factor core instead of all of them.
    #[serde(default)]
    pub first_core_only: bool,
    /// Fixed factorization rank (ignored when `tt_tolerance` is set).
    pub tt_rank: usize,
    /// Relative reconstruction error budget; overrides `tt_rank`.
    #[serde(default)]
    pub tt_tolerance: Option<f64>,
}

impl CaptureConfig {
    /// Factorization recipe for a captured gradient of the given shape.
    pub fn reshape_spec(&self, rows: usize, cols: usize) -> Result<ReshapeSpec> {
        match self.tt_tolerance {
            Some(tol) => {
                ReshapeSpec::with_tolerance(ReshapeSpec::balanced_modes(rows, cols), tol)
            }
            None => ReshapeSpec::for_gradient(rows, cols, self.tt_rank),
        }
    }
}

fn default_warmup() -> usize {
    1
}

fn default_theta() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SharingConfig {
    pub criterion: SharingCriterion,
    pub merge_rule: MergeRule,
    /// Epochs trained before the first merge round.
    #[serde(default = "default_warmup")]
    pub warmup_epochs: usize,
    /// Fraction of a task's clustered points that must share a cluster for
    /// the task to be assigned to it.
    #[serde(default = "default_theta")]
    pub theta: f64,
    /// Neighbor count for core distances (None = min cluster size).
    #[serde(default)]
    pub k_neighbors: Option<usize>,
    /// None = scaled default from points per task.
    #[serde(default)]
    pub min_cluster_size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub format_version: u32,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub arch: ArchConfig,
    pub dataset: DatasetConfig,
    pub split: SplitConfig,
    pub sharing: SharingConfig,
    pub capture: CaptureConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.format_version != CONFIG_VERSION {
            return Err(Error::config(format!(
                "config version {} unsupported (expected {CONFIG_VERSION})",
                self.format_version
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be >= 1"));
        }
        self.optimizer.validate()?;
        self.arch.validate()?;
        if !(self.sharing.theta > 0.0 && self.sharing.theta <= 1.0) {
            return Err(Error::config("sharing.theta must be in (0, 1]"));
        }
        if self.capture.enabled {
            if self.capture.stride == 0 {
                return Err(Error::config("capture.stride must be >= 1"));
            }
            if self.capture.tt_tolerance.is_none() && self.capture.tt_rank == 0 {
                return Err(Error::config(
                    "capture needs tt_rank >= 1 or tt_tolerance",
                ));
            }
            if let Some(t) = self.capture.tt_tolerance {
                if !(t > 0.0 && t < 1.0) {
                    return Err(Error::config("tt_tolerance must be in (0, 1)"));
                }
            }
        }
        match &self.dataset {
            DatasetConfig::IdxOneVsAll(c) => {
                if c.num_classes < 2 {
                    return Err(Error::config("num_classes must be >= 2"));
                }
            }
            DatasetConfig::Planted(c) => {
                c.spec.validate()?;
                if c.ranking && !self.batch_size.is_multiple_of(2) {
                    return Err(Error::config(
                        "ranking tasks need an even batch_size",
                    ));
                }
            }
        }
        Ok(())
    }

    /// The task list implied by the dataset.
    pub fn derive_tasks(&self) -> Vec<TaskSpec> {
        match &self.dataset {
            DatasetConfig::IdxOneVsAll(c) => (0..c.num_classes)
                .map(|c| TaskSpec {
                    task_id: c,
                    name: format!("is_{c}"),
                    kind: TaskKind::BinaryClassification,
                    output_width: 1,
                    loss: LossKind::BinaryCrossEntropy,
                })
                .collect(),
            DatasetConfig::Planted(c) => (0..c.spec.num_tasks())
                .map(|t| TaskSpec {
                    task_id: t,
                    name: format!("planted_{t}"),
                    kind: if c.ranking {
                        TaskKind::Ranking
                    } else {
                        TaskKind::Regression
                    },
                    output_width: 1,
                    loss: if c.ranking {
                        LossKind::PairwiseRanking
                    } else {
                        LossKind::Mse
                    },
                })
                .collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<TrainConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::ingest(format!("cannot read {}: {e}", path.display())))?;
        let cfg: TrainConfig = serde_json::from_str(&text)
            .map_err(|e| Error::ingest(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
