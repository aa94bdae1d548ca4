//! Experiment driver: configuration, the training/merging loop, metrics,
//! and trace files.

pub mod config;
pub mod eval;
pub mod run;
pub mod trace;

pub use config::{
    CaptureConfig, DatasetConfig, IdxOneVsAllConfig, PlantedConfig, SharingConfig, SplitConfig,
    TrainConfig, CONFIG_VERSION,
};
pub use eval::{evaluate_model, mean_score, metric_as_score, metric_for, MetricKind};
pub use run::{evaluate_checkpoint, load_dataset, run_experiment, LoadedData, RunOutput};
pub use trace::{read_trace, EpochTrace, RunPaths, RunSummary, TraceHeader, TraceWriter};
