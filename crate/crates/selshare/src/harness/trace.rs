//! Run traces. `trace.jsonl` (header line + one line per epoch) and
//! `metrics.csv` are fully deterministic: identical configs produce
//! byte-identical files. Wall-clock numbers go to `timings.csv` only, so
//! timing noise never leaks into the comparable outputs.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::groupmgr::ArchEvent;
use crate::harness::config::TrainConfig;

pub const TRACE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub format_version: u32,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochTrace {
    pub epoch: usize,
    /// Mean per-batch training loss per task.
    pub train_loss: BTreeMap<usize, f64>,
    /// Raw validation metric per task.
    pub val_metric: BTreeMap<usize, f64>,
    /// Mean validation score (higher is better) across tasks.
    pub val_mean: f64,
    pub param_count: usize,
    pub branch_count: usize,
    /// Present on epochs that ran a merge round.
    pub arch_event: Option<ArchEvent>,
    pub locked: bool,
    /// In-memory only; never serialized, so traces stay reproducible.
    #[serde(skip)]
    pub duration_secs: f64,
}

pub struct TraceWriter {
    trace: std::fs::File,
    metrics: std::fs::File,
    timings: std::fs::File,
    metrics_header_written: bool,
}

impl TraceWriter {
    pub fn create(dir: &Path, config: &TrainConfig) -> Result<TraceWriter> {
        let mut trace = std::fs::File::create(dir.join("trace.jsonl"))?;
        let header = TraceHeader {
            format_version: TRACE_VERSION,
            config: config.clone(),
        };
        writeln!(trace, "{}", serde_json::to_string(&header)?)?;
        let mut timings = std::fs::File::create(dir.join("timings.csv"))?;
        writeln!(timings, "epoch,seconds")?;
        Ok(TraceWriter {
            trace,
            metrics: std::fs::File::create(dir.join("metrics.csv"))?,
            timings,
            metrics_header_written: false,
        })
    }

    pub fn append(&mut self, epoch: &EpochTrace) -> Result<()> {
        writeln!(self.trace, "{}", serde_json::to_string(epoch)?)?;

        if !self.metrics_header_written {
            let mut header = String::from("epoch");
            for t in epoch.train_loss.keys() {
                header.push_str(&format!(",train_loss_{t}"));
            }
            for t in epoch.val_metric.keys() {
                header.push_str(&format!(",val_metric_{t}"));
            }
            header.push_str(",val_mean,param_count,branch_count,locked");
            writeln!(self.metrics, "{header}")?;
            self.metrics_header_written = true;
        }
        let mut line = format!("{}", epoch.epoch);
        for v in epoch.train_loss.values() {
            line.push_str(&format!(",{v}"));
        }
        for v in epoch.val_metric.values() {
            line.push_str(&format!(",{v}"));
        }
        line.push_str(&format!(
            ",{},{},{},{}",
            epoch.val_mean, epoch.param_count, epoch.branch_count, epoch.locked as u8
        ));
        writeln!(self.metrics, "{line}")?;

        writeln!(self.timings, "{},{:.6}", epoch.epoch, epoch.duration_secs)?;
        Ok(())
    }
}

pub fn read_trace(path: &Path) -> Result<(TraceHeader, Vec<EpochTrace>)> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::ingest(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = std::io::BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::ingest(format!("{} is empty", path.display())))??;
    let header: TraceHeader = serde_json::from_str(&first)
        .map_err(|e| Error::ingest(format!("{} header: {e}", path.display())))?;
    if header.format_version != TRACE_VERSION {
        return Err(Error::ingest(format!(
            "{}: trace version {} unsupported (expected {TRACE_VERSION})",
            path.display(),
            header.format_version
        )));
    }
    let mut epochs = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        epochs.push(serde_json::from_str(&line).map_err(|e| {
            Error::ingest(format!("{} line {}: {e}", path.display(), i + 2))
        })?);
    }
    Ok((header, epochs))
}

/// Standard file layout inside one run's output directory.
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: &Path) -> Self {
        RunPaths {
            dir: dir.to_path_buf(),
        }
    }

    pub fn trace(&self) -> PathBuf {
        self.dir.join("trace.jsonl")
    }

    pub fn arch_events(&self) -> PathBuf {
        self.dir.join("arch_events.jsonl")
    }

    pub fn best_checkpoint(&self) -> PathBuf {
        self.dir.join("model_best.json")
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join("model_final.json")
    }

    pub fn summary(&self) -> PathBuf {
        self.dir.join("summary.json")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.dir.join("reports")
    }

    pub fn report(&self, epoch: usize) -> PathBuf {
        self.reports_dir().join(format!("epoch_{epoch:04}.json"))
    }
}

/// Per-run rollup written once at the end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub best_epoch: usize,
    pub best_val_mean: f64,
    pub val_metrics: BTreeMap<usize, f64>,
    pub test_metrics: BTreeMap<usize, f64>,
    pub test_mean: f64,
    pub param_count_final: usize,
    pub branch_count_final: usize,
    pub locked_at: Option<usize>,
    pub first_merge_epoch: Option<usize>,
}
