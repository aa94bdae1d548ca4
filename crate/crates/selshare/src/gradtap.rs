//! Capture of per-task branch-entry gradients during training.
//!
//! The tap is observational: it stores copies of gradients the backward pass
//! already produced and never feeds anything back, so enabling or disabling
//! it leaves the trained weights bit-identical. Records accumulate per epoch
//! and are drained in one batch for factorization.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One task's gradient at its branch entry for one training batch. The
/// gradient is the weight-matrix gradient of the first trunk layer
/// ([shared_out, trunk_first_out]); when bias capture is on, the bias row is
/// appended as one extra leading-dimension row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientRecord {
    pub task_id: usize,
    pub epoch: usize,
    pub batch_index: usize,
    pub gradient: Tensor,
}

/// Per-epoch store of captured records with a hard capacity.
#[derive(Debug, Clone)]
pub struct EpochGradientBuffer {
    epoch: usize,
    stride: usize,
    capacity_per_task: usize,
    allow_mid_epoch_drain: bool,
    epoch_complete: bool,
    records: BTreeMap<usize, Vec<GradientRecord>>,
}

impl EpochGradientBuffer {
    /// `stride` keeps every stride-th batch (1 = every batch).
    /// `capacity_per_task` bounds memory; exceeding it is an error, never a
    /// silent drop.
    pub fn new(stride: usize, capacity_per_task: usize, allow_mid_epoch_drain: bool) -> Result<Self> {
        if stride == 0 {
            return Err(Error::config("capture stride must be >= 1"));
        }
        if capacity_per_task == 0 {
            return Err(Error::config("capture capacity must be >= 1"));
        }
        Ok(EpochGradientBuffer {
            epoch: 0,
            stride,
            capacity_per_task,
            allow_mid_epoch_drain,
            epoch_complete: false,
            records: BTreeMap::new(),
        })
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    /// Reset for a new epoch. Any records still in the buffer are discarded;
    /// the trainer is expected to have drained first.
    pub fn begin_epoch(&mut self, epoch: usize, task_ids: &[usize]) {
        self.epoch = epoch;
        self.epoch_complete = false;
        self.records = task_ids.iter().map(|&t| (t, Vec::new())).collect();
    }

    /// Whether this batch index should be captured under the stride.
    pub fn wants(&self, batch_index: usize) -> bool {
        batch_index.is_multiple_of(self.stride)
    }

    /// Store one batch worth of records (one per task). Records for batch
    /// indices the stride skips are ignored wholesale.
    pub fn capture(&mut self, batch_records: Vec<GradientRecord>) -> Result<()> {
        if self.epoch_complete {
            return Err(Error::usage("capture after epoch was marked complete"));
        }
        for rec in batch_records {
            if !self.wants(rec.batch_index) {
                continue;
            }
            if rec.epoch != self.epoch {
                return Err(Error::usage(format!(
                    "record for epoch {} captured during epoch {}",
                    rec.epoch, self.epoch
                )));
            }
            let slot = self.records.get_mut(&rec.task_id).ok_or_else(|| {
                Error::input(format!("record for unknown task {}", rec.task_id))
            })?;
            if slot.len() >= self.capacity_per_task {
                return Err(Error::usage(format!(
                    "capture buffer full for task {} (capacity {})",
                    rec.task_id, self.capacity_per_task
                )));
            }
            slot.push(rec);
        }
        Ok(())
    }

    /// Marks the epoch finished so a drain is an end-of-epoch drain.
    pub fn mark_epoch_complete(&mut self) {
        self.epoch_complete = true;
    }

    pub fn record_count(&self) -> usize {
        self.records.values().map(|v| v.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.record_count() == 0
    }

    /// Hand out everything captured this epoch and clear the buffer.
    /// Mid-epoch drains must be explicitly enabled at construction.
    pub fn drain_epoch(&mut self) -> Result<BTreeMap<usize, Vec<GradientRecord>>> {
        if !self.epoch_complete && !self.allow_mid_epoch_drain {
            return Err(Error::usage(
                "mid-epoch drain requested but not enabled",
            ));
        }
        Ok(std::mem::take(&mut self.records))
    }
}

/// Dump drained records to a JSON file for offline inspection. Intended for
/// the opt-in raw-gradient dump; the hot path never calls this.
pub fn dump_records(records: &BTreeMap<usize, Vec<GradientRecord>>, path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    let json = serde_json::to_string(records)?;
    file.write_all(json.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(task_id: usize, epoch: usize, batch_index: usize) -> GradientRecord {
        GradientRecord {
            task_id,
            epoch,
            batch_index,
            gradient: Tensor::filled(vec![2, 2], 1.0),
        }
    }

    #[test]
    fn stride_keeps_every_nth_batch() {
        let mut buf = EpochGradientBuffer::new(3, 100, false).unwrap();
        buf.begin_epoch(0, &[0]);
        for b in 0..10 {
            buf.capture(vec![rec(0, 0, b)]).unwrap();
        }
        buf.mark_epoch_complete();
        let drained = buf.drain_epoch().unwrap();
        let batches: Vec<usize> = drained[&0].iter().map(|r| r.batch_index).collect();
        assert_eq!(batches, vec![0, 3, 6, 9]);
    }

    #[test]
    fn capacity_overflow_is_an_error_not_a_drop() {
        let mut buf = EpochGradientBuffer::new(1, 2, false).unwrap();
        buf.begin_epoch(0, &[0]);
        buf.capture(vec![rec(0, 0, 0)]).unwrap();
        buf.capture(vec![rec(0, 0, 1)]).unwrap();
        let err = buf.capture(vec![rec(0, 0, 2)]);
        assert!(matches!(err, Err(Error::Usage(_))));
        assert_eq!(buf.record_count(), 2);
    }

    #[test]
    fn drain_clears_and_mid_epoch_drain_is_gated() {
        let mut buf = EpochGradientBuffer::new(1, 10, false).unwrap();
        buf.begin_epoch(1, &[0, 1]);
        buf.capture(vec![rec(0, 1, 0), rec(1, 1, 0)]).unwrap();
        assert!(buf.drain_epoch().is_err());
        buf.mark_epoch_complete();
        let drained = buf.drain_epoch().unwrap();
        assert_eq!(drained.len(), 2);
        assert!(buf.is_empty());

        let mut relaxed = EpochGradientBuffer::new(1, 10, true).unwrap();
        relaxed.begin_epoch(0, &[0]);
        relaxed.capture(vec![rec(0, 0, 0)]).unwrap();
        assert!(relaxed.drain_epoch().is_ok());
    }

    #[test]
    fn wrong_epoch_and_unknown_task_are_errors() {
        let mut buf = EpochGradientBuffer::new(1, 10, false).unwrap();
        buf.begin_epoch(2, &[0]);
        assert!(buf.capture(vec![rec(0, 1, 0)]).is_err());
        assert!(buf.capture(vec![rec(9, 2, 0)]).is_err());
    }
}
