//! Training metrics as JSON lines: one record per optimization step and
//! one per epoch, append-only, with stale rows truncated on resume.
//!
//! Records carry no timestamps so reruns of the same configuration
//! produce byte-identical logs.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricsRow {
    Step {
        step: u64,
        epoch: u64,
        lr: f64,
        loss: f64,
        teacher_entropy: f64,
    },
    Epoch {
        epoch: u64,
        mean_loss: f64,
        #[serde(skip_serializing_if = "Option::is_none")]
        knn_top1: Option<f64>,
    },
}

impl MetricsRow {
    #[must_use]
    pub fn epoch(&self) -> u64 {
        match self {
            MetricsRow::Step { epoch, .. } | MetricsRow::Epoch { epoch, .. } => *epoch,
        }
    }
}

/// Line-buffered JSONL sink; every row is flushed so a crash loses at
/// most the row being written.
pub struct MetricsWriter {
    out: BufWriter<File>,
    path: PathBuf,
}

impl MetricsWriter {
    /// Opens for appending, creating the file if needed.
    pub fn append(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(MetricsWriter {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
        })
    }

    /// Reopens an existing log for a run resumed after `completed_epoch`:
    /// rows from later (partially written) epochs are dropped so the log
    /// continues exactly where the checkpoint does. A missing file is
    /// treated as empty.
    pub fn resume(path: &Path, completed_epoch: u64) -> Result<Self> {
        if path.exists() {
            // Kept rows are copied verbatim rather than reparsed and
            // reserialized, so surviving bytes are untouched.
            let file = File::open(path).map_err(|e| Error::io(path, e))?;
            let mut kept = Vec::new();
            for line in BufReader::new(file).lines() {
                let line = line.map_err(|e| Error::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let row: MetricsRow =
                    serde_json::from_str(&line).map_err(|e| Error::Format {
                        path: path.to_path_buf(),
                        reason: e.to_string(),
                    })?;
                if row.epoch() <= completed_epoch {
                    kept.push(line);
                }
            }
            let tmp = path.with_extension("jsonl.tmp");
            {
                let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
                let mut w = BufWriter::new(file);
                for line in &kept {
                    w.write_all(line.as_bytes()).map_err(|e| Error::io(&tmp, e))?;
                    w.write_all(b"\n").map_err(|e| Error::io(&tmp, e))?;
                }
                w.flush().map_err(|e| Error::io(&tmp, e))?;
            }
            std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        }
        Self::append(path)
    }

    pub fn write_row(&mut self, row: &MetricsRow) -> Result<()> {
        serde_json::to_writer(&mut self.out, row).map_err(|e| Error::Format {
            path: self.path.clone(),
            reason: e.to_string(),
        })?;
        self.out.write_all(b"\n").map_err(|e| Error::io(&self.path, e))?;
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut rows = Vec::new();
    for (ix, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: format!("line {}: {e}", ix + 1),
        })?;
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(step: u64, epoch: u64) -> MetricsRow {
        MetricsRow::Step {
            step,
            epoch,
            lr: 0.06,
            loss: 8.3,
            teacher_entropy: 8.1,
        }
    }

    #[test]
    fn rows_round_trip_and_appends_accumulate() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        {
            let mut w = MetricsWriter::append(&path).unwrap();
            w.write_row(&step(0, 0)).unwrap();
            w.write_row(&MetricsRow::Epoch {
                epoch: 0,
                mean_loss: 8.3,
                knn_top1: Some(0.31),
            })
            .unwrap();
        }
        {
            let mut w = MetricsWriter::append(&path).unwrap();
            w.write_row(&step(1, 1)).unwrap();
        }
        let rows = read_metrics(&path).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[2], step(1, 1));
        match &rows[1] {
            MetricsRow::Epoch { knn_top1, .. } => assert_eq!(*knn_top1, Some(0.31)),
            other => panic!("unexpected row {other:?}"),
        }
    }

    #[test]
    fn rows_have_no_timestamps() {
        let text = serde_json::to_string(&step(3, 1)).unwrap();
        assert!(!text.contains("time"), "unexpected field in {text}");
        assert!(text.contains("\"kind\":\"step\""));
    }

    #[test]
    fn resume_truncates_rows_beyond_the_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        {
            let mut w = MetricsWriter::append(&path).unwrap();
            for (s, e) in [(0, 0), (1, 0), (2, 1), (3, 1), (4, 2)] {
                w.write_row(&step(s, e)).unwrap();
            }
        }
        // Resume from a checkpoint written at the end of epoch 1: the
        // epoch-2 rows never completed and must disappear.
        let mut w = MetricsWriter::resume(&path, 1).unwrap();
        w.write_row(&step(4, 2)).unwrap();
        let rows = read_metrics(&path).unwrap();
        assert_eq!(rows.len(), 5);
        assert!(rows.iter().all(|r| r.epoch() <= 2));
        assert_eq!(rows[3], step(3, 1));
    }

    #[test]
    fn resume_with_missing_file_starts_fresh() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        let mut w = MetricsWriter::resume(&path, 7).unwrap();
        w.write_row(&step(0, 8)).unwrap();
        assert_eq!(read_metrics(&path).unwrap().len(), 1);
    }
}
