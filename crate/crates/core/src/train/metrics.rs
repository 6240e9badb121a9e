use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One line of the metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_acc: f64,
    pub reg_n: Option<f64>,
    pub dominance_violations: usize,
    pub rf_mask_zero_frac: Option<f64>,
    pub wall_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub seed: u64,
    pub epochs: Vec<EpochMetrics>,
    pub wall_ms: Option<u64>,
}

impl RunMetrics {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            epochs: Vec::new(),
            wall_ms: None,
        }
    }

    fn last_accuracies(&self, k: usize) -> &[EpochMetrics] {
        &self.epochs[self.epochs.len().saturating_sub(k)..]
    }

    /// Mean test accuracy over the last `k` epochs.
    pub fn tail_mean(&self, k: usize) -> Option<f64> {
        let tail = self.last_accuracies(k);
        (!tail.is_empty()).then(|| tail.iter().map(|e| e.test_acc).sum::<f64>() / tail.len() as f64)
    }

    /// Population standard deviation of the last `k` test accuracies.
    pub fn tail_std(&self, k: usize) -> Option<f64> {
        let tail = self.last_accuracies(k);
        let mean = self.tail_mean(k)?;
        let var = tail.iter().map(|e| (e.test_acc - mean).powi(2)).sum::<f64>() / tail.len() as f64;
        Some(var.sqrt())
    }
}

pub(crate) struct JsonlSink {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonlSink {
    pub(crate) fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub(crate) fn write(&mut self, record: &EpochMetrics) -> Result<()> {
        let line = serde_json::to_string(record).expect("plain struct serializes");
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }

    pub(crate) fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Parses a metrics file written by a run.
pub fn read_jsonl(path: &Path) -> Result<Vec<EpochMetrics>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| Error::FormatAtLine {
                path: path.to_path_buf(),
                line: i as u64 + 1,
                detail: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(epoch: usize, acc: f64) -> EpochMetrics {
        EpochMetrics {
            epoch,
            train_loss: 0.5,
            test_acc: acc,
            reg_n: None,
            dominance_violations: 0,
            rf_mask_zero_frac: Some(0.25),
            wall_ms: None,
        }
    }

    #[test]
    fn tail_statistics() {
        let mut m = RunMetrics::new(0);
        assert_eq!(m.tail_mean(10), None);
        for (i, a) in [0.1, 0.5, 0.7].into_iter().enumerate() {
            m.epochs.push(record(i + 1, a));
        }
        assert_close!(m.tail_mean(2).unwrap(), 0.6, 1e-15);
        assert_close!(m.tail_std(2).unwrap(), 0.1, 1e-15);
    }

    #[test]
    fn jsonl_round_trip_and_nulls() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut sink = JsonlSink::create(&path).unwrap();
        sink.write(&record(1, 0.75)).unwrap();
        sink.finish().unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "{\"epoch\":1,\"train_loss\":0.5,\"test_acc\":0.75,\"reg_n\":null,\"dominance_violations\":0,\"rf_mask_zero_frac\":0.25,\"wall_ms\":null}\n"
        );
        assert_eq!(read_jsonl(&path).unwrap(), vec![record(1, 0.75)]);
    }
}
