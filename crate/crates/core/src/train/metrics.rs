use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::Result;
use crate::lang::Direction;

use super::ValidReport;

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub train_loss: BTreeMap<String, f64>,
    pub valid_loss: BTreeMap<String, f64>,
    pub valid_avg: f64,
    pub is_best: bool,
    pub tokens: usize,
    /// `null` in deterministic mode.
    pub tokens_per_sec: Option<f64>,
}

impl EpochRecord {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        epoch: usize,
        step: u64,
        lr: f64,
        train: &[(Direction, f64)],
        valid: &ValidReport,
        is_best: bool,
        tokens: usize,
        tokens_per_sec: Option<f64>,
    ) -> Self {
        EpochRecord {
            epoch,
            step,
            lr,
            train_loss: train.iter().map(|(d, l)| (d.to_string(), *l)).collect(),
            valid_loss: valid.per_direction.iter().map(|(d, l)| (d.to_string(), *l)).collect(),
            valid_avg: valid.average,
            is_best,
            tokens,
            tokens_per_sec,
        }
    }
}

/// Append-only JSON-lines file.
#[derive(Debug, Clone)]
pub struct MetricsLog {
    path: PathBuf,
}

impl MetricsLog {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        MetricsLog { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append<T: Serialize>(&self, record: &T) -> Result<()> {
        if let Some(dir) = self.path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut f = OpenOptions::new().create(true).append(true).open(&self.path)?;
        let line = serde_json::to_string(record).map_err(|e| crate::Error::config(format!("metrics record: {e}")))?;
        writeln!(f, "{line}")?;
        Ok(())
    }
}
