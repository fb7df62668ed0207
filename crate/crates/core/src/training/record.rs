//! Run artifacts: CSV metric logs and the JSON run record.

use std::fs::File;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One pre-training step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub l_sd: f64,
    pub l_s: f64,
    pub total: f64,
    pub collapse_stat: f64,
}

/// Validation summary at the end of a pre-training epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpochLog {
    pub epoch: usize,
    pub train_total: f64,
    pub val_l_sd: f64,
    pub val_l_s: f64,
    pub val_total: f64,
    pub val_collapse_stat: f64,
}

/// One fine-tuning epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneEpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_precision: f64,
    pub val_recall: f64,
    pub val_f1: f64,
    pub mean_f1: f64,
}

/// Everything needed to regenerate the curves of a run. Wall-clock time is
/// kept here and never in the CSV logs, so those stay reproducible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord<E> {
    pub seed: u64,
    pub config: serde_json::Value,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<E>,
    pub wall_clock_seconds: f64,
}

impl<E: Serialize> RunRecord<E> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(file, self)?;
        Ok(())
    }
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    if !path.exists() {
        return Err(Error::DataMissing(format!("csv {}", path.display())));
    }
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(file, value)?;
    Ok(())
}
