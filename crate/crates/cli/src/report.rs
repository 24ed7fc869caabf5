//! CSV report rows. Every report has a header row and reads back through [`read_csv`].

use std::path::Path;

use pcreg::training::EpochRecord;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatisticsRow {
    pub quantity: String,
    pub value: f64,
    pub cumulative_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub learning_rate: f64,
}

impl From<&EpochRecord> for EpochRow {
    fn from(r: &EpochRecord) -> Self {
        Self {
            epoch: r.epoch,
            train_loss: r.train_loss,
            val_loss: r.val_loss,
            learning_rate: r.learning_rate,
        }
    }
}

/// One evaluated pair. Failed registrations have `success = false`, NaN errors
/// and the failure message in `error`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub scene_id: String,
    pub overlap: f64,
    pub te_m: f64,
    pub re_deg: f64,
    pub success: bool,
    pub inliers: usize,
    pub elapsed_s: f64,
    pub error: String,
}

/// Aggregates over the samples whose overlap exceeds the bin's bound; blank when the bin is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummaryRow {
    pub bin: String,
    pub count: usize,
    pub mte_m: Option<f64>,
    pub mre_deg: Option<f64>,
    pub recall: Option<f64>,
    pub time_mean_ms: Option<f64>,
    pub time_std_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub stage: String,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub samples: usize,
}

fn report_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Report {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| report_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| report_error(path, e))?;
    }
    w.flush().map_err(|e| report_error(path, e))
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> CliResult<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| report_error(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| report_error(path, e))).collect()
}
