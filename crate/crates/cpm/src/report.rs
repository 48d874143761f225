//! Metric rows, CSV tables and JSON summaries.

use std::path::Path;

use cpm_core::train::{EpochReport, EvalReport, SeparationReport};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Result};
use crate::fsutil::write_atomic;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub split: String,
    pub miou: f64,
    pub f_beta: f64,
    pub sts: Option<f64>,
    pub coverage: f64,
    pub loss: f64,
    pub ce: f64,
    pub focal: f64,
    pub dice: f64,
    pub acp: f64,
    pub vcp: f64,
    pub pcl: f64,
    pub gmm_ready: bool,
    pub aborted_steps: usize,
}

impl EpochRow {
    pub fn new(epoch: &EpochReport, eval: &EvalReport, split: &str) -> Self {
        Self {
            epoch: epoch.epoch,
            split: split.to_string(),
            miou: eval.miou,
            f_beta: eval.f_beta,
            sts: epoch.sts,
            coverage: eval.coverage,
            loss: epoch.mean_loss,
            ce: epoch.agn.ce,
            focal: epoch.agn.focal,
            dice: epoch.agn.dice,
            acp: epoch.cpm.acp,
            vcp: epoch.cpm.vcp,
            pcl: epoch.cpm.pcl,
            gmm_ready: epoch.gmm_ready,
            aborted_steps: epoch.steps.iter().filter(|s| s.aborted).count(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub epochs: usize,
    pub miou: f64,
    pub f_beta: f64,
    pub coverage: f64,
    pub sts: Option<f64>,
    pub sts_history: Vec<f64>,
    pub separation_mse: Option<f64>,
    pub separation_constant_mse: Option<f64>,
}

impl Summary {
    pub fn new(
        epochs: usize,
        eval: &EvalReport,
        sts_history: &[f64],
        sep: Option<SeparationReport>,
    ) -> Self {
        Self {
            epochs,
            miou: eval.miou,
            f_beta: eval.f_beta,
            coverage: eval.coverage,
            sts: sts_history.last().copied(),
            sts_history: sts_history.to_vec(),
            separation_mse: sep.map(|s| s.mse),
            separation_constant_mse: sep.map(|s| s.constant_mse),
        }
    }
}

/// Serialises `rows` as CSV with a header line.
pub fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| io_err("<csv>")(e.into_error()))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    write_atomic(path, &csv_bytes(rows)?)
}
