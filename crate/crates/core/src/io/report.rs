use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::train::{write_atomic, EpochLog};

/// One row of a per-layout metrics report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub id: String,
    pub n: usize,
    pub coverage: f64,
    pub overlap: f64,
    pub nll_total: Option<f64>,
    pub nll_per_token: Option<f64>,
}

/// Serializes records to CSV with a header row.
pub fn to_csv<R: Serialize>(rows: &[R]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(w.into_inner().map_err(|e| e.into_error())?)
}

pub fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    write_atomic(path, &to_csv(rows)?)
}

/// `epoch,train_nll,val_nll,seconds`.
pub fn write_training_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    write_csv(path, log)
}
