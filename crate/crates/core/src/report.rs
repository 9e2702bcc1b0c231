//! Result records and their JSON and CSV exports.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::stats::Estimate;

/// A scalar estimate with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub name: String,
    pub estimate: f64,
    pub stderr: f64,
    pub n: usize,
    pub seed: u64,
    pub config_hash: String,
}

impl Record {
    pub fn new(name: &str, e: Estimate, seed: u64, config_hash: &str) -> Self {
        Self { name: name.into(), estimate: e.value, stderr: e.stderr, n: e.n, seed, config_hash: config_hash.into() }
    }
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

/// Serialize rows of a flat record type to CSV with a header.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
