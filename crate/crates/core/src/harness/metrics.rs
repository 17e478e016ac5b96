//! JSON Lines metrics stream: a header record, one record per lot, one
//! summary per evaluation.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::evaluation::BleuReport;
use crate::optimizer::LotRecord;
use crate::sampling::Method;

/// The privacy claim attached to every private-mode artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// ε spent so far (or planned, in reports written before training).
    pub epsilon: f64,
    pub delta: f64,
    pub sigma: f64,
    pub q: f64,
    /// Lots accounted for in `epsilon`.
    pub steps: u64,
    pub method: Method,
    pub guarantee: String,
}

impl Provenance {
    pub fn new(epsilon: f64, delta: f64, sigma: f64, q: f64, steps: u64, method: Method) -> Self {
        Self {
            epsilon,
            delta,
            sigma,
            q,
            steps,
            method,
            guarantee: method.guarantee_label().to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Record {
    Run {
        private: bool,
        n: usize,
        lot_size: usize,
        planned_steps: u64,
        start_step: u64,
        #[serde(skip_serializing_if = "Option::is_none")]
        provenance: Option<Provenance>,
    },
    Lot(LotRecord),
    Stop {
        step: u64,
        reason: String,
    },
    Eval {
        step: u64,
        split: String,
        report: BleuReport,
        #[serde(skip_serializing_if = "Option::is_none")]
        provenance: Option<Provenance>,
    },
}

pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsWriter {
    /// Opens `path`, truncating it unless `append` is set.
    pub fn open(path: &Path, append: bool) -> Result<Self, HarnessError> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(|e| HarnessError::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn write(&mut self, record: &Record) -> Result<(), HarnessError> {
        let line = serde_json::to_string(record).expect("records serialize");
        writeln!(self.out, "{line}").map_err(|e| HarnessError::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<(), HarnessError> {
        self.out.flush().map_err(|e| HarnessError::io(&self.path, e))
    }
}

/// Reads a metrics file back, for tests and tooling.
pub fn read_records(path: &Path) -> Result<Vec<Record>, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    text.lines()
        .map(|l| serde_json::from_str(l).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display()))))
        .collect()
}
