//! Line-delimited metrics: one JSON object per line, written as the run
//! progresses so a crashed run still leaves a readable stream.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::Result;

/// Per-optimizer-step training record.
#[derive(Debug, Serialize)]
pub struct StepRecord {
    pub kind: &'static str,
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss_b: f64,
    pub loss_s: f64,
    pub loss_n: f64,
    /// Absent (null) when the combiner is disabled.
    pub loss_c: Option<f64>,
    pub loss_total: f64,
}

/// Per-epoch evaluation record.
#[derive(Debug, Serialize)]
pub struct EvalRecordLine {
    pub kind: &'static str,
    pub epoch: usize,
    /// One entry per head: each block, then the combiner when enabled.
    pub head_accuracy: Vec<f64>,
    /// Entry `k-1` is the top-k ensemble accuracy.
    pub ensemble_accuracy: Vec<f64>,
    /// The headline number: the full-ensemble accuracy.
    pub accuracy: f64,
}

pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(MetricsWriter {
            out: BufWriter::new(File::create(path)?),
        })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let line = serde_json::to_string(record)
            .map_err(|e| crate::error::Error::invalid("metrics", e.to_string()))?;
        self.out.write_all(line.as_bytes())?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}
