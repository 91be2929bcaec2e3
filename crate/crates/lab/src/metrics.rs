//! Line-delimited metrics stream.
//!
//! The first line is a schema header, every following line one JSON
//! [`MetricsRecord`]:
//!
//! ```text
//! {"schema":"tiermoe-metrics","version":1}
//! {"step":100,"loss":{...},"lr":0.001,"grad_norm":0.8,"eval":{...},"wall_clock":3.2}
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use tiermoe_core::losses::LossBreakdown;
use tiermoe_core::train::{EvalReport, StepReport};

use crate::error::{LabError, LabResult};

pub const SCHEMA: &str = "tiermoe-metrics";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemaHeader {
    pub schema: String,
    pub version: u32,
}

impl Default for SchemaHeader {
    fn default() -> Self {
        SchemaHeader {
            schema: SCHEMA.into(),
            version: SCHEMA_VERSION,
        }
    }
}

/// Metrics of one evaluation point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    /// Training steps completed.
    pub step: u64,
    /// Loss breakdown of the last training step.
    pub loss: LossBreakdown,
    pub lr: f64,
    pub grad_norm: f64,
    pub eval: EvalReport,
    /// Seconds since the run started.
    pub wall_clock: f64,
}

impl MetricsRecord {
    /// `report` is the step that brought the run to `step` completed steps.
    pub fn new(step: u64, report: &StepReport, eval: EvalReport, wall_clock: f64) -> Self {
        MetricsRecord {
            step,
            loss: report.loss.clone(),
            lr: report.lr,
            grad_norm: report.grad_norm,
            eval,
            wall_clock,
        }
    }

    /// The record with the wall clock zeroed, for run-to-run comparison.
    pub fn timeless(&self) -> Self {
        MetricsRecord {
            wall_clock: 0.0,
            ..self.clone()
        }
    }
}

/// Appends records to a metrics file, flushing after every line so an
/// aborted run keeps everything written so far.
pub struct MetricsWriter {
    out: BufWriter<fs::File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> LabResult<Self> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        serde_json::to_writer(&mut out, &SchemaHeader::default())?;
        out.write_all(b"\n")?;
        out.flush()?;
        Ok(MetricsWriter { out })
    }

    pub fn append(&mut self, rec: &MetricsRecord) -> LabResult<()> {
        serde_json::to_writer(&mut self.out, rec)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

pub fn parse_metrics(text: &str) -> LabResult<Vec<MetricsRecord>> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines
        .next()
        .ok_or_else(|| LabError::Data("metrics stream is empty".into()))?;
    let header: SchemaHeader = serde_json::from_str(first)
        .map_err(|e| LabError::Data(format!("line 1: bad schema header: {e}")))?;
    if header.schema != SCHEMA || header.version != SCHEMA_VERSION {
        return Err(LabError::Data(format!(
            "unsupported metrics schema {} v{}",
            header.schema, header.version
        )));
    }
    let mut out: Vec<MetricsRecord> = Vec::new();
    for (i, l) in lines {
        let rec: MetricsRecord =
            serde_json::from_str(l).map_err(|e| LabError::Data(format!("line {}: {e}", i + 1)))?;
        if out.last().is_some_and(|p| p.step >= rec.step) {
            return Err(LabError::Data(format!(
                "line {}: step {} is not increasing",
                i + 1,
                rec.step
            )));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn read_metrics(path: &Path) -> LabResult<Vec<MetricsRecord>> {
    parse_metrics(&fs::read_to_string(path)?)
}
