//! Per-step metrics as JSON lines, flushed after every record.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde_json::{json, Value};
use vibprune_core::pipeline::{MetricsSink, StepRecord};

use crate::error::{Error, Result};

pub fn record_json(r: &StepRecord) -> Value {
    let mut v = json!({
        "step": r.step,
        "phase": r.phase.as_str(),
        "loss_total": r.loss_total,
        "loss_task": r.loss_task,
        "loss_vib": r.loss_vib,
        "loss_pred": r.loss_pred,
        "loss_layer": r.loss_layer,
        "loss_sparsity": r.loss_sparsity,
        "s_e": r.s_e,
        "t_cur": r.t_cur,
        "lambda1": r.lambda1,
        "lambda2": r.lambda2,
    });
    if let Some(a) = r.val_accuracy {
        v["val_accuracy"] = json!(a);
    }
    v
}

/// Appends to `metrics.jsonl`, so the phases of one run share a file.
pub struct JsonlSink {
    out: BufWriter<File>,
}

impl JsonlSink {
    pub fn append(path: &Path) -> Result<Self> {
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(Error::io(path))?;
        Ok(JsonlSink {
            out: BufWriter::new(f),
        })
    }
}

impl MetricsSink for JsonlSink {
    fn record(&mut self, rec: &StepRecord) -> vibprune_core::Result<()> {
        writeln!(self.out, "{}", record_json(rec))
            .and_then(|_| self.out.flush())
            .map_err(|e| vibprune_core::Error::Data(format!("writing metrics: {e}")))
    }
}
