//! Per-epoch training curves shared by every iterative solver.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean of the (estimated) penalized Lagrangian over the epoch's inner steps.
    pub loss: f64,
    /// Full-population Lagrangian, when the solver computed it.
    pub lagrangian: Option<f64>,
    /// Nash gap of the projected candidate; `None` while some price is not positive.
    pub ng: Option<f64>,
    pub voa: Option<f64>,
    pub vop: Option<f64>,
    /// Seconds spent in the optimizer steps of this epoch.
    pub train_seconds: f64,
    /// Seconds spent on the multiplier update.
    pub multiplier_seconds: f64,
    /// Seconds spent projecting and evaluating the candidate.
    pub eval_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub method: String,
    pub records: Vec<EpochRecord>,
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:e}")).unwrap_or_default()
}

impl History {
    pub fn new(method: impl Into<String>) -> Self {
        History { method: method.into(), records: Vec::new() }
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// Writes the curve as CSV with columns `epoch,ng,voa,vop,loss,lagrangian`.
    /// Timings are excluded so that identical runs give identical files.
    pub fn write_curve_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "ng", "voa", "vop", "loss", "lagrangian"])?;
        for r in &self.records {
            w.write_record([
                r.epoch.to_string(),
                opt(r.ng),
                opt(r.voa),
                opt(r.vop),
                format!("{:e}", r.loss),
                opt(r.lagrangian),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn curve_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_curve_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }

    /// Timing table: `epoch,train_seconds,multiplier_seconds,eval_seconds`.
    pub fn write_timing_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "train_seconds", "multiplier_seconds", "eval_seconds"])?;
        for r in &self.records {
            w.write_record([
                r.epoch.to_string(),
                r.train_seconds.to_string(),
                r.multiplier_seconds.to_string(),
                r.eval_seconds.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
