use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FluxError, Result};

pub const CSV_HEADER: &str = "step,total_loss,ce_k1,ce_k2,ce_k3,sd_loss,acc_k1,acc_k2,acc_k3";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub total_loss: f64,
    /// Cross-entropy per trained count (fine-tuning).
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub ce: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sd_loss: Option<f64>,
    /// Alignment loss per student count (pre-training).
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub align: Vec<f64>,
    /// Eval accuracy per count, on eval steps.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub acc: Vec<f64>,
    pub lr: f64,
    /// Wall time is not reproducible, so it stays out of the metrics files.
    #[serde(skip)]
    pub wall_ms: u128,
}

/// Append-only step log plus the run's seed and config hash.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub seed: u64,
    pub config_hash: String,
    pub records: Vec<StepRecord>,
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

impl MetricsLog {
    pub fn new(seed: u64, config_hash: impl Into<String>) -> Self {
        Self {
            seed,
            config_hash: config_hash.into(),
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, record: StepRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if record.step <= last.step {
                return Err(FluxError::InvalidInput(format!(
                    "metrics step {} does not follow {}",
                    record.step, last.step
                )));
            }
        }
        self.records.push(record);
        Ok(())
    }

    /// Latest record carrying eval accuracies.
    pub fn last_eval(&self) -> Option<&StepRecord> {
        self.records.iter().rev().find(|r| !r.acc.is_empty())
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let stamp = serde_json::json!({"seed": self.seed, "config_hash": self.config_hash});
        out.push_str(&stamp.to_string());
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.step,
                r.total_loss,
                cell(r.ce.first().copied()),
                cell(r.ce.get(1).copied()),
                cell(r.ce.get(2).copied()),
                cell(r.sd_loss),
                cell(r.acc.first().copied()),
                cell(r.acc.get(1).copied()),
                cell(r.acc.get(2).copied()),
            );
        }
        out
    }

    fn timing_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| format!("{{\"step\":{},\"wall_ms\":{}}}\n", r.step, r.wall_ms))
            .collect()
    }

    /// Writes `metrics.jsonl`, `metrics.csv` and `timing.jsonl` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("metrics.jsonl"), self.to_jsonl())?;
        fs::write(dir.join("metrics.csv"), self.to_csv())?;
        fs::write(dir.join("timing.jsonl"), self.timing_jsonl())?;
        Ok(())
    }
}
