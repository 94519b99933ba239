use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::Mode;
use crate::model::{LossBreakdown, Metrics};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainRoundReport {
    pub domain: String,
    pub train_loss: LossBreakdown,
    pub steps: usize,
    pub validation: Metrics,
    /// Measured length of the serialized upload.
    pub upload_bytes: usize,
    /// Measured length of the serialized download.
    pub download_bytes: usize,
    pub shared: usize,
    pub personalized: usize,
    pub fresh: usize,
}

/// One line of the report stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub mode: Mode,
    pub domains: Vec<DomainRoundReport>,
    /// Mean of the per-domain validation MSE.
    pub avg_val_mse: f64,
    pub avg_val_mae: f64,
    pub improved: bool,
    pub best_round: usize,
    pub edges: usize,
    pub clusters: usize,
    pub shared: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_time_ms: Option<u64>,
}

impl RoundReport {
    pub fn to_json_line(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Serialization(e.to_string()))
    }
}

/// Test metrics of one domain at the selected round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSummary {
    pub domain: String,
    pub horizon: usize,
    pub mse: f64,
    pub mae: f64,
    pub upload_bytes_per_round: usize,
    pub download_bytes_per_round: usize,
    pub total_bytes: usize,
    /// Bytes needed to send every trainable value of the client once.
    pub full_model_bytes: usize,
    /// Per-round upload size relative to sending the full model.
    pub payload_ratio: f64,
}

pub const SUMMARY_HEADER: [&str; 9] = [
    "domain",
    "horizon",
    "mse",
    "mae",
    "upload_bytes_per_round",
    "download_bytes_per_round",
    "total_bytes",
    "full_model_bytes",
    "payload_ratio",
];

pub fn write_summary_csv<W: Write>(rows: &[DomainSummary], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let ser = |e: csv::Error| Error::Serialization(e.to_string());
    w.write_record(SUMMARY_HEADER).map_err(ser)?;
    for r in rows {
        w.write_record([
            r.domain.clone(),
            r.horizon.to_string(),
            r.mse.to_string(),
            r.mae.to_string(),
            r.upload_bytes_per_round.to_string(),
            r.download_bytes_per_round.to_string(),
            r.total_bytes.to_string(),
            r.full_model_bytes.to_string(),
            r.payload_ratio.to_string(),
        ])
        .map_err(ser)?;
    }
    w.flush().map_err(|e| Error::Serialization(e.to_string()))
}

pub fn write_reports_jsonl(reports: &[RoundReport], path: &Path) -> Result<()> {
    let mut text = String::new();
    for r in reports {
        text.push_str(&r.to_json_line()?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_reports_jsonl(path: &Path) -> Result<Vec<RoundReport>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Serialization(e.to_string())))
        .collect()
}
