//! Per-prototype dumps of a checkpointed memory.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::NormStats;
use crate::memory::{PrototypeMemory, Provenance};
use crate::model::{decode_and_project, DecoderParams};
use crate::server::graph::NormedRows;
use crate::{Error, Result};

/// Which memory of a checkpoint to inspect.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    /// The memory the client trained on, with its usage counts.
    #[default]
    Local,
    /// The memory the server sent back after the round.
    Global,
}

impl View {
    pub fn as_str(&self) -> &'static str {
        match self {
            View::Local => "local",
            View::Global => "global",
        }
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for View {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "local" => Ok(View::Local),
            "global" => Ok(View::Global),
            other => Err(Error::InvalidArgument(format!(
                "unknown view {other:?} (expected local or global)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeRecord {
    pub slot: usize,
    pub provenance: Provenance,
    pub usage: u64,
    /// Usage as a fraction of all assignments, 0 when nothing was assigned.
    pub frequency: f64,
    /// Most similar other slot and its cosine similarity.
    pub nearest_slot: Option<usize>,
    pub nearest_cosine: Option<f64>,
    pub vector: Vec<f64>,
    /// Normalized-scale forecast decoded from this prototype alone.
    pub pattern: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilaritySummary {
    pub pairs: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub threshold: f64,
    /// Pairs with cosine strictly above `threshold`.
    pub above_threshold: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryInspection {
    pub run_id: String,
    pub round: usize,
    pub domain: String,
    pub view: View,
    pub records: Vec<PrototypeRecord>,
    pub similarity: SimilaritySummary,
}

/// Forecast produced when every patch of the lookback retrieves `prototype`.
pub fn decode_prototype(
    decoder: &DecoderParams,
    prototype: &[f64],
    patches: usize,
) -> Result<Vec<f64>> {
    let d = prototype.len();
    let tiled: Vec<f64> = (0..patches)
        .flat_map(|_| prototype.iter().copied())
        .collect();
    let zq = Array2::from_shape_vec((patches, d), tiled).expect("tiled prototype");
    decode_and_project(decoder, zq.view(), NormStats::IDENTITY)
}

/// Pairwise cosine statistics over distinct rows.
pub fn similarity_summary(memory: &PrototypeMemory, threshold: f64) -> SimilaritySummary {
    let rows = NormedRows::new(memory.vectors.view());
    let m = memory.size();
    let (mut pairs, mut sum, mut min, mut max, mut above) =
        (0, 0.0, f64::INFINITY, f64::NEG_INFINITY, 0);
    for i in 0..m {
        for j in (i + 1)..m {
            let c = rows.cosine(i, &rows, j);
            pairs += 1;
            sum += c;
            min = min.min(c);
            max = max.max(c);
            if c > threshold {
                above += 1;
            }
        }
    }
    if pairs == 0 {
        (min, max) = (0.0, 0.0);
    }
    SimilaritySummary {
        pairs,
        mean: if pairs == 0 { 0.0 } else { sum / pairs as f64 },
        min,
        max,
        threshold,
        above_threshold: above,
    }
}

/// Dumps one memory of a checkpoint. Patterns use the client's own decoder.
pub fn inspect(checkpoint: &Checkpoint, view: View, threshold: f64) -> Result<MemoryInspection> {
    let memory = match view {
        View::Local => &checkpoint.client.memory,
        View::Global => checkpoint.global_memory.as_ref().ok_or_else(|| {
            Error::InvalidArgument(format!(
                "checkpoint for {} round {} has no global memory (the run did not communicate)",
                checkpoint.domain, checkpoint.round
            ))
        })?,
    };
    let patches = checkpoint.client.config.patches();
    let decoder = &checkpoint.client.model.decoder;
    let rows = NormedRows::new(memory.vectors.view());
    let total: u64 = memory.usage.iter().sum();
    let m = memory.size();
    let mut records = Vec::with_capacity(m);
    for k in 0..m {
        let mut nearest: Option<(usize, f64)> = None;
        for j in (0..m).filter(|&j| j != k) {
            let c = rows.cosine(k, &rows, j);
            if nearest.is_none_or(|(_, best)| c > best) {
                nearest = Some((j, c));
            }
        }
        let vector = memory.vectors.row(k).to_vec();
        let pattern = decode_prototype(decoder, &vector, patches)?;
        records.push(PrototypeRecord {
            slot: k,
            provenance: memory.provenance[k],
            usage: memory.usage[k],
            frequency: if total == 0 {
                0.0
            } else {
                memory.usage[k] as f64 / total as f64
            },
            nearest_slot: nearest.map(|n| n.0),
            nearest_cosine: nearest.map(|n| n.1),
            vector,
            pattern,
        });
    }
    Ok(MemoryInspection {
        run_id: checkpoint.run_id.clone(),
        round: checkpoint.round,
        domain: checkpoint.domain.clone(),
        view,
        records,
        similarity: similarity_summary(memory, threshold),
    })
}

fn join(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(";")
}

pub const INSPECTION_HEADER: [&str; 8] = [
    "slot",
    "provenance",
    "usage",
    "frequency",
    "nearest_slot",
    "nearest_cosine",
    "vector",
    "pattern",
];

impl MemoryInspection {
    /// One row per prototype; vectors and patterns are `;`-separated.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let ser = |e: csv::Error| Error::Serialization(e.to_string());
        w.write_record(INSPECTION_HEADER).map_err(ser)?;
        for r in &self.records {
            w.write_record([
                r.slot.to_string(),
                r.provenance.as_str().to_string(),
                r.usage.to_string(),
                r.frequency.to_string(),
                r.nearest_slot.map(|s| s.to_string()).unwrap_or_default(),
                r.nearest_cosine.map(|c| c.to_string()).unwrap_or_default(),
                join(&r.vector),
                join(&r.pattern),
            ])
            .map_err(ser)?;
        }
        w.flush().map_err(|e| Error::Serialization(e.to_string()))
    }

    /// Header lines plus provenance counts and the pairwise summary.
    pub fn summary_text(&self) -> String {
        let count = |p: Provenance| self.records.iter().filter(|r| r.provenance == p).count();
        let s = &self.similarity;
        format!(
            "run {} round {} domain {} view {}\n\
             prototypes {} (shared {}, personalized {}, fresh {}), total usage {}\n\
             pairwise cosine over {} pairs: mean {:.6}, min {:.6}, max {:.6}, {} above {}\n",
            self.run_id,
            self.round,
            self.domain,
            self.view,
            self.records.len(),
            count(Provenance::Shared),
            count(Provenance::Personalized),
            count(Provenance::Fresh),
            self.records.iter().map(|r| r.usage).sum::<u64>(),
            s.pairs,
            s.mean,
            s.min,
            s.max,
            s.above_threshold,
            s.threshold,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ClientState, Hyperparams, Metrics, ModelConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fresh_checkpoint() -> Checkpoint {
        let config = ModelConfig::new(8, 3, 4, 3, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let memory = PrototypeMemory::init(5, 3, 2).unwrap();
        let client =
            ClientState::new("a", config, Hyperparams::default(), memory, &mut rng).unwrap();
        Checkpoint {
            version: crate::checkpoint::CHECKPOINT_VERSION,
            run_id: "t".into(),
            round: 0,
            domain: "a".into(),
            domain_index: 0,
            client,
            global_memory: None,
            validation: Metrics { mse: 0.0, mae: 0.0 },
        }
    }

    #[test]
    fn fresh_memory_has_no_usage_and_fresh_provenance() {
        let ins = inspect(&fresh_checkpoint(), View::Local, 0.7).unwrap();
        assert_eq!(ins.records.len(), 5);
        assert!(ins
            .records
            .iter()
            .all(|r| r.usage == 0 && r.frequency == 0.0));
        assert!(ins
            .records
            .iter()
            .all(|r| r.provenance == Provenance::Fresh));
        assert!(ins.records.iter().all(|r| r.pattern.len() == 3));
        assert_eq!(ins.similarity.pairs, 10);
    }

    #[test]
    fn global_view_requires_a_download() {
        assert!(inspect(&fresh_checkpoint(), View::Global, 0.7).is_err());
    }

    #[test]
    fn pattern_matches_a_tiled_decode() {
        let ck = fresh_checkpoint();
        let ins = inspect(&ck, View::Local, 0.7).unwrap();
        let row = ck.client.memory.vectors.row(2).to_vec();
        let tiled = Array2::from_shape_fn((2, 3), |(_, j)| row[j]);
        let direct =
            decode_and_project(&ck.client.model.decoder, tiled.view(), NormStats::IDENTITY)
                .unwrap();
        assert_eq!(ins.records[2].pattern, direct);
    }

    #[test]
    fn nearest_slot_is_the_most_similar_other_row() {
        let mut ck = fresh_checkpoint();
        ck.client.memory.vectors = ndarray::array![
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.9, 0.1, 0.0],
            [0.0, 0.0, 1.0],
            [0.0, 0.2, 1.0]
        ];
        let ins = inspect(&ck, View::Local, 0.7).unwrap();
        assert_eq!(ins.records[0].nearest_slot, Some(2));
        assert_eq!(ins.records[3].nearest_slot, Some(4));
        assert_eq!(ins.similarity.above_threshold, 2);
        let mut buf = Vec::new();
        ins.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 6);
    }

    #[test]
    fn view_parses() {
        assert_eq!("global".parse::<View>().unwrap(), View::Global);
        assert!("other".parse::<View>().is_err());
    }
}
