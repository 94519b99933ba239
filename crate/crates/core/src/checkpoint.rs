//! Per-domain checkpoints, stored as JSON under `{run_dir}/{round}/{domain}.json`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::memory::PrototypeMemory;
use crate::model::{ClientState, Metrics};
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub run_id: String,
    pub round: usize,
    pub domain: String,
    pub domain_index: usize,
    /// Client state right after local training, as validated.
    pub client: ClientState,
    /// Memory the server sent back that round; absent without communication.
    pub global_memory: Option<PrototypeMemory>,
    pub validation: Metrics,
}

impl Checkpoint {
    pub fn path(run_dir: &Path, round: usize, domain: &str) -> PathBuf {
        run_dir
            .join(round.to_string())
            .join(format!("{domain}.json"))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Serialization(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Self =
            serde_json::from_str(text).map_err(|e| Error::Serialization(e.to_string()))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Serialization(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        Ok(ck)
    }

    /// Writes to `{run_dir}/{round}/{domain}.json` and returns the path.
    pub fn save(&self, run_dir: &Path) -> Result<PathBuf> {
        let path = Self::path(run_dir, self.round, &self.domain);
        let dir = path.parent().expect("round directory");
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        std::fs::write(&path, self.to_json()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Serialization(format!("{}: {e}", path.display())))
    }

    /// Every checkpoint of one round directory, ordered by domain index.
    pub fn load_round(round_dir: &Path) -> Result<Vec<Self>> {
        let entries = std::fs::read_dir(round_dir).map_err(|e| Error::io(round_dir, e))?;
        let mut out = Vec::new();
        for entry in entries {
            let path = entry.map_err(|e| Error::io(round_dir, e))?.path();
            if path.extension().is_some_and(|e| e == "json") {
                out.push(Self::load(&path)?);
            }
        }
        if out.is_empty() {
            return Err(Error::Empty(format!(
                "no checkpoints in {}",
                round_dir.display()
            )));
        }
        out.sort_by_key(|c| c.domain_index);
        Ok(out)
    }
}
