//! Checkpoint container.
//!
//! A checkpoint is a UTF-8 JSON object:
//!
//! ```text
//! {
//!   "format": "fplab-checkpoint",
//!   "version": 1,
//!   "architecture": { "data_dim", "hidden", "activation", "embedding": {..} },
//!   "widths": [D+E, .., D],
//!   "seed": <init seed>,
//!   "epoch": <epoch or null>,
//!   "n_params": N,
//!   "params": "<base64 of N little-endian IEEE-754 f64>"
//! }
//! ```
//!
//! `widths` is redundant with `architecture` and is checked on load.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{Architecture, ScoreNet};
use crate::error::{Error, Result};

pub const FORMAT: &str = "fplab-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub architecture: Architecture,
    pub widths: Vec<usize>,
    pub seed: u64,
    pub epoch: Option<usize>,
    pub n_params: usize,
    pub params: String,
}

impl Checkpoint {
    pub fn from_net(net: &ScoreNet, seed: u64, epoch: Option<usize>) -> Self {
        let mut bytes = Vec::with_capacity(net.params().len() * 8);
        for p in net.params() {
            bytes.extend_from_slice(&p.to_le_bytes());
        }
        Checkpoint {
            format: FORMAT.to_string(),
            version: VERSION,
            architecture: net.architecture().clone(),
            widths: net.architecture().widths(),
            seed,
            epoch,
            n_params: net.params().len(),
            params: STANDARD.encode(bytes),
        }
    }

    pub fn to_net(&self) -> Result<ScoreNet> {
        if self.format != FORMAT {
            return Err(Error::Checkpoint(format!("unknown format `{}`", self.format)));
        }
        if self.version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", self.version)));
        }
        if self.widths != self.architecture.widths() {
            return Err(Error::Checkpoint("widths disagree with architecture".into()));
        }
        let bytes = STANDARD
            .decode(&self.params)
            .map_err(|e| Error::Checkpoint(format!("bad payload: {e}")))?;
        if bytes.len() != self.n_params * 8 || self.n_params != self.architecture.n_params() {
            return Err(Error::Checkpoint(format!(
                "payload holds {} bytes, architecture needs {} parameters",
                bytes.len(),
                self.architecture.n_params()
            )));
        }
        let params = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        ScoreNet::from_params(self.architecture.clone(), params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Loads a checkpoint and checks it against an expected architecture.
pub fn load_matching(path: &Path, expected: &Architecture) -> Result<ScoreNet> {
    let ck = Checkpoint::load(path)?;
    if &ck.architecture != expected {
        return Err(Error::Checkpoint(format!(
            "architecture mismatch: checkpoint has {:?}, config declares {:?}",
            ck.architecture, expected
        )));
    }
    ck.to_net()
}
