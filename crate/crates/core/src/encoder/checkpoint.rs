use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BpeTokenizer, TinyBackbone, TinyConfig};
use crate::dataset::write_atomic;
use crate::error::{Error, Result};
use crate::nn::{ParamSnapshot, ParamStore};

pub const CHECKPOINT_VERSION: u32 = 1;

/// JSON parameter dump of a tiny-encoder model with its shape and vocabulary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: TinyConfig,
    pub tokenizer: BpeTokenizer,
    pub params: ParamSnapshot,
}

impl Checkpoint {
    pub fn capture(format: &str, backbone: &TinyBackbone, store: &ParamStore) -> Self {
        Checkpoint {
            format: format.into(),
            version: CHECKPOINT_VERSION,
            config: backbone.config.clone(),
            tokenizer: backbone.tokenizer.clone(),
            params: store.to_snapshot(),
        }
    }

    /// Checks the format tag and restores tokenizer lookups.
    pub fn verify(mut self, format: &str) -> Result<Self> {
        if self.format != format || self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "expected {format} v{CHECKPOINT_VERSION}, found {} v{}",
                self.format, self.version
            )));
        }
        self.tokenizer.rebuild_index();
        Ok(self)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &serde_json::to_vec(self)?)
    }

    pub fn load(path: &Path, format: &str) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        ckpt.verify(format)
    }
}
