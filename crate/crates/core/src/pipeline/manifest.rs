use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::write_atomic;
use crate::error::{Error, Result};

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Record of one completed stage run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_hash: String,
    pub config: BTreeMap<String, String>,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

fn hash_all(paths: &[PathBuf]) -> Result<BTreeMap<String, String>> {
    paths
        .iter()
        .map(|p| Ok((p.display().to_string(), sha256_file(p)?)))
        .collect()
}

impl Manifest {
    pub fn path(work_dir: &Path, stage: &str) -> PathBuf {
        work_dir.join("manifests").join(format!("{stage}.json"))
    }

    pub fn build(
        stage: &str,
        config_hash: String,
        config: BTreeMap<String, String>,
        seed: u64,
        inputs: &[PathBuf],
        outputs: &[PathBuf],
    ) -> Result<Self> {
        Ok(Manifest {
            stage: stage.to_string(),
            config_hash,
            config,
            seed,
            inputs: hash_all(inputs)?,
            outputs: hash_all(outputs)?,
        })
    }

    pub fn load(path: &Path) -> Option<Self> {
        let bytes = std::fs::read(path).ok()?;
        serde_json::from_slice(&bytes).ok()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        write_atomic(path, &bytes)
    }

    /// True when the recorded run used the same config and inputs and every
    /// recorded output is still on disk unchanged.
    pub fn is_current(&self, config_hash: &str, inputs: &[PathBuf]) -> bool {
        if self.config_hash != config_hash {
            return false;
        }
        match hash_all(inputs) {
            Ok(h) if h == self.inputs => {}
            _ => return false,
        }
        self.outputs
            .iter()
            .all(|(p, h)| sha256_file(Path::new(p)).is_ok_and(|cur| &cur == h))
    }
}
