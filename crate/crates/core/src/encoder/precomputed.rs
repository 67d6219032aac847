use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::Deserialize;

use super::{EncodedText, TextEncoder, DEFAULT_MAX_LEN};
use crate::error::{Error, Result};
use crate::text;

/// Adapter for an external sentence encoder: pooled vectors computed
/// offline and looked up by exact text. Unknown texts map to the zero
/// vector.
#[derive(Debug, Clone)]
pub struct PrecomputedEncoder {
    dim: usize,
    vectors: HashMap<String, Array1<f64>>,
}

#[derive(Deserialize)]
struct EmbeddingFile {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl PrecomputedEncoder {
    /// Reads `{"dim": d, "vectors": {"text": [..d floats..], ...}}`.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let file: EmbeddingFile = serde_json::from_slice(&bytes).map_err(|e| Error::Parse {
            file: path.display().to_string(),
            record: "embeddings".into(),
            message: e.to_string(),
        })?;
        Self::from_vectors(file.dim, file.vectors)
    }

    pub fn from_vectors(dim: usize, vectors: HashMap<String, Vec<f64>>) -> Result<Self> {
        let mut out = HashMap::with_capacity(vectors.len());
        for (text, v) in vectors {
            if v.len() != dim {
                return Err(Error::Validation(format!(
                    "embedding for {text:?} has {} values, expected {dim}",
                    v.len()
                )));
            }
            out.insert(text, Array1::from(v));
        }
        Ok(PrecomputedEncoder { dim, vectors: out })
    }

    fn lookup(&self, text: &str) -> Array1<f64> {
        self.vectors.get(text).cloned().unwrap_or_else(|| {
            log::debug!("no precomputed embedding for {text:?}");
            Array1::zeros(self.dim)
        })
    }
}

impl TextEncoder for PrecomputedEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn max_len(&self) -> usize {
        DEFAULT_MAX_LEN
    }

    fn tokenize(&self, text: &str) -> Vec<String> {
        text::tokenize(text)
    }

    fn encode(&self, text: &str) -> EncodedText {
        let pooled = self.lookup(text);
        let rows = self.tokenize(text).len().max(1);
        let states = Array2::from_shape_fn((rows, self.dim), |(_, c)| pooled[c]);
        EncodedText {
            pooled,
            token_states: states,
        }
    }

    fn encode_pair(&self, a: &str, b: &str) -> EncodedText {
        self.encode(&format!("{a} {b}"))
    }
}
