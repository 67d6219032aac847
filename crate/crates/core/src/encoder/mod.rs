//! Text encoders: the shared [`TextEncoder`] interface, a deterministic
//! hashed character n-gram encoder, and the trainable tiny transformer.

mod bpe;
mod checkpoint;
mod hash;
mod precomputed;
mod tiny;

use ndarray::{Array1, Array2};

pub use bpe::BpeTokenizer;
pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use hash::HashEncoder;
pub use precomputed::PrecomputedEncoder;
pub use tiny::{
    EncoderInput, EncoderParams, PairEncoding, PieceSpan, TinyBackbone, TinyConfig, TinyEncoder, TokenRole,
};

/// Default sequence limit, counting sentinels.
pub const DEFAULT_MAX_LEN: usize = 512;

/// Sentinel count in a `[CLS] a [SEP] b [SEP]` pair.
pub const PAIR_SENTINELS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedText {
    pub pooled: Array1<f64>,
    /// One row per token.
    pub token_states: Array2<f64>,
}

impl EncodedText {
    pub fn is_finite(&self) -> bool {
        self.pooled.iter().chain(self.token_states.iter()).all(|v| v.is_finite())
    }
}

/// Inference-time text encoding. Implementations must be safe to call
/// concurrently from several threads.
pub trait TextEncoder: Send + Sync {
    fn dim(&self) -> usize;

    fn max_len(&self) -> usize;

    fn tokenize(&self, text: &str) -> Vec<String>;

    fn encode(&self, text: &str) -> EncodedText;

    /// Encodes `[CLS] a [SEP] b [SEP]`; `pooled` is the `[CLS]` state.
    fn encode_pair(&self, a: &str, b: &str) -> EncodedText;

    fn token_count(&self, text: &str) -> usize {
        self.tokenize(text).len()
    }
}

/// How many tokens of each side survive a pair limit: the second sequence
/// is cut from the right first; the first only when it alone overflows.
pub fn truncate_pair(a_len: usize, b_len: usize, limit: usize) -> (usize, usize) {
    let room = limit.saturating_sub(PAIR_SENTINELS);
    if a_len + b_len <= room {
        return (a_len, b_len);
    }
    if a_len >= room {
        log::warn!("first sequence of {a_len} tokens exceeds the {limit}-token limit; truncating it");
        return (room, 0);
    }
    (a_len, room - a_len)
}

pub fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.dot(b) / (na * nb)
}
