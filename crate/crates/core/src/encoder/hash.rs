use ndarray::{Array1, Array2};

use super::{truncate_pair, EncodedText, TextEncoder, DEFAULT_MAX_LEN};
use crate::text;

/// Bag of hashed character trigrams plus a whole-word feature, signed and
/// L2-normalized per token. Pooled vector is the mean token state.
#[derive(Debug, Clone)]
pub struct HashEncoder {
    dim: usize,
    seed: u64,
    max_len: usize,
}

impl Default for HashEncoder {
    fn default() -> Self {
        HashEncoder::new(256, 13)
    }
}

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    // final avalanche so low bits depend on every byte
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    h
}

impl HashEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim >= 2, "hash encoder needs at least two dimensions");
        HashEncoder {
            dim,
            seed,
            max_len: DEFAULT_MAX_LEN,
        }
    }

    pub fn with_max_len(mut self, max_len: usize) -> Self {
        self.max_len = max_len;
        self
    }

    fn bump(&self, v: &mut Array1<f64>, feature: &[u8]) {
        let h = fnv1a(self.seed, feature);
        let idx = (h % self.dim as u64) as usize;
        v[idx] += if h >> 63 == 1 { -1.0 } else { 1.0 };
    }

    pub fn token_vector(&self, token: &str) -> Array1<f64> {
        let mut v = Array1::zeros(self.dim);
        let mut word = b"w:".to_vec();
        word.extend_from_slice(token.as_bytes());
        self.bump(&mut v, &word);
        let padded: Vec<char> = std::iter::once('<')
            .chain(token.chars())
            .chain(std::iter::once('>'))
            .collect();
        for gram in padded.windows(3) {
            let s: String = gram.iter().collect();
            self.bump(&mut v, s.as_bytes());
        }
        let norm = v.dot(&v).sqrt();
        if norm > 0.0 {
            v /= norm;
        }
        v
    }

    fn sentinel(&self, which: usize) -> Array1<f64> {
        let mut v = Array1::zeros(self.dim);
        v[which % self.dim] = 1.0;
        v
    }

    fn states(&self, tokens: &[String]) -> Array2<f64> {
        let mut m = Array2::zeros((tokens.len(), self.dim));
        for (i, t) in tokens.iter().enumerate() {
            m.row_mut(i).assign(&self.token_vector(t));
        }
        m
    }
}

impl TextEncoder for HashEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn max_len(&self) -> usize {
        self.max_len
    }

    fn tokenize(&self, text: &str) -> Vec<String> {
        text::tokenize(text)
    }

    fn encode(&self, text: &str) -> EncodedText {
        let tokens = self.tokenize(text);
        if tokens.is_empty() {
            let s = self.sentinel(0);
            return EncodedText {
                pooled: s.clone(),
                token_states: s.insert_axis(ndarray::Axis(0)),
            };
        }
        let states = self.states(&tokens);
        let pooled = states.mean_axis(ndarray::Axis(0)).expect("non-empty");
        EncodedText {
            pooled,
            token_states: states,
        }
    }

    fn encode_pair(&self, a: &str, b: &str) -> EncodedText {
        let mut ta = self.tokenize(a);
        let mut tb = self.tokenize(b);
        let (ka, kb) = truncate_pair(ta.len(), tb.len(), self.max_len);
        ta.truncate(ka);
        tb.truncate(kb);
        let content: Vec<String> = ta.iter().chain(tb.iter()).cloned().collect();
        let cls = if content.is_empty() {
            self.sentinel(0)
        } else {
            self.states(&content).mean_axis(ndarray::Axis(0)).expect("non-empty")
        };
        let sep = self.sentinel(1);
        let total = content.len() + 3;
        let mut states = Array2::zeros((total, self.dim));
        states.row_mut(0).assign(&cls);
        let mut r = 1;
        for t in &ta {
            states.row_mut(r).assign(&self.token_vector(t));
            r += 1;
        }
        states.row_mut(r).assign(&sep);
        r += 1;
        for t in &tb {
            states.row_mut(r).assign(&self.token_vector(t));
            r += 1;
        }
        states.row_mut(r).assign(&sep);
        EncodedText {
            pooled: cls,
            token_states: states,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::cosine;

    #[test]
    fn deterministic_and_shaped() {
        let enc = HashEncoder::default();
        let a = enc.encode("Walter Payton played for Chicago .");
        let b = enc.encode("Walter Payton played for Chicago .");
        assert_eq!(a, b);
        assert_eq!(a.token_states.nrows(), 6);
        assert_eq!(a.pooled.len(), 256);
        let seven = enc.encode("one two three four five six seven");
        assert_eq!(seven.token_states.nrows(), 7);
    }

    #[test]
    fn identical_text_has_unit_cosine() {
        let enc = HashEncoder::default();
        let q = enc.encode("Who is the athlete ?").pooled;
        let s = enc.encode("Who is the athlete ?").pooled;
        assert!((cosine(&q, &s) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_inputs_yield_sentinels() {
        let enc = HashEncoder::default();
        let e = enc.encode("");
        assert_eq!(e.token_states.nrows(), 1);
        assert!(e.is_finite());
        let p = enc.encode_pair("", "");
        assert_eq!(p.token_states.nrows(), 3);
        assert!(p.is_finite());
    }

    #[test]
    fn pair_pooled_is_classifier_state() {
        let enc = HashEncoder::default();
        let p = enc.encode_pair("who ranks second", "Rank : 2 | Player : Walter Payton");
        assert_eq!(p.pooled, p.token_states.row(0).to_owned());
        let mean = p.token_states.mean_axis(ndarray::Axis(0)).unwrap();
        assert!(p.pooled.iter().zip(mean.iter()).any(|(a, b)| (a - b).abs() > 1e-9));
    }

    #[test]
    fn long_pair_truncates_second_sequence() {
        let enc = HashEncoder::default();
        let q = "what is the rank of walter payton";
        let row: String = (0..593).map(|i| format!("w{i} ")).collect();
        let p = enc.encode_pair(q, &row);
        assert_eq!(p.token_states.nrows(), 512);
        // question tokens intact right after the classifier state
        let qt = enc.tokenize(q);
        for (i, t) in qt.iter().enumerate() {
            assert_eq!(p.token_states.row(i + 1).to_owned(), enc.token_vector(t));
        }
    }
}
