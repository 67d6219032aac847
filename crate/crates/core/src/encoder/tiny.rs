use std::collections::HashSet;

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::bpe::{BpeTokenizer, CLS, SEP};
use super::{truncate_pair, EncodedText, TextEncoder, DEFAULT_MAX_LEN};
use crate::nn::{ParamId, ParamStore, Tape, Var};
use crate::text::{is_stopword, pre_tokenize, Word};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TinyConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub vocab_size: usize,
}

impl Default for TinyConfig {
    fn default() -> Self {
        TinyConfig {
            dim: 64,
            layers: 2,
            heads: 4,
            ffn_dim: 128,
            max_len: DEFAULT_MAX_LEN,
            vocab_size: 8000,
        }
    }
}

/// Structural role of a text fragment inside a serialized table sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TokenRole {
    Text = 0,
    Header = 1,
    Cell = 2,
}

const N_ROLES: usize = 3;

/// Token ids plus segment, role and word-overlap flags, one entry per position.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderInput {
    pub ids: Vec<usize>,
    pub segments: Vec<usize>,
    pub roles: Vec<usize>,
    /// 1 where the position's word also occurs in the other segment.
    pub overlaps: Vec<usize>,
}

impl EncoderInput {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Where a sequence piece came from in the second segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PieceSpan {
    pub word: usize,
    pub word_start: bool,
    pub word_end: bool,
}

#[derive(Debug, Clone)]
pub struct PairEncoding {
    pub input: EncoderInput,
    /// Sequence position of the first second-segment piece.
    pub second_offset: usize,
    pub second_pieces: Vec<PieceSpan>,
    pub second_words: Vec<Word>,
}

#[derive(Debug, Clone)]
struct LayerParams {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Parameter handles of a pre-norm transformer encoder.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    tok: ParamId,
    pos: ParamId,
    seg: ParamId,
    role: ParamId,
    overlap: ParamId,
    layers: Vec<LayerParams>,
    lnf_g: ParamId,
    lnf_b: ParamId,
}

impl EncoderParams {
    pub fn register<R: Rng>(store: &mut ParamStore, cfg: &TinyConfig, vocab: usize, rng: &mut R) -> Self {
        let d = cfg.dim;
        let emb_std = 0.1;
        let proj_std = (1.0 / d as f64).sqrt();
        let tok = store.normal("enc.tok", vocab, d, emb_std, rng);
        let pos = store.normal("enc.pos", cfg.max_len, d, emb_std, rng);
        let seg = store.normal("enc.seg", 2, d, emb_std, rng);
        let role = store.normal("enc.role", N_ROLES, d, emb_std, rng);
        let overlap = store.normal("enc.overlap", 2, d, emb_std, rng);
        let layers = (0..cfg.layers)
            .map(|l| {
                let n = |s: &str| format!("enc.l{l}.{s}");
                LayerParams {
                    ln1_g: store.ones(n("ln1_g"), 1, d),
                    ln1_b: store.zeros(n("ln1_b"), 1, d),
                    wq: store.normal(n("wq"), d, d, proj_std, rng),
                    wk: store.normal(n("wk"), d, d, proj_std, rng),
                    wv: store.normal(n("wv"), d, d, proj_std, rng),
                    wo: store.normal(n("wo"), d, d, proj_std / (2.0 * cfg.layers as f64).sqrt(), rng),
                    ln2_g: store.ones(n("ln2_g"), 1, d),
                    ln2_b: store.zeros(n("ln2_b"), 1, d),
                    w1: store.normal(n("w1"), d, cfg.ffn_dim, proj_std, rng),
                    b1: store.zeros(n("b1"), 1, cfg.ffn_dim),
                    w2: store.normal(
                        n("w2"),
                        cfg.ffn_dim,
                        d,
                        (1.0 / cfg.ffn_dim as f64).sqrt() / (2.0 * cfg.layers as f64).sqrt(),
                        rng,
                    ),
                    b2: store.zeros(n("b2"), 1, d),
                }
            })
            .collect();
        EncoderParams {
            tok,
            pos,
            seg,
            role,
            overlap,
            layers,
            lnf_g: store.ones("enc.lnf_g", 1, d),
            lnf_b: store.zeros("enc.lnf_b", 1, d),
        }
    }

    /// Final hidden states, one row per input position.
    pub fn forward(&self, tape: &mut Tape, cfg: &TinyConfig, input: &EncoderInput) -> Var {
        let t = input.len();
        let positions: Vec<usize> = (0..t).collect();
        let tok = tape.gather(self.tok, &input.ids);
        let pos = tape.gather(self.pos, &positions);
        let seg = tape.gather(self.seg, &input.segments);
        let role = tape.gather(self.role, &input.roles);
        let ovl = tape.gather(self.overlap, &input.overlaps);
        let mut x = tape.sum(&[tok, pos, seg, role, ovl]);
        let dh = cfg.dim / cfg.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        for lp in &self.layers {
            let (g, b) = (tape.param(lp.ln1_g), tape.param(lp.ln1_b));
            let h = tape.layer_norm(x, g, b);
            let (wq, wk, wv) = (tape.param(lp.wq), tape.param(lp.wk), tape.param(lp.wv));
            let q = tape.matmul(h, wq);
            let k = tape.matmul(h, wk);
            let v = tape.matmul(h, wv);
            let mut heads = Vec::with_capacity(cfg.heads);
            for head in 0..cfg.heads {
                let (lo, hi) = (head * dh, (head + 1) * dh);
                let qh = tape.slice_cols(q, lo, hi);
                let kh = tape.slice_cols(k, lo, hi);
                let vh = tape.slice_cols(v, lo, hi);
                let scores = tape.matmul_bt(qh, kh);
                let scores = tape.scale(scores, scale);
                let attn = tape.softmax_rows(scores);
                heads.push(tape.matmul(attn, vh));
            }
            let joined = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads) };
            let wo = tape.param(lp.wo);
            let attn_out = tape.matmul(joined, wo);
            x = tape.add(x, attn_out);
            let (g2, b2n) = (tape.param(lp.ln2_g), tape.param(lp.ln2_b));
            let h2 = tape.layer_norm(x, g2, b2n);
            let (w1, b1) = (tape.param(lp.w1), tape.param(lp.b1));
            let f = tape.matmul(h2, w1);
            let f = tape.add_row(f, b1);
            let f = tape.relu(f);
            let (w2, b2) = (tape.param(lp.w2), tape.param(lp.b2));
            let f = tape.matmul(f, w2);
            let f = tape.add_row(f, b2);
            x = tape.add(x, f);
        }
        let (g, b) = (tape.param(self.lnf_g), tape.param(self.lnf_b));
        tape.layer_norm(x, g, b)
    }
}

fn overlap_keys(words: &[Word]) -> HashSet<&str> {
    words
        .iter()
        .filter(|w| !w.is_punct() && !is_stopword(&w.text))
        .map(|w| w.text.as_str())
        .collect()
}

/// Tokenizer, shape and parameter handles of one tiny encoder. Parameter
/// values live in a separate [`ParamStore`] so heads can share it.
#[derive(Debug, Clone)]
pub struct TinyBackbone {
    pub config: TinyConfig,
    pub tokenizer: BpeTokenizer,
    pub params: EncoderParams,
}

impl TinyBackbone {
    pub fn new<R: Rng>(config: TinyConfig, tokenizer: BpeTokenizer, store: &mut ParamStore, rng: &mut R) -> Self {
        assert!(config.dim % config.heads == 0, "dim must divide into heads");
        let params = EncoderParams::register(store, &config, tokenizer.vocab_size(), rng);
        TinyBackbone {
            config,
            tokenizer,
            params,
        }
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    /// Single sequence without sentinels; empty text becomes one `[CLS]`.
    pub fn single_input(&self, text: &str) -> EncoderInput {
        let words = pre_tokenize(text);
        let mut ids: Vec<usize> = self
            .tokenizer
            .encode_words(&words)
            .into_iter()
            .map(|(id, _)| id)
            .collect();
        if ids.is_empty() {
            ids.push(CLS);
        }
        ids.truncate(self.config.max_len);
        let n = ids.len();
        EncoderInput {
            ids,
            segments: vec![0; n],
            roles: vec![0; n],
            overlaps: vec![0; n],
        }
    }

    pub fn pair_input(&self, a: &str, b: &str) -> PairEncoding {
        self.pair_input_parts(a, &[(b, TokenRole::Text)])
    }

    /// Like [`pair_input`](Self::pair_input) with the second sequence given
    /// as the concatenation of role-tagged fragments.
    pub fn pair_input_parts(&self, a: &str, parts: &[(&str, TokenRole)]) -> PairEncoding {
        let wa = pre_tokenize(a);
        let mut wb = Vec::new();
        let mut word_roles = Vec::new();
        for (text, role) in parts {
            for w in pre_tokenize(text) {
                wb.push(w);
                word_roles.push(*role as usize);
            }
        }
        let ka = overlap_keys(&wa);
        let kb = overlap_keys(&wb);
        let mut pa = self.tokenizer.encode_words(&wa);
        let mut pb = self.tokenizer.encode_words(&wb);
        let (na, nb) = truncate_pair(pa.len(), pb.len(), self.config.max_len);
        pa.truncate(na);
        pb.truncate(nb);

        let mut ids = vec![CLS];
        let mut segments = vec![0];
        let mut overlaps = vec![0];
        for &(id, w) in &pa {
            ids.push(id);
            segments.push(0);
            overlaps.push(usize::from(kb.contains(wa[w].text.as_str())));
        }
        ids.push(SEP);
        segments.push(0);
        overlaps.push(0);
        let mut roles = vec![0; ids.len()];
        let second_offset = ids.len();
        let mut second_pieces = Vec::with_capacity(pb.len());
        for (i, &(id, w)) in pb.iter().enumerate() {
            ids.push(id);
            segments.push(1);
            roles.push(word_roles[w]);
            overlaps.push(usize::from(ka.contains(wb[w].text.as_str())));
            let word_start = i == 0 || pb[i - 1].1 != w;
            // a word cut by truncation has no end inside the sequence
            let word_end = pb.get(i + 1).map_or(
                self.tokenizer.encode_word(&wb[w].text).len() == pb.iter().filter(|p| p.1 == w).count(),
                |next| next.1 != w,
            );
            second_pieces.push(PieceSpan {
                word: w,
                word_start,
                word_end,
            });
        }
        ids.push(SEP);
        segments.push(1);
        roles.push(0);
        overlaps.push(0);
        PairEncoding {
            input: EncoderInput {
                ids,
                segments,
                roles,
                overlaps,
            },
            second_offset,
            second_pieces,
            second_words: wb,
        }
    }

    pub fn forward(&self, tape: &mut Tape, input: &EncoderInput) -> Var {
        self.params.forward(tape, &self.config, input)
    }
}

/// Read-only [`TextEncoder`] view over a backbone and its parameters.
#[derive(Clone, Copy)]
pub struct TinyEncoder<'a> {
    pub backbone: &'a TinyBackbone,
    pub store: &'a ParamStore,
}

impl<'a> TinyEncoder<'a> {
    pub fn new(backbone: &'a TinyBackbone, store: &'a ParamStore) -> Self {
        TinyEncoder { backbone, store }
    }

    fn run(&self, input: &EncoderInput) -> Array2<f64> {
        let mut tape = Tape::new(self.store);
        let out = self.backbone.forward(&mut tape, input);
        tape.value(out).clone()
    }
}

impl TextEncoder for TinyEncoder<'_> {
    fn dim(&self) -> usize {
        self.backbone.config.dim
    }

    fn max_len(&self) -> usize {
        self.backbone.config.max_len
    }

    fn tokenize(&self, text: &str) -> Vec<String> {
        self.backbone.tokenizer.tokenize(text)
    }

    fn encode(&self, text: &str) -> EncodedText {
        let states = self.run(&self.backbone.single_input(text));
        let pooled: Array1<f64> = states.mean_axis(ndarray::Axis(0)).expect("non-empty");
        EncodedText {
            pooled,
            token_states: states,
        }
    }

    fn encode_pair(&self, a: &str, b: &str) -> EncodedText {
        let enc = self.backbone.pair_input(a, b);
        let states = self.run(&enc.input);
        EncodedText {
            pooled: states.row(0).to_owned(),
            token_states: states,
        }
    }
}
