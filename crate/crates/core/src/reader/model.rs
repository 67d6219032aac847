use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{span_text, ReaderInstance, SpanPrediction, MAX_SPAN_WORDS};
use crate::encoder::{BpeTokenizer, Checkpoint, PairEncoding, TinyBackbone, TinyConfig};
use crate::error::{Error, Result};
use crate::nn::{AdamW, Grads, ParamId, ParamStore, Tape, Var};
use crate::text::Word;

pub const READER_FORMAT: &str = "tabqa-reader";
pub const SPAN_HIDDEN: usize = 32;

/// Tiny encoder with start/end heads and a feed-forward span scorer over
/// `[h_start, h_end]`. The no-answer option lives at the `[CLS]` position.
#[derive(Debug, Clone)]
pub struct SpanReader {
    pub backbone: TinyBackbone,
    pub store: ParamStore,
    start_w: ParamId,
    end_w: ParamId,
    span_ws: ParamId,
    span_we: ParamId,
    span_b: ParamId,
    span_out: ParamId,
}

/// Candidate positions of one question/context pair.
struct Layout {
    enc: PairEncoding,
    words: Vec<Word>,
    /// Sequence position of each candidate start word; index 0 is `[CLS]`.
    start_pos: Vec<usize>,
    start_word: Vec<usize>,
    end_pos: Vec<usize>,
    end_word: Vec<usize>,
    /// `(start slot, end slot)` into the lists above; slot 0 is no-answer.
    spans: Vec<(usize, usize)>,
}

impl Layout {
    fn new(backbone: &TinyBackbone, question: &str, context: &str) -> Layout {
        let enc = backbone.pair_input(question, context);
        let mut start_pos = vec![0];
        let mut start_word = vec![0];
        let mut end_pos = vec![0];
        let mut end_word = vec![0];
        let mut end_slot: HashMap<usize, usize> = HashMap::new();
        for (i, p) in enc.second_pieces.iter().enumerate() {
            let pos = enc.second_offset + i;
            if p.word_start {
                start_pos.push(pos);
                start_word.push(p.word);
            }
            if p.word_end {
                end_slot.insert(p.word, end_pos.len());
                end_pos.push(pos);
                end_word.push(p.word);
            }
        }
        let mut spans = vec![(0, 0)];
        for (s, &ws) in start_word.iter().enumerate().skip(1) {
            for we in ws..ws + MAX_SPAN_WORDS {
                if let Some(&e) = end_slot.get(&we) {
                    spans.push((s, e));
                }
            }
        }
        let words = enc.second_words.clone();
        Layout {
            enc,
            words,
            start_pos,
            start_word,
            end_pos,
            end_word,
            spans,
        }
    }

    fn slot_of(&self, span: (usize, usize)) -> Option<(usize, usize, usize)> {
        let s = self.start_word.iter().skip(1).position(|&w| w == span.0)? + 1;
        let e = self.end_word.iter().skip(1).position(|&w| w == span.1)? + 1;
        let k = self.spans.iter().position(|&p| p == (s, e))?;
        Some((s, e, k))
    }
}

struct Logits {
    start: Var,
    end: Var,
    spans: Var,
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

impl SpanReader {
    pub fn new(config: TinyConfig, tokenizer: BpeTokenizer, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = TinyBackbone::new(config, tokenizer, &mut store, &mut rng);
        let d = backbone.dim();
        let std = (1.0 / d as f64).sqrt();
        SpanReader {
            start_w: store.normal("rd.start_w", d, 1, 0.02, &mut rng),
            end_w: store.normal("rd.end_w", d, 1, 0.02, &mut rng),
            span_ws: store.normal("rd.span_ws", d, SPAN_HIDDEN, std, &mut rng),
            span_we: store.normal("rd.span_we", d, SPAN_HIDDEN, std, &mut rng),
            span_b: store.zeros("rd.span_b", 1, SPAN_HIDDEN),
            span_out: store.normal("rd.span_out", SPAN_HIDDEN, 1, (1.0 / SPAN_HIDDEN as f64).sqrt(), &mut rng),
            backbone,
            store,
        }
    }

    fn logits(&self, tape: &mut Tape, layout: &Layout) -> Logits {
        let h = self.backbone.forward(tape, &layout.enc.input);
        let (sw, ew) = (tape.param(self.start_w), tape.param(self.end_w));
        let hs = tape.select_rows(h, &layout.start_pos);
        let he = tape.select_rows(h, &layout.end_pos);
        let start_col = tape.matmul(hs, sw);
        let end_col = tape.matmul(he, ew);
        let start = tape.transpose(start_col);
        let end = tape.transpose(end_col);
        let (ws, we) = (tape.param(self.span_ws), tape.param(self.span_we));
        let sp = tape.matmul(hs, ws);
        let ep = tape.matmul(he, we);
        let (b, o) = (tape.param(self.span_b), tape.param(self.span_out));
        let spans = tape.span_scores(sp, ep, b, o, layout.spans.clone());
        Logits { start, end, spans }
    }

    /// Start and end distributions: no-answer first, then one entry per
    /// context word.
    pub fn start_end_distributions(&self, question: &str, context: &str) -> (Vec<f64>, Vec<f64>) {
        let layout = Layout::new(&self.backbone, question, context);
        let mut tape = Tape::new(&self.store);
        let l = self.logits(&mut tape, &layout);
        let soft = |v: Var, tape: &Tape| {
            log_softmax(tape.value(v).as_slice().expect("contiguous"))
                .into_iter()
                .map(f64::exp)
                .collect()
        };
        (soft(l.start, &tape), soft(l.end, &tape))
    }

    /// Best `top_n` predictions, no-answer included, by span score.
    pub fn extract_span(&self, question: &str, context: &str, top_n: usize) -> Vec<SpanPrediction> {
        let layout = Layout::new(&self.backbone, question, context);
        let null = |score: f64| SpanPrediction {
            start: 0,
            end: 0,
            text: String::new(),
            span_score: score,
            combined_score: score,
            no_answer: true,
        };
        if layout.spans.len() == 1 {
            return vec![null(0.0)];
        }
        let mut tape = Tape::new(&self.store);
        let l = self.logits(&mut tape, &layout);
        let scores = log_softmax(tape.value(l.spans).as_slice().expect("contiguous"));
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        order
            .into_iter()
            .take(top_n.max(1))
            .map(|k| {
                if k == 0 {
                    return null(scores[0]);
                }
                let (s, e) = layout.spans[k];
                let (ws, we) = (layout.start_word[s], layout.end_word[e]);
                SpanPrediction {
                    start: ws,
                    end: we,
                    text: span_text(context, &layout.words, ws, we),
                    span_score: scores[k],
                    combined_score: scores[k],
                    no_answer: false,
                }
            })
            .collect()
    }

    /// Cross-entropy over start, end and span choices. `None` when a
    /// positive's span is not representable (cut by truncation or too long).
    pub fn loss_and_grads(&self, inst: &ReaderInstance) -> Option<(f64, Grads)> {
        let layout = Layout::new(&self.backbone, &inst.question, &inst.context);
        let (s, e, k) = match inst.answer_span {
            Some(span) => layout.slot_of(span)?,
            None => (0, 0, 0),
        };
        let mut tape = Tape::new(&self.store);
        let l = self.logits(&mut tape, &layout);
        let ls = tape.cross_entropy(l.start, s);
        let le = tape.cross_entropy(l.end, e);
        let lk = tape.cross_entropy(l.spans, k);
        let total = tape.sum(&[ls, le, lk]);
        Some((tape.scalar(total), tape.backward(total)))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(READER_FORMAT, &self.backbone, &self.store)
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let ckpt = ckpt.verify(READER_FORMAT)?;
        let mut model = SpanReader::new(ckpt.config, ckpt.tokenizer, 0);
        model.store.load_snapshot(&ckpt.params)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path, READER_FORMAT)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReaderTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ReaderTrainConfig {
    fn default() -> Self {
        ReaderTrainConfig {
            epochs: 4,
            lr: 5e-5,
            batch_size: 32,
            seed: 13,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReaderEpoch {
    pub epoch: usize,
    pub mean_loss: f64,
    pub skipped: usize,
}

pub fn train_reader(
    model: &mut SpanReader,
    instances: &[ReaderInstance],
    config: &ReaderTrainConfig,
) -> Result<Vec<ReaderEpoch>> {
    if instances.is_empty() {
        return Err(Error::InvalidArgument("no reader training instances".into()));
    }
    if config.epochs == 0 || config.batch_size == 0 {
        return Err(Error::InvalidArgument("epochs and batch size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = AdamW::new(&model.store, config.lr);
    let mut order: Vec<usize> = (0..instances.len()).collect();
    let mut log = Vec::new();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut seen, mut skipped) = (0.0, 0usize, 0usize);
        for batch in order.chunks(config.batch_size) {
            let results: Vec<Option<(f64, Grads)>> = batch
                .par_iter()
                .map(|&i| model.loss_and_grads(&instances[i]))
                .collect();
            let mut total = Grads::zeros_like(&model.store);
            let mut n = 0usize;
            for r in &results {
                match r {
                    Some((l, g)) => {
                        total.accumulate(g);
                        sum += l;
                        n += 1;
                    }
                    None => skipped += 1,
                }
            }
            if n == 0 {
                continue;
            }
            seen += n;
            total.scale(1.0 / n as f64);
            opt.step(&mut model.store, &total);
        }
        if !model.store.all_finite() {
            return Err(Error::Contract(format!("non-finite reader parameters after epoch {epoch}")));
        }
        let mean_loss = sum / seen.max(1) as f64;
        log::info!("reader epoch {epoch}: loss {mean_loss:.4} ({skipped} unrepresentable)");
        log.push(ReaderEpoch {
            epoch,
            mean_loss,
            skipped,
        });
    }
    Ok(log)
}
