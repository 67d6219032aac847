use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    align_relevance, serialize_column_parts, serialize_row_parts, SerializedSeq, AlignmentHeadParams, Axis, ExpandedCells,
    LossBreakdown, PairClassifier,
};
use crate::dataset::{CellCoord, Table};
use crate::encoder::{BpeTokenizer, Checkpoint, TinyBackbone, TinyConfig, TinyEncoder};
use crate::error::{Error, Result};
use crate::nn::{sigmoid_scalar, Grads, ParamId, ParamStore, Tape, Var};

pub const SELECTOR_FORMAT: &str = "tabqa-selector";

/// Shared tiny encoder with separate row, column and alignment heads.
#[derive(Debug, Clone)]
pub struct SelectorModel {
    pub backbone: TinyBackbone,
    pub store: ParamStore,
    row_w: ParamId,
    row_b: ParamId,
    col_w: ParamId,
    col_b: ParamId,
    align_w: ParamId,
    align_b: ParamId,
}

/// Tape handles from one question's forward pass.
pub(crate) struct QuestionGraph {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

impl SelectorModel {
    pub fn new(config: TinyConfig, tokenizer: BpeTokenizer, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = TinyBackbone::new(config, tokenizer, &mut store, &mut rng);
        let d = backbone.dim();
        let row_w = store.normal("sel.row_w", d, 1, 0.02, &mut rng);
        let row_b = store.zeros("sel.row_b", 1, 1);
        let col_w = store.normal("sel.col_w", d, 1, 0.02, &mut rng);
        let col_b = store.zeros("sel.col_b", 1, 1);
        let align_w = store.normal("sel.align_w", d, 1, 0.02, &mut rng);
        let align_b = store.zeros("sel.align_b", 1, 1);
        SelectorModel {
            backbone,
            store,
            row_w,
            row_b,
            col_w,
            col_b,
            align_w,
            align_b,
        }
    }

    pub fn encoder(&self) -> TinyEncoder<'_> {
        TinyEncoder::new(&self.backbone, &self.store)
    }

    pub fn alignment_params(&self) -> AlignmentHeadParams {
        AlignmentHeadParams {
            w: self.store.get(self.align_w).column(0).to_owned(),
            b: self.store.get(self.align_b)[[0, 0]],
        }
    }

    /// Handles of the alignment head weight and bias.
    pub fn alignment_param_ids(&self) -> (ParamId, ParamId) {
        (self.align_w, self.align_b)
    }

    pub fn align_relevance(&self, question: &str, headers: &[String]) -> Vec<f64> {
        align_relevance(question, headers, &self.alignment_params(), &self.encoder())
    }

    fn head(&self, axis: Axis) -> (ParamId, ParamId) {
        match axis {
            Axis::Row => (self.row_w, self.row_b),
            Axis::Column => (self.col_w, self.col_b),
        }
    }

    fn pair_logit(&self, tape: &mut Tape, axis: Axis, question: &str, sequence: &SerializedSeq) -> Var {
        let enc = self.backbone.pair_input_parts(question, &sequence.borrowed());
        let h = self.backbone.forward(tape, &enc.input);
        let cls = tape.row(h, 0);
        let (w, b) = self.head(axis);
        let (w, b) = (tape.param(w), tape.param(b));
        let z = tape.matmul(cls, w);
        tape.add(z, b)
    }

    fn align_logits(&self, tape: &mut Tape, question: &str, headers: &[String]) -> Var {
        let hq_states = self.backbone.forward(tape, &self.backbone.single_input(question));
        let hq = tape.mean_rows(hq_states);
        let joined = headers.join(" ");
        let input = self.backbone.single_input(&joined);
        let t = input.len();
        let hs = self.backbone.forward(tape, &input);
        let mut reps = Vec::with_capacity(headers.len());
        let mut start = 0;
        for h in headers {
            let n = self.backbone.tokenizer.tokenize(h).len();
            let end = (start + n).min(t);
            let rep = if end > start {
                let span = tape.rows(hs, start, end);
                tape.mean_rows(span)
            } else {
                tape.constant(Array2::zeros((1, self.backbone.dim())))
            };
            reps.push(rep);
            start = end;
        }
        let hc = tape.concat_rows(&reps);
        let prod = tape.mul_row(hc, hq);
        let (w, b) = (tape.param(self.align_w), tape.param(self.align_b));
        let z = tape.matmul(prod, w);
        tape.add_row(z, b)
    }

    /// Joint loss of one question on a fresh tape.
    pub(crate) fn question_graph(
        &self,
        tape: &mut Tape,
        question: &str,
        table: &Table,
        expanded: Option<&ExpandedCells>,
        gold: CellCoord,
        align_labels: &[f64],
        sigma: f64,
    ) -> QuestionGraph {
        let (n, m) = (table.n_rows(), table.n_cols());
        let rows: Vec<Var> = (0..n)
            .map(|i| self.pair_logit(tape, Axis::Row, question, &serialize_row_parts(table, i, expanded)))
            .collect();
        let cols: Vec<Var> = (0..m)
            .map(|j| {
                self.pair_logit(tape, Axis::Column, question, &serialize_column_parts(table, j, expanded))
            })
            .collect();
        let row_logits = tape.concat_rows(&rows);
        let col_logits = tape.concat_rows(&cols);
        let onehot = |len: usize, idx: usize| {
            Array2::from_shape_fn((len, 1), |(i, _)| f64::from(u8::from(i == idx)))
        };
        let l_row = tape.bce_with_logits(row_logits, onehot(n, gold.0));
        let l_col = tape.bce_with_logits(col_logits, onehot(m, gold.1));
        let align = self.align_logits(tape, question, &table.headers);
        let labels = Array2::from_shape_vec((m, 1), align_labels.to_vec()).expect("one label per column");
        let l_align = tape.bce_with_logits(align, labels);
        let weighted = tape.scale(l_align, sigma);
        let total = tape.sum(&[l_row, l_col, weighted]);
        let breakdown = LossBreakdown::new(
            tape.scalar(l_row),
            tape.scalar(l_col),
            tape.scalar(l_align),
            sigma,
        );
        QuestionGraph { total, breakdown }
    }

    /// Loss breakdown and parameter gradients for one question.
    pub fn loss_and_grads(
        &self,
        question: &str,
        table: &Table,
        expanded: Option<&ExpandedCells>,
        gold: CellCoord,
        align_labels: &[f64],
        sigma: f64,
    ) -> Result<(LossBreakdown, Grads)> {
        super::check_sigma(sigma)?;
        if align_labels.len() != table.n_cols() {
            return Err(Error::InvalidArgument(format!(
                "{} alignment labels for {} columns",
                align_labels.len(),
                table.n_cols()
            )));
        }
        if gold.0 >= table.n_rows() || gold.1 >= table.n_cols() {
            return Err(Error::InvalidArgument(format!("gold cell {gold:?} outside table")));
        }
        let mut tape = Tape::new(&self.store);
        let g = self.question_graph(&mut tape, question, table, expanded, gold, align_labels, sigma);
        Ok((g.breakdown, tape.backward(g.total)))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(SELECTOR_FORMAT, &self.backbone, &self.store)
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let ckpt = ckpt.verify(SELECTOR_FORMAT)?;
        let mut model = SelectorModel::new(ckpt.config, ckpt.tokenizer, 0);
        model.store.load_snapshot(&ckpt.params)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path, SELECTOR_FORMAT)?)
    }
}

impl PairClassifier for SelectorModel {
    fn classify(&self, axis: Axis, question: &str, sequence: &SerializedSeq) -> f64 {
        let mut tape = Tape::new(&self.store);
        let z = self.pair_logit(&mut tape, axis, question, sequence);
        sigmoid_scalar(tape.scalar(z))
    }
}
