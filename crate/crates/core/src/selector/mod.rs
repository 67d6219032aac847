//! Row/column cell selection with a table-question alignment objective.
//!
//! Rows and columns are scored independently as binary sequence-pair
//! classifications (question first, serialized row or column second), so a
//! table costs `N + M` classifier calls. Cell scores are the sum of the row
//! and column probabilities.

mod heatmap;
mod model;
mod train;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::dataset::{CellCoord, Table};
use crate::encoder::{TextEncoder, TokenRole};
use crate::error::{Error, Result};
use crate::filter::ExpandedCell;

pub use heatmap::{relevance_heatmap, Heatmap};
pub use model::{SelectorModel, SELECTOR_FORMAT};
pub use train::{
    gold_ranks, hits_at_1, train_selector, EpochRecord, SelectorExample, SelectorTrainConfig,
    TrainingLog,
};

pub const DEFAULT_TOP_K: usize = 5;
pub const DEFAULT_SIGMA: f64 = 0.5;

pub type ExpandedCells = BTreeMap<CellCoord, ExpandedCell>;

fn cell_text(table: &Table, i: usize, j: usize, expanded: Option<&ExpandedCells>) -> String {
    expanded
        .and_then(|e| e.get(&(i, j)))
        .map(|e| e.text())
        .unwrap_or_else(|| table.rows[i][j].text.clone())
}

/// A serialized row or column as role-tagged fragments; concatenating the
/// fragments gives the plain-text form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SerializedSeq {
    pub parts: Vec<(String, TokenRole)>,
}

impl SerializedSeq {
    pub fn text(&self) -> String {
        self.parts.iter().map(|(t, _)| t.as_str()).collect()
    }

    pub fn borrowed(&self) -> Vec<(&str, TokenRole)> {
        self.parts.iter().map(|(t, r)| (t.as_str(), *r)).collect()
    }
}

fn sep(s: &str) -> (String, TokenRole) {
    (s.to_string(), TokenRole::Text)
}

pub fn serialize_row_parts(table: &Table, i: usize, expanded: Option<&ExpandedCells>) -> SerializedSeq {
    let mut parts = Vec::new();
    for (j, h) in table.headers.iter().enumerate() {
        if j > 0 {
            parts.push(sep(" | "));
        }
        parts.push((h.clone(), TokenRole::Header));
        parts.push(sep(" : "));
        parts.push((cell_text(table, i, j, expanded), TokenRole::Cell));
    }
    SerializedSeq { parts }
}

pub fn serialize_column_parts(table: &Table, j: usize, expanded: Option<&ExpandedCells>) -> SerializedSeq {
    let mut parts = vec![(table.headers[j].clone(), TokenRole::Header), sep(" : ")];
    for i in 0..table.n_rows() {
        if i > 0 {
            parts.push(sep(" | "));
        }
        parts.push((cell_text(table, i, j, expanded), TokenRole::Cell));
    }
    SerializedSeq { parts }
}

/// `"header_1 : cell_1 | header_2 : cell_2 | ..."`.
pub fn serialize_row(table: &Table, i: usize, expanded: Option<&ExpandedCells>) -> String {
    serialize_row_parts(table, i, expanded).text()
}

/// `"header : cell_1 | cell_2 | ..."`.
pub fn serialize_column(table: &Table, j: usize, expanded: Option<&ExpandedCells>) -> String {
    serialize_column_parts(table, j, expanded).text()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Axis {
    Row,
    Column,
}

/// Probability that a serialized row/column contains the answer.
pub trait PairClassifier: Sync {
    fn classify(&self, axis: Axis, question: &str, sequence: &SerializedSeq) -> f64;
}

/// Wraps a classifier and counts invocations.
pub struct CountingClassifier<'a, C: PairClassifier + ?Sized> {
    inner: &'a C,
    calls: AtomicUsize,
}

impl<'a, C: PairClassifier + ?Sized> CountingClassifier<'a, C> {
    pub fn new(inner: &'a C) -> Self {
        CountingClassifier {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::SeqCst);
    }
}

impl<C: PairClassifier + ?Sized> PairClassifier for CountingClassifier<'_, C> {
    fn classify(&self, axis: Axis, question: &str, sequence: &SerializedSeq) -> f64 {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.classify(axis, question, sequence)
    }
}

pub fn score_rows<C: PairClassifier + ?Sized>(
    question: &str,
    table: &Table,
    expanded: Option<&ExpandedCells>,
    classifier: &C,
) -> Vec<f64> {
    (0..table.n_rows())
        .map(|i| classifier.classify(Axis::Row, question, &serialize_row_parts(table, i, expanded)))
        .collect()
}

pub fn score_columns<C: PairClassifier + ?Sized>(
    question: &str,
    table: &Table,
    expanded: Option<&ExpandedCells>,
    classifier: &C,
) -> Vec<f64> {
    (0..table.n_cols())
        .map(|j| classifier.classify(Axis::Column, question, &serialize_column_parts(table, j, expanded)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCell {
    pub row: usize,
    pub col: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellScoreSheet {
    pub row_probs: Vec<f64>,
    pub col_probs: Vec<f64>,
    /// `cell_scores[i][j] = row_probs[i] + col_probs[j]`.
    pub cell_scores: Vec<Vec<f64>>,
    /// All `N·M` cells, best first, ties broken row-major.
    pub ranking: Vec<RankedCell>,
}

impl CellScoreSheet {
    /// 1-based rank of `cell` in the ranking.
    pub fn rank_of(&self, cell: CellCoord) -> Option<usize> {
        self.ranking
            .iter()
            .position(|c| (c.row, c.col) == cell)
            .map(|p| p + 1)
    }
}

pub fn combine_scores(row_probs: &[f64], col_probs: &[f64]) -> Result<CellScoreSheet> {
    if row_probs.is_empty() || col_probs.is_empty() {
        return Err(Error::InvalidArgument("row and column probabilities must be non-empty".into()));
    }
    if let Some(bad) = row_probs.iter().chain(col_probs).find(|p| !p.is_finite()) {
        return Err(Error::Contract(format!("non-finite probability {bad}")));
    }
    let cell_scores: Vec<Vec<f64>> = row_probs
        .iter()
        .map(|r| col_probs.iter().map(|c| r + c).collect())
        .collect();
    let mut ranking: Vec<RankedCell> = cell_scores
        .iter()
        .enumerate()
        .flat_map(|(i, row)| {
            row.iter().enumerate().map(move |(j, &score)| RankedCell {
                row: i,
                col: j,
                score,
            })
        })
        .collect();
    // stable sort keeps row-major order among equal scores
    ranking.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(CellScoreSheet {
        row_probs: row_probs.to_vec(),
        col_probs: col_probs.to_vec(),
        cell_scores,
        ranking,
    })
}

pub fn topk_cells(sheet: &CellScoreSheet, k: usize) -> Result<Vec<RankedCell>> {
    if k == 0 || k > sheet.ranking.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} outside 1..={}",
            sheet.ranking.len()
        )));
    }
    Ok(sheet.ranking[..k].to_vec())
}

/// Scores a whole table: `N + M` classifier calls, then [`combine_scores`].
pub fn score_table<C: PairClassifier + ?Sized>(
    question: &str,
    table: &Table,
    expanded: Option<&ExpandedCells>,
    classifier: &C,
) -> Result<CellScoreSheet> {
    let rows = score_rows(question, table, expanded, classifier);
    let cols = score_columns(question, table, expanded, classifier);
    combine_scores(&rows, &cols)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub k: usize,
    pub sigma: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            k: DEFAULT_TOP_K,
            sigma: DEFAULT_SIGMA,
        }
    }
}

/// Affine map from `h_q ⊙ h_c` to one relevance logit per column.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentHeadParams {
    pub w: Array1<f64>,
    pub b: f64,
}

impl AlignmentHeadParams {
    pub fn zeros(dim: usize) -> Self {
        AlignmentHeadParams {
            w: Array1::zeros(dim),
            b: 0.0,
        }
    }

    pub fn logits(&self, question: &Array1<f64>, headers: &[Array1<f64>]) -> Vec<f64> {
        headers
            .iter()
            .map(|h| self.w.dot(&(question * h)) + self.b)
            .collect()
    }
}

/// Per-header representations: the headers are encoded once as a single
/// pseudo-sentence and each header is the mean of its token states.
pub fn header_representations(headers: &[String], encoder: &dyn TextEncoder) -> Vec<Array1<f64>> {
    let joined = headers.join(" ");
    let states = encoder.encode(&joined).token_states;
    let mut start = 0;
    let mut out = Vec::with_capacity(headers.len());
    for h in headers {
        let n = encoder.token_count(h);
        let end = (start + n).min(states.nrows());
        let rep = if end > start {
            states
                .slice(ndarray::s![start..end, ..])
                .mean_axis(ndarray::Axis(0))
                .expect("non-empty span")
        } else {
            Array1::zeros(encoder.dim())
        };
        out.push(rep);
        start = end;
    }
    out
}

/// Column relevance in `[0, 1]` via an independent sigmoid per column.
pub fn align_relevance(
    question: &str,
    headers: &[String],
    params: &AlignmentHeadParams,
    encoder: &dyn TextEncoder,
) -> Vec<f64> {
    let hq = encoder.encode(question).pooled;
    let hc = header_representations(headers, encoder);
    params
        .logits(&hq, &hc)
        .into_iter()
        .map(crate::nn::sigmoid_scalar)
        .collect()
}

/// Mean BCE of the alignment head and its gradient w.r.t. `(w, b)`.
pub fn alignment_loss_and_grad(
    question: &Array1<f64>,
    headers: &[Array1<f64>],
    labels: &[f64],
    params: &AlignmentHeadParams,
) -> (f64, Array1<f64>, f64) {
    let m = headers.len() as f64;
    let mut loss = 0.0;
    let mut gw = Array1::zeros(params.w.len());
    let mut gb = 0.0;
    for (h, &l) in headers.iter().zip(labels) {
        let feat = question * h;
        let z = params.w.dot(&feat) + params.b;
        let p = crate::nn::sigmoid_scalar(z);
        loss += bce(p, l);
        let dz = (p - l) / m;
        gw.scaled_add(dz, &feat);
        gb += dz;
    }
    (loss / m, gw, gb)
}

fn bce(p: f64, label: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    -(label * p.ln() + (1.0 - label) * (1.0 - p).ln())
}

fn bce_logit(z: f64, label: f64) -> f64 {
    // softplus(z) - label * z
    let sp = if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    };
    sp - label * z
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_row: f64,
    pub l_col: f64,
    pub l_align: f64,
    pub sigma: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(l_row: f64, l_col: f64, l_align: f64, sigma: f64) -> Self {
        LossBreakdown {
            l_row,
            l_col,
            l_align,
            sigma,
            total: l_row + l_col + sigma * l_align,
        }
    }
}

pub fn check_sigma(sigma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&sigma) {
        return Err(Error::InvalidArgument(format!("sigma = {sigma} outside [0, 1]")));
    }
    Ok(())
}

/// Row/column BCE over logits against one-hot gold indices, plus
/// `sigma` times the mean alignment BCE over column probabilities.
pub fn joint_loss(
    row_logits: &[f64],
    col_logits: &[f64],
    align_scores: &[f64],
    row_label: usize,
    col_label: usize,
    align_labels: &[f64],
    sigma: f64,
) -> Result<LossBreakdown> {
    check_sigma(sigma)?;
    if row_label >= row_logits.len() || col_label >= col_logits.len() {
        return Err(Error::InvalidArgument("label index out of range".into()));
    }
    if align_scores.len() != align_labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} alignment scores vs {} labels",
            align_scores.len(),
            align_labels.len()
        )));
    }
    let mean_bce = |logits: &[f64], gold: usize| {
        logits
            .iter()
            .enumerate()
            .map(|(i, &z)| bce_logit(z, f64::from(u8::from(i == gold))))
            .sum::<f64>()
            / logits.len() as f64
    };
    let l_align = if align_scores.is_empty() {
        0.0
    } else {
        align_scores
            .iter()
            .zip(align_labels)
            .map(|(&p, &l)| bce(p, l))
            .sum::<f64>()
            / align_scores.len() as f64
    };
    Ok(LossBreakdown::new(
        mean_bce(row_logits, row_label),
        mean_bce(col_logits, col_label),
        l_align,
        sigma,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> Table {
        Table::from_texts(
            "t",
            vec!["Rank".into(), "Player".into()],
            vec![
                vec!["1".into(), "Emmitt Smith".into()],
                vec!["2".into(), "Walter Payton".into()],
                vec!["3".into(), "".into()],
            ],
            None,
        )
        .unwrap()
    }

    #[test]
    fn row_and_column_formats() {
        let t = fixture();
        assert_eq!(serialize_row(&t, 1, None), "Rank : 2 | Player : Walter Payton");
        assert_eq!(serialize_row(&t, 2, None), "Rank : 3 | Player : ");
        assert_eq!(serialize_column(&t, 0, None), "Rank : 1 | 2 | 3");
        assert_eq!(serialize_column(&t, 1, None), "Player : Emmitt Smith | Walter Payton | ");
    }

    #[test]
    fn serialization_is_injective_on_fixture() {
        let t = fixture();
        let rows: Vec<String> = (0..3).map(|i| serialize_row(&t, i, None)).collect();
        let cols: Vec<String> = (0..2).map(|j| serialize_column(&t, j, None)).collect();
        for set in [rows, cols] {
            for a in 0..set.len() {
                for b in a + 1..set.len() {
                    assert_ne!(set[a], set[b]);
                }
            }
        }
    }

    #[test]
    fn combine_matches_hand_enumeration() {
        let sheet = combine_scores(&[0.7, 0.2, 0.1], &[0.6, 0.4]).unwrap();
        let top = topk_cells(&sheet, 3).unwrap();
        let cells: Vec<_> = top.iter().map(|c| (c.row, c.col)).collect();
        assert_eq!(cells, vec![(0, 0), (0, 1), (1, 0)]);
        assert!((top[0].score - 1.3).abs() < 1e-12);
        assert!((top[1].score - 1.1).abs() < 1e-12);
        assert!((top[2].score - 0.8).abs() < 1e-12);
        assert_eq!(topk_cells(&sheet, 6).unwrap(), sheet.ranking);
        assert!(topk_cells(&sheet, 0).is_err());
        assert!(topk_cells(&sheet, 7).is_err());
    }

    #[test]
    fn single_cell_and_ties() {
        let one = combine_scores(&[0.25], &[0.5]).unwrap();
        assert_eq!(one.ranking.len(), 1);
        assert_eq!(one.ranking[0].score, 0.75);
        let tie = combine_scores(&[0.5, 0.5], &[0.5]).unwrap();
        assert_eq!((tie.ranking[0].row, tie.ranking[0].col), (0, 0));
    }

    #[test]
    fn non_finite_is_a_contract_violation() {
        assert!(matches!(
            combine_scores(&[f64::NAN], &[0.1]),
            Err(Error::Contract(_))
        ));
        assert!(combine_scores(&[], &[0.1]).is_err());
    }

    #[test]
    fn joint_loss_hand_values() {
        // alignment term: -(ln 0.9 + ln 0.9) / 2
        let expected_align = -(0.9f64.ln() + 0.9f64.ln()) / 2.0;
        let lb = joint_loss(&[0.0, 0.0], &[0.0], &[0.9, 0.1], 0, 0, &[1.0, 0.0], 0.5).unwrap();
        assert!((lb.l_align - expected_align).abs() < 1e-12);
        assert!((lb.l_align - 0.10536).abs() < 1e-5);
        let manual = LossBreakdown::new(0.3, 0.2, lb.l_align, 0.5);
        assert!((manual.total - 0.55268).abs() < 1e-5);
        let zero = joint_loss(&[1.0, -1.0], &[0.5, 0.2], &[0.9, 0.1], 0, 1, &[1.0, 0.0], 0.0).unwrap();
        assert_eq!(zero.total, zero.l_row + zero.l_col);
        assert!(joint_loss(&[0.0], &[0.0], &[], 0, 0, &[], 1.5).is_err());
        assert!(joint_loss(&[0.0], &[0.0], &[0.2], 0, 0, &[], 0.5).is_err());
    }

    #[test]
    fn analytic_alignment_gradient_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let d = 8;
        let mut rand_vec = |n: usize| Array1::from_shape_fn(n, |_| rng.random_range(-1.0..1.0));
        let q = rand_vec(d);
        let hs: Vec<Array1<f64>> = (0..3).map(|_| rand_vec(d)).collect();
        let params = AlignmentHeadParams { w: rand_vec(d), b: 0.3 };
        let labels = [1.0, 0.0, 1.0];
        let (_, gw, gb) = alignment_loss_and_grad(&q, &hs, &labels, &params);
        let loss = |p: &AlignmentHeadParams| alignment_loss_and_grad(&q, &hs, &labels, p).0;
        let eps = 1e-6;
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-8);
        for k in 0..d {
            let (mut hi, mut lo) = (params.clone(), params.clone());
            hi.w[k] += eps;
            lo.w[k] -= eps;
            let fd = (loss(&hi) - loss(&lo)) / (2.0 * eps);
            assert!(rel(fd, gw[k]) < 1e-4, "w[{k}]: {fd} vs {}", gw[k]);
        }
        let (mut hi, mut lo) = (params.clone(), params.clone());
        hi.b += eps;
        lo.b -= eps;
        assert!(rel((loss(&hi) - loss(&lo)) / (2.0 * eps), gb) < 1e-4);
    }

    #[test]
    fn one_step_toward_positive_label_raises_relevance() {
        let enc = crate::encoder::HashEncoder::default();
        let headers = vec!["Athlete".to_string()];
        let mut params = AlignmentHeadParams::zeros(enc.dim());
        let before = align_relevance("Athlete", &headers, &params, &enc);
        assert_eq!(before, vec![0.5]);
        let hq = enc.encode("Athlete").pooled;
        let hc = header_representations(&headers, &enc);
        let (_, gw, gb) = alignment_loss_and_grad(&hq, &hc, &[1.0], &params);
        params.w.scaled_add(-1.0, &gw);
        params.b -= gb;
        let after = align_relevance("Athlete", &headers, &params, &enc)[0];
        assert!(after > 0.5 && after <= 1.0, "{after}");
        let four: Vec<String> = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
        let r = align_relevance("q", &four, &params, &enc);
        assert_eq!(r.len(), 4);
        assert!(r.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn perfect_alignment_has_vanishing_loss() {
        let lb = joint_loss(&[3.0], &[2.0], &[1.0 - 1e-12, 1e-12], 0, 0, &[1.0, 0.0], 1.0).unwrap();
        assert!(lb.l_align < 1e-9);
        assert!((lb.total - (lb.l_row + lb.l_col)).abs() < 1e-9);
    }
}
