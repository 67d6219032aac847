//! Span extraction over a candidate cell's linearized row plus its
//! filtered passage text, and the final answer combination with the cell
//! selection score.

mod model;

use serde::{Deserialize, Serialize};

use crate::dataset::{occurrences, CellCoord, PredictionRecord, Table};
use crate::error::{Error, Result};
use crate::selector::{topk_cells, CellScoreSheet, ExpandedCells, RankedCell};
use crate::text::{is_article, normalize_answer, normalized_tokens, pre_tokenize, Word};

pub use model::{
    train_reader, ReaderEpoch, ReaderTrainConfig, SpanReader, READER_FORMAT, SPAN_HIDDEN,
};

pub const MAX_SPAN_WORDS: usize = 30;
pub const DEFAULT_MU: f64 = 1.0;

/// `"The {header} is {cell} ."` for every column, in order.
pub fn linearize_row(table: &Table, i: usize) -> String {
    table
        .headers
        .iter()
        .zip(&table.rows[i])
        .map(|(h, c)| {
            if c.text.is_empty() {
                format!("The {h} is .")
            } else {
                format!("The {h} is {} .", c.text)
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Linearized row of the candidate followed by its appended passage text.
pub fn candidate_context(table: &Table, cell: CellCoord, expanded: Option<&ExpandedCells>) -> String {
    let mut ctx = linearize_row(table, cell.0);
    if let Some(e) = expanded.and_then(|e| e.get(&cell)) {
        let p = e.passage_text();
        if !p.is_empty() {
            ctx.push(' ');
            ctx.push_str(&p);
        }
    }
    ctx
}

/// Word-index spans `(start, end)` of `context` whose normalized form equals
/// the normalized answer, in order of occurrence.
pub fn answer_spans(context: &str, answer: &str) -> Vec<(usize, usize)> {
    let target = normalized_tokens(answer);
    if target.is_empty() {
        return Vec::new();
    }
    let words = pre_tokenize(context);
    let kept: Vec<(usize, &str)> = words
        .iter()
        .enumerate()
        .filter(|(_, w)| !w.is_punct() && !is_article(&w.text))
        .map(|(i, w)| (i, w.text.as_str()))
        .collect();
    let toks: Vec<&str> = kept.iter().map(|(_, t)| *t).collect();
    let target: Vec<&str> = target.iter().map(String::as_str).collect();
    crate::text::find_subsequence(&toks, &target)
        .into_iter()
        .map(|p| (kept[p].0, kept[p + target.len() - 1].0))
        .collect()
}

/// Original text covered by words `start..=end`.
pub fn span_text(context: &str, words: &[Word], start: usize, end: usize) -> String {
    context[words[start].start..words[end].end].to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReaderInstance {
    pub question_id: String,
    pub question: String,
    pub context: String,
    /// Inclusive context word indices; absent on negatives.
    pub answer_span: Option<(usize, usize)>,
    pub is_positive: bool,
    pub cell: CellCoord,
    pub cell_score: f64,
}

impl ReaderInstance {
    /// A positive's span text must normalize to the answer.
    pub fn check(&self, answer: &str) -> bool {
        match (self.is_positive, self.answer_span) {
            (true, Some((s, e))) => {
                let words = pre_tokenize(&self.context);
                s <= e
                    && e < words.len()
                    && normalize_answer(&span_text(&self.context, &words, s, e)) == normalize_answer(answer)
            }
            (false, None) => true,
            _ => false,
        }
    }
}

/// One instance per candidate. Only the highest-ranked candidate whose
/// context contains the answer is positive.
pub fn build_reader_instances(
    question_id: &str,
    question: &str,
    answer: &str,
    topk: &[RankedCell],
    table: &Table,
    expanded: Option<&ExpandedCells>,
) -> Result<Vec<ReaderInstance>> {
    if topk.is_empty() {
        return Err(Error::InvalidArgument("no candidate cells".into()));
    }
    let mut have_positive = false;
    Ok(topk
        .iter()
        .map(|c| {
            let cell = (c.row, c.col);
            let context = candidate_context(table, cell, expanded);
            let span = if have_positive {
                None
            } else {
                answer_spans(&context, answer).first().copied()
            };
            have_positive |= span.is_some();
            ReaderInstance {
                question_id: question_id.to_string(),
                question: question.to_string(),
                context,
                answer_span: span,
                is_positive: span.is_some(),
                cell,
                cell_score: c.score,
            }
        })
        .collect())
}

/// Drops positives whose context holds the answer more than once.
pub fn clean_instance_filter(instances: Vec<ReaderInstance>, answer_of: impl Fn(&str) -> String) -> Vec<ReaderInstance> {
    instances
        .into_iter()
        .filter(|i| !i.is_positive || occurrences(&i.context, &answer_of(&i.question_id)) == 1)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanPrediction {
    /// Inclusive context word indices; `(0, 0)` for the no-answer prediction.
    pub start: usize,
    pub end: usize,
    pub text: String,
    /// Log-probability of the span among all candidate spans of the context
    /// (no-answer included).
    pub span_score: f64,
    pub combined_score: f64,
    pub no_answer: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnswerConfig {
    pub k: usize,
    pub mu: f64,
    /// Answer with the cell text when the winning candidate abstains.
    pub cell_fallback: bool,
}

impl Default for AnswerConfig {
    fn default() -> Self {
        AnswerConfig {
            k: crate::selector::DEFAULT_TOP_K,
            mu: DEFAULT_MU,
            cell_fallback: true,
        }
    }
}

/// `span_score + mu * cell_score`.
pub fn combine(span_score: f64, cell_score: f64, mu: f64) -> f64 {
    span_score + mu * cell_score
}

/// Final answer for one question. Without a reader the top-ranked cell's
/// text is the answer.
pub fn answer_question(
    question_id: &str,
    question: &str,
    sheet: &CellScoreSheet,
    table: &Table,
    expanded: Option<&ExpandedCells>,
    reader: Option<&SpanReader>,
    config: &AnswerConfig,
) -> Result<PredictionRecord> {
    if config.mu < 0.0 {
        return Err(Error::InvalidArgument(format!("mu = {} must be non-negative", config.mu)));
    }
    let k = config.k.min(sheet.ranking.len());
    let topk = topk_cells(sheet, k)?;
    let record = |cell: &RankedCell, answer: String, span_score: f64| PredictionRecord {
        qid: question_id.to_string(),
        answer,
        cell: (cell.row, cell.col),
        row_prob: sheet.row_probs[cell.row],
        col_prob: sheet.col_probs[cell.col],
        span_score,
    };
    let Some(reader) = reader else {
        let top = &topk[0];
        return Ok(record(top, table.rows[top.row][top.col].text.clone(), 0.0));
    };
    let mut best: Option<(f64, usize, SpanPrediction)> = None;
    for (idx, cand) in topk.iter().enumerate() {
        let ctx = candidate_context(table, (cand.row, cand.col), expanded);
        let preds = reader.extract_span(question, &ctx, 1);
        let mut p = preds.into_iter().next().expect("at least the no-answer prediction");
        p.combined_score = combine(p.span_score, cand.score, config.mu);
        if best.as_ref().is_none_or(|(s, _, _)| p.combined_score > *s) {
            best = Some((p.combined_score, idx, p));
        }
    }
    let (_, idx, pred) = best.expect("k >= 1");
    let cand = &topk[idx];
    let answer = if pred.no_answer {
        if config.cell_fallback {
            table.rows[cand.row][cand.col].text.clone()
        } else {
            String::new()
        }
    } else {
        pred.text
    };
    Ok(record(cand, answer, pred.span_score))
}
