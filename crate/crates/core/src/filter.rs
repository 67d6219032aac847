//! Passage filtering: rank linked-passage sentences against the question
//! and append the best ones to their cell under a token budget.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::{Cell, CellCoord, Passage, Table};
use crate::encoder::{cosine, TextEncoder};
use crate::error::{Error, Result};

pub const DEFAULT_FILTER_K: usize = 12;
pub const DEFAULT_TOKEN_BUDGET: usize = 460;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    #[default]
    Cosine,
    Dot,
}

impl Similarity {
    pub fn score(&self, a: &ndarray::Array1<f64>, b: &ndarray::Array1<f64>) -> f64 {
        match self {
            Similarity::Cosine => cosine(a, b),
            Similarity::Dot => a.dot(b),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub k: usize,
    pub token_budget: usize,
    pub similarity: Similarity,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            k: DEFAULT_FILTER_K,
            token_budget: DEFAULT_TOKEN_BUDGET,
            similarity: Similarity::Cosine,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppendedSentence {
    pub passage_id: String,
    pub sentence_index: usize,
    pub similarity: f64,
    pub sentence: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpandedCell {
    pub cell: CellCoord,
    pub base_text: String,
    pub appended_sentences: Vec<AppendedSentence>,
    pub token_count: usize,
}

impl ExpandedCell {
    pub fn unexpanded(cell: &Cell, encoder: &dyn TextEncoder) -> Self {
        ExpandedCell {
            cell: (cell.row, cell.col),
            base_text: cell.text.clone(),
            appended_sentences: Vec::new(),
            token_count: encoder.token_count(&cell.text),
        }
    }

    /// Cell text followed by the appended sentences.
    pub fn text(&self) -> String {
        let mut out = self.base_text.clone();
        for s in &self.appended_sentences {
            out.push(' ');
            out.push_str(&s.sentence);
        }
        out
    }

    /// Only the appended passage text.
    pub fn passage_text(&self) -> String {
        self.appended_sentences
            .iter()
            .map(|s| s.sentence.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Top `min(k, n)` sentences by similarity to the question, ties to the
/// lower index.
pub fn rank_sentences(
    question: &str,
    sentences: &[String],
    k: usize,
    encoder: &dyn TextEncoder,
    similarity: Similarity,
) -> Result<Vec<(usize, f64)>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if sentences.is_empty() {
        return Ok(Vec::new());
    }
    let q = encoder.encode(question).pooled;
    let mut scored: Vec<(usize, f64)> = sentences
        .iter()
        .enumerate()
        .map(|(i, s)| (i, similarity.score(&q, &encoder.encode(s).pooled)))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored)
}

pub fn expand_cell(
    cell: &Cell,
    passages: &BTreeMap<String, Passage>,
    question: &str,
    config: &FilterConfig,
    encoder: &dyn TextEncoder,
) -> Result<ExpandedCell> {
    let mut out = ExpandedCell::unexpanded(cell, encoder);
    if out.token_count >= config.token_budget {
        return Err(Error::InvalidArgument(format!(
            "cell ({},{}) already has {} tokens, budget is {}",
            cell.row, cell.col, out.token_count, config.token_budget
        )));
    }
    let mut pool: Vec<(&str, usize, &String)> = Vec::new();
    for pid in &cell.passage_ids {
        if let Some(p) = passages.get(pid) {
            for (i, s) in p.sentences.iter().enumerate() {
                pool.push((pid.as_str(), i, s));
            }
        }
    }
    if pool.is_empty() {
        return Ok(out);
    }
    let texts: Vec<String> = pool.iter().map(|(_, _, s)| (*s).clone()).collect();
    for (idx, sim) in rank_sentences(question, &texts, config.k, encoder, config.similarity)? {
        let n = encoder.token_count(&texts[idx]);
        if out.token_count + n > config.token_budget {
            continue;
        }
        out.token_count += n;
        let (pid, si, s) = pool[idx];
        out.appended_sentences.push(AppendedSentence {
            passage_id: pid.to_string(),
            sentence_index: si,
            similarity: sim,
            sentence: s.clone(),
        });
    }
    Ok(out)
}

/// Expanded form for every linked cell of the table.
pub fn expand_table(
    table: &Table,
    passages: &BTreeMap<String, Passage>,
    question: &str,
    config: &FilterConfig,
    encoder: &dyn TextEncoder,
) -> Result<BTreeMap<CellCoord, ExpandedCell>> {
    table
        .cells()
        .filter(|c| !c.passage_ids.is_empty())
        .map(|c| Ok(((c.row, c.col), expand_cell(c, passages, question, config, encoder)?)))
        .collect()
}
