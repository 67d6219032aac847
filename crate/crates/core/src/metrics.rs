//! Answer and selection metrics, error buckets and ablation deltas.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dataset::{AnswerSource, CellCoord, QaExample};
use crate::text::normalized_tokens;

pub const HITS_KS: [usize; 3] = [1, 3, 5];

pub fn exact_match(pred: &str, gold: &str) -> f64 {
    f64::from(u8::from(normalized_tokens(pred) == normalized_tokens(gold)))
}

/// Harmonic mean of token precision and recall over normalized multisets.
pub fn token_f1(pred: &str, gold: &str) -> f64 {
    let p = normalized_tokens(pred);
    let g = normalized_tokens(gold);
    if p.is_empty() || g.is_empty() {
        return f64::from(u8::from(p.is_empty() && g.is_empty()));
    }
    let mut counts: BTreeMap<&str, i64> = BTreeMap::new();
    for t in &g {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0;
    for t in &p {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / p.len() as f64;
    let recall = common as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// `rank` is 1-based.
pub fn hits_at_k(rank: Option<usize>, k: usize) -> f64 {
    f64::from(u8::from(rank.is_some_and(|r| r <= k)))
}

pub fn mrr(rank: Option<usize>) -> f64 {
    rank.map_or(0.0, |r| 1.0 / r as f64)
}

/// Fraction of questions whose gold row (column) appears among the rows
/// (columns) of their first `k` predicted cells.
pub fn row_col_accuracy(predictions: &[Vec<CellCoord>], golds: &[CellCoord], k: usize) -> (f64, f64) {
    if golds.is_empty() {
        return (0.0, 0.0);
    }
    let (mut rows, mut cols) = (0usize, 0usize);
    for (pred, gold) in predictions.iter().zip(golds) {
        let top = &pred[..k.min(pred.len())];
        rows += usize::from(top.iter().any(|c| c.0 == gold.0));
        cols += usize::from(top.iter().any(|c| c.1 == gold.1));
    }
    let n = golds.len() as f64;
    (rows as f64 / n, cols as f64 / n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCategory {
    Correct,
    SameColWrongRow,
    SameRowWrongCol,
    BothWrong,
    NumericRequired,
}

impl ErrorCategory {
    pub fn as_str(&self) -> &'static str {
        match self {
            ErrorCategory::Correct => "correct",
            ErrorCategory::SameColWrongRow => "same_col_wrong_row",
            ErrorCategory::SameRowWrongCol => "same_row_wrong_col",
            ErrorCategory::BothWrong => "both_wrong",
            ErrorCategory::NumericRequired => "numeric_required",
        }
    }
}

pub fn classify_error(pred: CellCoord, gold: CellCoord) -> ErrorCategory {
    match (pred.0 == gold.0, pred.1 == gold.1) {
        (true, true) => ErrorCategory::Correct,
        (false, true) => ErrorCategory::SameColWrongRow,
        (true, false) => ErrorCategory::SameRowWrongCol,
        (false, false) => ErrorCategory::BothWrong,
    }
}

/// Like [`classify_error`], but questions needing arithmetic across cells
/// get their own bucket.
pub fn classify_error_for(pred: CellCoord, gold: CellCoord, source: AnswerSource) -> ErrorCategory {
    if source == AnswerSource::Compute {
        ErrorCategory::NumericRequired
    } else {
        classify_error(pred, gold)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SourceScores {
    pub n: usize,
    pub em: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub em: f64,
    pub f1: f64,
    pub by_source: BTreeMap<String, SourceScores>,
    pub hits: BTreeMap<usize, f64>,
    pub mrr: f64,
    pub row_acc: f64,
    pub col_acc: f64,
    /// Counted over questions with a gold and a predicted cell.
    pub errors: BTreeMap<String, usize>,
}

/// Everything known about one question at evaluation time.
#[derive(Debug, Clone)]
pub struct EvalItem<'a> {
    pub example: &'a QaExample,
    pub answer: Option<&'a str>,
    pub predicted_cell: Option<CellCoord>,
    /// Full cell ranking, best first.
    pub ranking: Option<&'a [CellCoord]>,
}

/// Aggregates per-question metrics. `k` is the top-k used for row/column
/// accuracy.
pub fn evaluate(items: &[EvalItem<'_>], k: usize) -> EvalReport {
    let mut report = EvalReport {
        n: items.len(),
        ..EvalReport::default()
    };
    if items.is_empty() {
        return report;
    }
    let n = items.len() as f64;
    let mut sources: BTreeMap<String, (usize, f64, f64)> = BTreeMap::new();
    let mut hits: BTreeMap<usize, f64> = HITS_KS.iter().map(|&k| (k, 0.0)).collect();
    let (mut em_sum, mut f1_sum, mut mrr_sum) = (0.0, 0.0, 0.0);
    let mut tops = Vec::new();
    let mut golds = Vec::new();
    let mut ranked = 0usize;
    for it in items {
        let gold = &it.example.answer_text;
        let pred = it.answer.unwrap_or("");
        let (em, f1) = (exact_match(pred, gold), token_f1(pred, gold));
        em_sum += em;
        f1_sum += f1;
        let s = sources.entry(it.example.source.as_str().to_string()).or_default();
        s.0 += 1;
        s.1 += em;
        s.2 += f1;
        if let Some(gc) = it.example.gold_cell {
            if let Some(ranking) = it.ranking {
                let rank = ranking.iter().position(|&c| c == gc).map(|p| p + 1);
                for (&kk, h) in hits.iter_mut() {
                    *h += hits_at_k(rank, kk);
                }
                mrr_sum += mrr(rank);
                ranked += 1;
                tops.push(ranking.to_vec());
                golds.push(gc);
            }
            if let Some(pc) = it.predicted_cell {
                let cat = classify_error_for(pc, gc, it.example.source);
                *report.errors.entry(cat.as_str().to_string()).or_default() += 1;
            }
        }
    }
    report.em = em_sum / n;
    report.f1 = f1_sum / n;
    report.by_source = sources
        .into_iter()
        .map(|(k, (c, em, f1))| {
            (
                k,
                SourceScores {
                    n: c,
                    em: em / c as f64,
                    f1: f1 / c as f64,
                },
            )
        })
        .collect();
    if ranked > 0 {
        report.hits = hits.into_iter().map(|(k, h)| (k, h / ranked as f64)).collect();
        report.mrr = mrr_sum / ranked as f64;
        let (r, c) = row_col_accuracy(&tops, &golds, k);
        report.row_acc = r;
        report.col_acc = c;
    }
    report
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "questions  {}", self.n)?;
        writeln!(f, "EM         {:.1}", 100.0 * self.em)?;
        writeln!(f, "F1         {:.1}", 100.0 * self.f1)?;
        for (src, s) in &self.by_source {
            writeln!(f, "  {src:<11} n={:<5} EM {:.1}  F1 {:.1}", s.n, 100.0 * s.em, 100.0 * s.f1)?;
        }
        for (k, h) in &self.hits {
            writeln!(f, "Hits@{k:<5} {:.1}", 100.0 * h)?;
        }
        writeln!(f, "MRR        {:.1}", 100.0 * self.mrr)?;
        writeln!(f, "row acc    {:.1}", 100.0 * self.row_acc)?;
        write!(f, "col acc    {:.1}", 100.0 * self.col_acc)?;
        for (cat, c) in &self.errors {
            write!(f, "\n  {cat:<19} {c}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub metric: String,
    /// Percentage points.
    pub with: f64,
    pub without: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn delta(&self, metric: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.metric == metric).map(|r| r.delta)
    }
}

/// Per-metric `with - without`, in percentage points.
pub fn ablation_compare(with: &EvalReport, without: &EvalReport) -> AblationTable {
    let mut rows = Vec::new();
    let mut push = |metric: String, a: f64, b: f64| {
        let (a, b) = (100.0 * a, 100.0 * b);
        rows.push(AblationRow {
            metric,
            with: a,
            without: b,
            delta: a - b,
        });
    };
    let ks: Vec<usize> = with.hits.keys().chain(without.hits.keys()).copied().collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    for k in ks {
        push(
            format!("Hits@{k}"),
            with.hits.get(&k).copied().unwrap_or(0.0),
            without.hits.get(&k).copied().unwrap_or(0.0),
        );
    }
    push("MRR".into(), with.mrr, without.mrr);
    push("EM".into(), with.em, without.em);
    push("F1".into(), with.f1, without.f1);
    push("row_acc".into(), with.row_acc, without.row_acc);
    push("col_acc".into(), with.col_acc, without.col_acc);
    AblationTable { rows }
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<10} {:>8} {:>8} {:>8}", "metric", "with", "without", "delta")?;
        for r in &self.rows {
            write!(f, "\n{:<10} {:>8.1} {:>8.1} {:>+8.1}", r.metric, r.with, r.without, r.delta)?;
        }
        Ok(())
    }
}
