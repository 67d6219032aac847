//! Weak-supervision table/question alignment labels from schema-linking
//! rules: header-name occurrence, cell-value occurrence, the gold cell's
//! column and the bridge entity's column.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::dataset::{CellCoord, Passage, QaExample, Table};
use crate::text::{
    content_tokens, find_subsequence, is_stopword, normalize_answer, stem_variants, value_tokens,
};

/// Longest cell value (in tokens) considered for value linking.
pub const MAX_VALUE_NGRAM: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkSource {
    NameLink,
    ValueLink,
    GoldCellColumn,
    BridgeColumn,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentLabels {
    #[serde(rename = "qid")]
    pub question_id: String,
    pub table_id: String,
    pub labels: Vec<u8>,
    pub provenance: Vec<BTreeSet<LinkSource>>,
}

impl AlignmentLabels {
    pub fn positives(&self) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] == 1).collect()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.labels.iter().map(|&l| l as f64).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BridgeMatch {
    TitleExact,
    TitleNormalized,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BridgeCandidate {
    pub cell: CellCoord,
    pub passage_id: String,
    pub match_kind: BridgeMatch,
}

/// Cells whose text names one of their linked passages, row-major.
pub fn find_bridge_cells(table: &Table, passages: &BTreeMap<String, Passage>) -> Vec<BridgeCandidate> {
    let mut out = Vec::new();
    for cell in table.cells() {
        for pid in &cell.passage_ids {
            let Some(p) = passages.get(pid) else { continue };
            let kind = if cell.text == p.title {
                BridgeMatch::TitleExact
            } else if !cell.text.trim().is_empty()
                && normalize_answer(&cell.text) == normalize_answer(&p.title)
            {
                BridgeMatch::TitleNormalized
            } else {
                continue;
            };
            out.push(BridgeCandidate {
                cell: (cell.row, cell.col),
                passage_id: pid.clone(),
                match_kind: kind,
            });
        }
    }
    out
}

fn stemmed_set(tokens: &[String]) -> HashSet<String> {
    tokens.iter().flat_map(|t| stem_variants(t)).collect()
}

/// Columns whose header shares a content token with the question.
pub fn name_based_links(question: &str, headers: &[String]) -> BTreeSet<usize> {
    let q = stemmed_set(&content_tokens(question));
    headers
        .iter()
        .enumerate()
        .filter(|(_, h)| {
            content_tokens(h)
                .iter()
                .any(|t| stem_variants(t).iter().any(|v| q.contains(v)))
        })
        .map(|(j, _)| j)
        .collect()
}

/// Columns with a cell value occurring as a contiguous n-gram of the question.
pub fn value_based_links(question: &str, table: &Table) -> BTreeSet<usize> {
    let q = value_tokens(question);
    let mut out = BTreeSet::new();
    for j in 0..table.n_cols() {
        let hit = table.rows.iter().any(|row| {
            let v = value_tokens(&row[j].text);
            !v.is_empty()
                && v.len() <= MAX_VALUE_NGRAM
                && v.iter().any(|t| !is_stopword(t))
                && !find_subsequence(&q, &v).is_empty()
        });
        if hit {
            out.insert(j);
        }
    }
    out
}

pub fn make_alignment_labels(
    example: &QaExample,
    table: &Table,
    bridge: Option<&BridgeCandidate>,
) -> AlignmentLabels {
    let m = table.n_cols();
    let mut provenance = vec![BTreeSet::new(); m];
    for j in name_based_links(&example.question, &table.headers) {
        provenance[j].insert(LinkSource::NameLink);
    }
    for j in value_based_links(&example.question, table) {
        provenance[j].insert(LinkSource::ValueLink);
    }
    if let Some((_, c)) = example.gold_cell {
        if c < m {
            provenance[c].insert(LinkSource::GoldCellColumn);
        }
    }
    if let Some(b) = bridge {
        if b.cell.1 < m {
            provenance[b.cell.1].insert(LinkSource::BridgeColumn);
        }
    }
    let labels = provenance.iter().map(|p| u8::from(!p.is_empty())).collect();
    AlignmentLabels {
        question_id: example.question_id.clone(),
        table_id: table.table_id.clone(),
        labels,
        provenance,
    }
}

/// Bridge for an example when its gold cell is itself a bridge cell.
pub fn gold_bridge<'a>(
    example: &QaExample,
    candidates: &'a [BridgeCandidate],
) -> Option<&'a BridgeCandidate> {
    let gold = example.gold_cell?;
    candidates.iter().find(|b| b.cell == gold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::AnswerSource;

    fn headers(h: &[&str]) -> Vec<String> {
        h.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn name_links_on_case_one() {
        let q = "Who is the athlete in a city located on the Mississippi River ?";
        let got = name_based_links(q, &headers(&["Year", "Score", "Athlete", "Place"]));
        assert_eq!(got, BTreeSet::from([2]));
    }

    #[test]
    fn no_shared_tokens_no_links() {
        let got = name_based_links("Where did it happen ?", &headers(&["Year", "Score"]));
        assert!(got.is_empty());
    }

    #[test]
    fn year_value_link() {
        let t = Table::from_texts(
            "t",
            headers(&["Year", "Team"]),
            vec![
                vec!["1993".into(), "Bears".into()],
                vec!["1994".into(), "Lions".into()],
            ],
            None,
        )
        .unwrap();
        assert_eq!(value_based_links("Who won in 1994 ?", &t), BTreeSet::from([0]));
        assert!(value_based_links("Who won in 1994–95 season ?", &t).len() <= 1);
        assert!(value_based_links("Who won last ?", &t).is_empty());
    }

    #[test]
    fn gold_only_labels() {
        let t = Table::from_texts(
            "t",
            headers(&["Alpha", "Beta", "Gamma"]),
            vec![vec!["x1".into(), "y1".into(), "z1".into()]],
            None,
        )
        .unwrap();
        let mut ex = QaExample {
            question_id: "q".into(),
            table_id: "t".into(),
            question: "Nothing matches here ?".into(),
            answer_text: "y1".into(),
            gold_cell: None,
            source: AnswerSource::InTable,
        };
        let none = make_alignment_labels(&ex, &t, None);
        assert_eq!(none.labels, vec![0, 0, 0]);
        ex.gold_cell = Some((0, 1));
        let gold = make_alignment_labels(&ex, &t, None);
        assert_eq!(gold.labels, vec![0, 1, 0]);
        assert_eq!(
            gold.provenance[1],
            BTreeSet::from([LinkSource::GoldCellColumn])
        );
    }
}
