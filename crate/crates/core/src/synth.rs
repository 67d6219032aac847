//! Deterministic synthetic hybrid corpora with known gold cells.
//!
//! Every table has one entity column whose cells link to a passage titled
//! by the cell text. Questions name a key column plus one of its values
//! (which fixes the row) and either a target column (in-table) or a
//! passage attribute of the row's entity (in-passage).

use std::collections::{BTreeMap, HashSet};
use std::ops::RangeInclusive;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{find_bridge_cells, gold_bridge, make_alignment_labels, AlignmentLabels};
use crate::dataset::{write_corpus, write_jsonl, AnswerSource, Corpus, Passage, QaExample, Table};
use crate::error::{Error, Result};
use crate::text::{is_stopword, stem_variants};

pub const HEADER_POOL: &[&str] = &[
    "Team", "City", "Coach", "Stadium", "Founder", "Region", "Color", "Mascot", "Sponsor",
    "League", "Captain", "Owner", "Venue", "Rival", "Award", "Label",
];

pub const ATTRIBUTE_POOL: &[&str] = &[
    "nickname", "motto", "anthem", "emblem", "origin", "partner", "rating", "slogan",
];

const ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];
const CODAS: &[&str] = &["", "", "", "n", "r", "l", "k"];

const ATTRIBUTES_PER_ENTITY: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_tables: usize,
    pub rows: RangeInclusive<usize>,
    pub cols: RangeInclusive<usize>,
    pub questions_per_table: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_tables: 50,
            rows: 4..=8,
            cols: 3..=6,
            questions_per_table: 8,
            seed: 13,
        }
    }
}

/// The constraints a question was generated from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionSpec {
    pub question_id: String,
    pub template: usize,
    pub key_header: String,
    pub key_value: String,
    /// Target column header (in-table) or entity column header (in-passage).
    pub target_header: String,
    pub attribute: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub corpus: Corpus,
    pub labels: Vec<AlignmentLabels>,
    pub specs: Vec<QuestionSpec>,
}

impl SyntheticCorpus {
    /// Writes `corpus.json` and `alignment_labels.jsonl` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_corpus(&self.corpus, dir.join("corpus.json"))?;
        write_jsonl(&self.labels, dir.join("alignment_labels.jsonl"))
    }
}

struct WordMint {
    used: HashSet<String>,
    reserved: HashSet<String>,
}

impl WordMint {
    fn new() -> Self {
        let reserved = HEADER_POOL
            .iter()
            .map(|h| h.to_lowercase())
            .chain(ATTRIBUTE_POOL.iter().map(|a| a.to_string()))
            .collect();
        WordMint {
            used: HashSet::new(),
            reserved,
        }
    }

    fn fresh<R: Rng>(&mut self, rng: &mut R) -> String {
        loop {
            let syllables = rng.random_range(2..=3);
            let mut w = String::new();
            for _ in 0..syllables {
                w.push_str(ONSETS.choose(rng).unwrap());
                w.push_str(VOWELS.choose(rng).unwrap());
                w.push_str(CODAS.choose(rng).unwrap());
            }
            let clashes = is_stopword(&w)
                || stem_variants(&w).iter().any(|v| self.reserved.contains(v))
                || self.used.contains(&w);
            if !clashes {
                self.used.insert(w.clone());
                return w;
            }
        }
    }
}

fn check_range(name: &str, r: &RangeInclusive<usize>, min: usize) -> Result<()> {
    if r.is_empty() || *r.start() < min {
        return Err(Error::InvalidArgument(format!(
            "{name} range {}..={} is degenerate (need start >= {min} and start <= end)",
            r.start(),
            r.end()
        )));
    }
    Ok(())
}

fn title_case(w: &str) -> String {
    let mut c = w.chars();
    c.next()
        .map(|f| f.to_uppercase().chain(c).collect())
        .unwrap_or_default()
}

pub fn generate_corpus(config: &SynthConfig) -> Result<SyntheticCorpus> {
    if config.n_tables == 0 || config.questions_per_table == 0 {
        return Err(Error::InvalidArgument("need at least one table and one question per table".into()));
    }
    check_range("rows", &config.rows, 1)?;
    check_range("cols", &config.cols, 2)?;
    if *config.cols.end() > HEADER_POOL.len() {
        return Err(Error::InvalidArgument(format!(
            "at most {} columns supported",
            HEADER_POOL.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut mint = WordMint::new();
    let mut tables = Vec::new();
    let mut passages = BTreeMap::new();
    let mut examples = Vec::new();
    let mut specs = Vec::new();

    for t in 0..config.n_tables {
        let table_id = format!("syn-t{t:03}");
        let n_rows = rng.random_range(config.rows.clone());
        let n_cols = rng.random_range(config.cols.clone());
        let headers: Vec<String> = HEADER_POOL
            .choose_multiple(&mut rng, n_cols)
            .map(|h| h.to_string())
            .collect();
        let entity_col = rng.random_range(0..n_cols);
        let mut texts = vec![vec![String::new(); n_cols]; n_rows];
        let mut links = vec![vec![Vec::new(); n_cols]; n_rows];
        // attribute -> value, per row's entity
        let mut facts: Vec<BTreeMap<String, String>> = Vec::with_capacity(n_rows);
        for i in 0..n_rows {
            for j in 0..n_cols {
                if j != entity_col {
                    texts[i][j] = mint.fresh(&mut rng);
                }
            }
            let title = format!("{} {}", title_case(&mint.fresh(&mut rng)), title_case(&mint.fresh(&mut rng)));
            let pid = format!("{table_id}-p{i}");
            let mut attrs: Vec<&str> = ATTRIBUTE_POOL.choose_multiple(&mut rng, ATTRIBUTES_PER_ENTITY).copied().collect();
            attrs.shuffle(&mut rng);
            let mut sentences = Vec::new();
            let mut row_facts = BTreeMap::new();
            for a in attrs {
                let v = mint.fresh(&mut rng);
                sentences.push(format!("The {a} of {title} is {v} ."));
                row_facts.insert(a.to_string(), v);
            }
            sentences.push(format!("{title} is listed in this table ."));
            passages.insert(
                pid.clone(),
                Passage {
                    passage_id: pid.clone(),
                    title: title.clone(),
                    sentences,
                },
            );
            texts[i][entity_col] = title;
            links[i][entity_col] = vec![pid];
            facts.push(row_facts);
        }
        let table = Table::from_texts(&table_id, headers.clone(), texts.clone(), Some(links))?;

        for q in 0..config.questions_per_table {
            let qid = format!("{table_id}-q{q}");
            let row = rng.random_range(0..n_rows);
            let in_table = q % 2 == 0;
            let (question, answer, gold, spec) = if in_table {
                let key = rng.random_range(0..n_cols);
                let target = loop {
                    let c = rng.random_range(0..n_cols);
                    if c != key {
                        break c;
                    }
                };
                let template = rng.random_range(0..3);
                let (kh, th, v) = (&headers[key], &headers[target], &texts[row][key]);
                let question = match template {
                    0 => format!("What is the {th} of the {kh} {v} ?"),
                    1 => format!("Which {th} has {kh} {v} ?"),
                    _ => format!("For {kh} {v} , what is the {th} ?"),
                };
                let spec = QuestionSpec {
                    question_id: qid.clone(),
                    template,
                    key_header: kh.clone(),
                    key_value: v.clone(),
                    target_header: th.clone(),
                    attribute: None,
                };
                (question, texts[row][target].clone(), (row, target), spec)
            } else {
                let key = loop {
                    let c = rng.random_range(0..n_cols);
                    if c != entity_col {
                        break c;
                    }
                };
                let attrs: Vec<&String> = facts[row].keys().collect();
                let a = attrs.choose(&mut rng).unwrap().to_string();
                let template = 3 + rng.random_range(0..3);
                let (kh, eh, v) = (&headers[key], &headers[entity_col], &texts[row][key]);
                let question = match template {
                    3 => format!("What is the {a} of the {eh} whose {kh} is {v} ?"),
                    4 => format!("Which {a} belongs to the {eh} with {kh} {v} ?"),
                    _ => format!("For {kh} {v} , what is the {a} of the {eh} ?"),
                };
                let spec = QuestionSpec {
                    question_id: qid.clone(),
                    template,
                    key_header: kh.clone(),
                    key_value: v.clone(),
                    target_header: eh.clone(),
                    attribute: Some(a.clone()),
                };
                (question, facts[row][&a].clone(), (row, entity_col), spec)
            };
            let example = QaExample {
                question_id: qid,
                table_id: table_id.clone(),
                question,
                answer_text: answer,
                gold_cell: Some(gold),
                source: if in_table {
                    AnswerSource::InTable
                } else {
                    AnswerSource::InPassage
                },
            };
            examples.push(example);
            specs.push(spec);
        }
        tables.push(table);
    }

    let corpus = Corpus::new(tables, passages, examples);
    let labels = corpus
        .examples
        .iter()
        .map(|ex| {
            let table = corpus.table(&ex.table_id).expect("generated table");
            let bridges = find_bridge_cells(table, &corpus.passages);
            make_alignment_labels(ex, table, gold_bridge(ex, &bridges))
        })
        .collect();
    Ok(SyntheticCorpus {
        corpus,
        labels,
        specs,
    })
}
