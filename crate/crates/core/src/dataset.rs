//! Hybrid table/passage corpora, WTQ-style TSV corpora and prediction files.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::text::{find_subsequence, normalized_tokens};

/// `(row, col)`; serialized as `[r, c]`.
pub type CellCoord = (usize, usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
    pub text: String,
    pub passage_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub table_id: String,
    pub headers: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    /// Builds a table from a text matrix; links default to empty.
    pub fn from_texts(
        table_id: impl Into<String>,
        headers: Vec<String>,
        texts: Vec<Vec<String>>,
        links: Option<Vec<Vec<Vec<String>>>>,
    ) -> Result<Self> {
        let table_id = table_id.into();
        let rows = texts
            .into_iter()
            .enumerate()
            .map(|(r, row)| {
                row.into_iter()
                    .enumerate()
                    .map(|(c, text)| Cell {
                        row: r,
                        col: c,
                        text,
                        passage_ids: links
                            .as_ref()
                            .and_then(|l| l.get(r))
                            .and_then(|l| l.get(c))
                            .cloned()
                            .unwrap_or_default(),
                    })
                    .collect()
            })
            .collect();
        let table = Table {
            table_id,
            headers,
            rows,
        };
        table.validate()?;
        Ok(table)
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.headers.len()
    }

    pub fn cell(&self, row: usize, col: usize) -> Option<&Cell> {
        self.rows.get(row).and_then(|r| r.get(col))
    }

    pub fn cells(&self) -> impl Iterator<Item = &Cell> {
        self.rows.iter().flatten()
    }

    pub fn validate(&self) -> Result<()> {
        let id = &self.table_id;
        if self.headers.is_empty() {
            return Err(Error::Validation(format!("table {id}: no headers")));
        }
        if let Some(j) = self.headers.iter().position(|h| h.trim().is_empty()) {
            return Err(Error::Validation(format!("table {id}: header {j} is empty")));
        }
        if self.rows.is_empty() {
            return Err(Error::Validation(format!("table {id}: no rows")));
        }
        let m = self.headers.len();
        for (i, row) in self.rows.iter().enumerate() {
            if row.len() != m {
                return Err(Error::Validation(format!(
                    "table {id}: row {i} has {} cells under {m} headers",
                    row.len()
                )));
            }
            for (j, cell) in row.iter().enumerate() {
                if cell.row != i || cell.col != j {
                    return Err(Error::Validation(format!(
                        "table {id}: cell at ({i},{j}) records position ({},{})",
                        cell.row, cell.col
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Passage {
    pub passage_id: String,
    pub title: String,
    pub sentences: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerSource {
    InTable,
    InPassage,
    Compute,
    Unknown,
}

impl AnswerSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            AnswerSource::InTable => "in_table",
            AnswerSource::InPassage => "in_passage",
            AnswerSource::Compute => "compute",
            AnswerSource::Unknown => "unknown",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaExample {
    pub question_id: String,
    pub table_id: String,
    pub question: String,
    pub answer_text: String,
    pub gold_cell: Option<CellCoord>,
    pub source: AnswerSource,
}

/// Whether the normalized `needle` occurs in the normalized `haystack`.
pub fn occurrences(haystack: &str, needle: &str) -> usize {
    let h = normalized_tokens(haystack);
    let n = normalized_tokens(needle);
    find_subsequence(&h, &n).len()
}

/// Immutable loaded corpus. Passage ordering is by id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub tables: Vec<Table>,
    pub passages: BTreeMap<String, Passage>,
    pub examples: Vec<QaExample>,
    table_index: HashMap<String, usize>,
}

impl Corpus {
    pub fn new(
        tables: Vec<Table>,
        passages: BTreeMap<String, Passage>,
        examples: Vec<QaExample>,
    ) -> Self {
        let table_index = tables
            .iter()
            .enumerate()
            .map(|(i, t)| (t.table_id.clone(), i))
            .collect();
        Corpus {
            tables,
            passages,
            examples,
            table_index,
        }
    }

    pub fn table(&self, table_id: &str) -> Option<&Table> {
        self.table_index.get(table_id).map(|&i| &self.tables[i])
    }

    pub fn table_for(&self, example: &QaExample) -> Result<&Table> {
        self.table(&example.table_id).ok_or_else(|| {
            Error::Validation(format!(
                "example {} references unknown table {}",
                example.question_id, example.table_id
            ))
        })
    }

    /// Restricts the corpus to the given tables (and the examples on them).
    pub fn subset_tables(&self, keep: impl Fn(usize, &Table) -> bool) -> Corpus {
        let tables: Vec<Table> = self
            .tables
            .iter()
            .enumerate()
            .filter(|(i, t)| keep(*i, t))
            .map(|(_, t)| t.clone())
            .collect();
        let ids: std::collections::HashSet<&str> =
            tables.iter().map(|t| t.table_id.as_str()).collect();
        let examples = self
            .examples
            .iter()
            .filter(|e| ids.contains(e.table_id.as_str()))
            .cloned()
            .collect();
        let linked: std::collections::HashSet<&str> = tables
            .iter()
            .flat_map(|t| t.cells())
            .flat_map(|c| c.passage_ids.iter().map(String::as_str))
            .collect();
        let passages = self
            .passages
            .iter()
            .filter(|(k, _)| linked.contains(k.as_str()))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        Corpus::new(tables, passages, examples)
    }

    /// Checks every invariant of the loaded types.
    pub fn validate(&self, require_answers: bool) -> Result<()> {
        for t in &self.tables {
            t.validate()?;
            for c in t.cells() {
                if let Some(pid) = c.passage_ids.iter().find(|p| !self.passages.contains_key(*p)) {
                    return Err(Error::Validation(format!(
                        "table {}: cell ({},{}) links missing passage {pid}",
                        t.table_id, c.row, c.col
                    )));
                }
            }
        }
        for (pid, p) in &self.passages {
            if p.sentences.is_empty() {
                return Err(Error::Validation(format!("passage {pid}: no sentences")));
            }
        }
        for e in &self.examples {
            let table = self.table_for(e)?;
            if require_answers && e.answer_text.trim().is_empty() {
                return Err(Error::Validation(format!(
                    "example {}: empty answer",
                    e.question_id
                )));
            }
            if let Some((r, c)) = e.gold_cell {
                let cell = table.cell(r, c).ok_or_else(|| {
                    Error::Validation(format!(
                        "example {}: gold cell ({r},{c}) outside {}x{} table {}",
                        e.question_id,
                        table.n_rows(),
                        table.n_cols(),
                        table.table_id
                    ))
                })?;
                if e.source == AnswerSource::InTable
                    && !e.answer_text.is_empty()
                    && occurrences(&cell.text, &e.answer_text) == 0
                {
                    return Err(Error::Validation(format!(
                        "example {}: in-table gold cell ({r},{c}) does not contain the answer",
                        e.question_id
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    /// Reject examples with an empty answer (train/dev splits).
    pub require_answers: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            require_answers: true,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct RawTable {
    id: String,
    headers: Vec<String>,
    rows: Vec<Vec<String>>,
    #[serde(default)]
    links: Vec<Vec<Vec<String>>>,
}

#[derive(Serialize, Deserialize)]
struct RawPassage {
    title: String,
    sentences: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct RawExample {
    qid: String,
    table_id: String,
    question: String,
    answer: String,
    #[serde(default = "unknown_source")]
    source: AnswerSource,
    #[serde(default)]
    gold_cell: Option<CellCoord>,
}

fn unknown_source() -> AnswerSource {
    AnswerSource::Unknown
}

fn decode<T: DeserializeOwned>(file: &str, record: String, value: Value) -> Result<T> {
    serde_json::from_value(value).map_err(|e| Error::Parse {
        file: file.to_string(),
        record,
        message: e.to_string(),
    })
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Loads the canonical hybrid corpus JSON document.
pub fn load_hybrid_corpus(path: impl AsRef<Path>, opts: LoadOptions) -> Result<Corpus> {
    let path = path.as_ref();
    let file = path.display().to_string();
    let text = read_to_string(path)?;
    parse_hybrid_corpus(&text, &file, opts)
}

pub fn parse_hybrid_corpus(text: &str, file: &str, opts: LoadOptions) -> Result<Corpus> {
    let doc: Value = serde_json::from_str(text).map_err(|e| Error::Parse {
        file: file.to_string(),
        record: "document".into(),
        message: e.to_string(),
    })?;
    let mut doc = match doc {
        Value::Object(map) => map,
        _ => {
            return Err(Error::Parse {
                file: file.to_string(),
                record: "document".into(),
                message: "expected a JSON object".into(),
            })
        }
    };
    let take_array = |doc: &mut serde_json::Map<String, Value>, key: &str| -> Result<Vec<Value>> {
        match doc.remove(key) {
            Some(Value::Array(a)) => Ok(a),
            None => Ok(Vec::new()),
            Some(_) => Err(Error::Parse {
                file: file.to_string(),
                record: key.to_string(),
                message: "expected an array".into(),
            }),
        }
    };

    let mut passages = BTreeMap::new();
    match doc.remove("passages") {
        Some(Value::Object(map)) => {
            for (pid, v) in map {
                let raw: RawPassage = decode(file, format!("passages[{pid:?}]"), v)?;
                passages.insert(
                    pid.clone(),
                    Passage {
                        passage_id: pid,
                        title: raw.title,
                        sentences: raw.sentences,
                    },
                );
            }
        }
        None => {}
        Some(_) => {
            return Err(Error::Parse {
                file: file.to_string(),
                record: "passages".into(),
                message: "expected an object keyed by passage id".into(),
            })
        }
    }

    let mut tables = Vec::new();
    for (i, v) in take_array(&mut doc, "tables")?.into_iter().enumerate() {
        let raw: RawTable = decode(file, format!("tables[{i}]"), v)?;
        let mut links = raw.links;
        for (r, row_links) in links.iter_mut().enumerate() {
            for (c, cell_links) in row_links.iter_mut().enumerate() {
                cell_links.retain(|pid| {
                    let ok = passages.contains_key(pid);
                    if !ok {
                        log::warn!(
                            "{file}: table {} cell ({r},{c}): dropping dangling link {pid}",
                            raw.id
                        );
                    }
                    ok
                });
            }
        }
        let table = Table::from_texts(raw.id, raw.headers, raw.rows, Some(links))?;
        tables.push(table);
    }

    let mut examples = Vec::new();
    for (i, v) in take_array(&mut doc, "examples")?.into_iter().enumerate() {
        let raw: RawExample = decode(file, format!("examples[{i}]"), v)?;
        examples.push(QaExample {
            question_id: raw.qid,
            table_id: raw.table_id,
            question: raw.question,
            answer_text: raw.answer,
            gold_cell: raw.gold_cell,
            source: raw.source,
        });
    }
    let corpus = Corpus::new(tables, passages, examples);
    corpus.validate(opts.require_answers)?;
    Ok(corpus)
}

/// Serializes a corpus in the canonical JSON layout.
pub fn corpus_to_json(corpus: &Corpus) -> Value {
    let tables: Vec<RawTable> = corpus
        .tables
        .iter()
        .map(|t| RawTable {
            id: t.table_id.clone(),
            headers: t.headers.clone(),
            rows: t
                .rows
                .iter()
                .map(|r| r.iter().map(|c| c.text.clone()).collect())
                .collect(),
            links: t
                .rows
                .iter()
                .map(|r| r.iter().map(|c| c.passage_ids.clone()).collect())
                .collect(),
        })
        .collect();
    let passages: BTreeMap<&String, RawPassage> = corpus
        .passages
        .iter()
        .map(|(k, p)| {
            (
                k,
                RawPassage {
                    title: p.title.clone(),
                    sentences: p.sentences.clone(),
                },
            )
        })
        .collect();
    let examples: Vec<RawExample> = corpus
        .examples
        .iter()
        .map(|e| RawExample {
            qid: e.question_id.clone(),
            table_id: e.table_id.clone(),
            question: e.question.clone(),
            answer: e.answer_text.clone(),
            source: e.source,
            gold_cell: e.gold_cell,
        })
        .collect();
    serde_json::json!({ "tables": tables, "passages": passages, "examples": examples })
}

pub fn write_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let bytes = serde_json::to_vec(&corpus_to_json(corpus))?;
    write_atomic(path.as_ref(), &bytes)
}

/// Loads a WTQ-style TSV: `id \t question \t table-file \t answer`.
/// Table files are resolved relative to the TSV's directory; `.csv` files
/// are comma separated, anything else tab separated, first line headers.
pub fn load_wtq_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let file = path.display().to_string();
    let text = read_to_string(path)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut tables: Vec<Table> = Vec::new();
    let mut table_ids: HashMap<String, usize> = HashMap::new();
    let mut examples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if lineno == 0 && fields.first() == Some(&"id") {
            continue;
        }
        if fields.len() != 4 {
            return Err(Error::Parse {
                file: file.clone(),
                record: format!("line {}", lineno + 1),
                message: format!("expected 4 tab-separated fields, found {}", fields.len()),
            });
        }
        let (qid, question, table_file, answer) = (fields[0], fields[1], fields[2], fields[3]);
        if answer.trim().is_empty() {
            return Err(Error::Validation(format!(
                "{file}: line {}: example {qid} has an empty answer",
                lineno + 1
            )));
        }
        let t_idx = match table_ids.get(table_file) {
            Some(&i) => i,
            None => {
                let table = load_wtq_table(&base.join(table_file), table_file)?;
                tables.push(table);
                table_ids.insert(table_file.to_string(), tables.len() - 1);
                tables.len() - 1
            }
        };
        let table = &tables[t_idx];
        let target = normalized_tokens(answer);
        let matches: Vec<CellCoord> = table
            .cells()
            .filter(|c| normalized_tokens(&c.text) == target)
            .map(|c| (c.row, c.col))
            .collect();
        examples.push(QaExample {
            question_id: qid.to_string(),
            table_id: table_file.to_string(),
            question: question.to_string(),
            answer_text: answer.to_string(),
            gold_cell: if matches.len() == 1 { Some(matches[0]) } else { None },
            source: AnswerSource::InTable,
        });
    }
    let corpus = Corpus::new(tables, BTreeMap::new(), examples);
    corpus.validate(true)?;
    Ok(corpus)
}

fn load_wtq_table(path: &Path, table_id: &str) -> Result<Table> {
    let delimiter = if path.extension().is_some_and(|e| e == "csv") {
        b','
    } else {
        b'\t'
    };
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(true)
        .flexible(true)
        .quoting(delimiter == b',')
        .from_path(path)
        .map_err(|e| Error::Parse {
            file: path.display().to_string(),
            record: "table".into(),
            message: e.to_string(),
        })?;
    let unescape = |s: &str| s.replace("\\n", " ").replace("\\p", "|").replace("\\\\", "\\");
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Parse {
            file: path.display().to_string(),
            record: "header".into(),
            message: e.to_string(),
        })?
        .iter()
        .map(unescape)
        .collect();
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            file: path.display().to_string(),
            record: format!("row {i}"),
            message: e.to_string(),
        })?;
        rows.push(rec.iter().map(unescape).collect());
    }
    Table::from_texts(table_id, headers, rows, None)
}

/// One answered question, as written to the predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub qid: String,
    pub answer: String,
    pub cell: CellCoord,
    pub row_prob: f64,
    pub col_prob: f64,
    pub span_score: f64,
}

pub fn write_predictions(records: &[PredictionRecord], path: impl AsRef<Path>) -> Result<()> {
    write_jsonl(records, path)
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionRecord>> {
    read_jsonl(path)
}

/// Writes via a sibling temp file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| Error::io(&dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn write_jsonl<T: Serialize>(records: &[T], path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    write_atomic(path.as_ref(), &buf)
}

pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            file: path.display().to_string(),
            record: format!("line {}", i + 1),
            message: e.to_string(),
        })?);
    }
    Ok(out)
}
