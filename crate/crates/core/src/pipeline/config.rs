use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::filter::{Similarity, DEFAULT_FILTER_K, DEFAULT_TOKEN_BUDGET};
use crate::reader::DEFAULT_MU;
use crate::selector::{DEFAULT_SIGMA, DEFAULT_TOP_K};

/// Prefix of environment variables that override config keys, e.g.
/// `TQA_SIGMA=0.3`.
pub const ENV_PREFIX: &str = "TQA_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusFormat {
    Hybrid,
    Wtq,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Hash,
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerMode {
    /// Extractive when the split has passages, cell text otherwise.
    Auto,
    Extractive,
    Cell,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub corpus_format: CorpusFormat,
    /// Root of every artifact the stages write.
    pub work_dir: PathBuf,
    /// Optional JSONL of `{"qid","cell":[r,c],"passage_id"}` bridge choices.
    pub bridges: Option<PathBuf>,
    pub encoder: EncoderKind,
    pub external_embeddings: Option<PathBuf>,
    pub similarity: Similarity,
    pub k: usize,
    pub sigma: f64,
    pub token_budget: usize,
    pub filter_k: usize,
    pub mu: f64,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    /// 0 means one worker per core.
    pub workers: usize,
    pub answer_mode: AnswerMode,
    pub cell_fallback: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            train: None,
            dev: None,
            test: None,
            corpus_format: CorpusFormat::Hybrid,
            work_dir: PathBuf::from("work"),
            bridges: None,
            encoder: EncoderKind::Hash,
            external_embeddings: None,
            similarity: Similarity::Cosine,
            k: DEFAULT_TOP_K,
            sigma: DEFAULT_SIGMA,
            token_budget: DEFAULT_TOKEN_BUDGET,
            filter_k: DEFAULT_FILTER_K,
            mu: DEFAULT_MU,
            lr: 5e-5,
            batch: 32,
            epochs: 4,
            seed: 13,
            workers: 0,
            answer_mode: AnswerMode::Auto,
            cell_fallback: true,
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "train",
    "dev",
    "test",
    "corpus_format",
    "work_dir",
    "bridges",
    "encoder",
    "external_embeddings",
    "similarity",
    "k",
    "sigma",
    "token_budget",
    "filter_k",
    "mu",
    "lr",
    "batch",
    "epochs",
    "seed",
    "workers",
    "answer_mode",
    "cell_fallback",
];

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Validation(format!("config key {key}: cannot parse {value:?}: {e}")))
}

fn parse_enum<T: for<'de> Deserialize<'de>>(key: &str, value: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(value.to_string()))
        .map_err(|_| Error::Validation(format!("config key {key}: unknown value {value:?}")))
}

fn enum_str<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        _ => unreachable!("unit enum variants serialize as strings"),
    }
}

fn opt_path(value: &str, base: Option<&Path>) -> Option<PathBuf> {
    if value.is_empty() {
        return None;
    }
    Some(resolve(value, base))
}

fn resolve(value: &str, base: Option<&Path>) -> PathBuf {
    let p = PathBuf::from(value);
    match base {
        Some(b) if p.is_relative() => b.join(p),
        _ => p,
    }
}

impl PipelineConfig {
    /// Sets one key. Relative paths are taken relative to `base` when given.
    pub fn set(&mut self, key: &str, value: &str, base: Option<&Path>) -> Result<()> {
        let value = value.trim();
        match key {
            "train" => self.train = opt_path(value, base),
            "dev" => self.dev = opt_path(value, base),
            "test" => self.test = opt_path(value, base),
            "corpus_format" => self.corpus_format = parse_enum(key, value)?,
            "work_dir" => self.work_dir = resolve(value, base),
            "bridges" => self.bridges = opt_path(value, base),
            "encoder" => self.encoder = parse_enum(key, value)?,
            "external_embeddings" => self.external_embeddings = opt_path(value, base),
            "similarity" => self.similarity = parse_enum(key, value)?,
            "k" => self.k = parse_num(key, value)?,
            "sigma" => self.sigma = parse_num(key, value)?,
            "token_budget" => self.token_budget = parse_num(key, value)?,
            "filter_k" => self.filter_k = parse_num(key, value)?,
            "mu" => self.mu = parse_num(key, value)?,
            "lr" => self.lr = parse_num(key, value)?,
            "batch" => self.batch = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "workers" => self.workers = parse_num(key, value)?,
            "answer_mode" => self.answer_mode = parse_enum(key, value)?,
            "cell_fallback" => self.cell_fallback = parse_num(key, value)?,
            _ => return Err(Error::Validation(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        Some(match key {
            "train" => path(&self.train),
            "dev" => path(&self.dev),
            "test" => path(&self.test),
            "corpus_format" => enum_str(&self.corpus_format),
            "work_dir" => self.work_dir.display().to_string(),
            "bridges" => path(&self.bridges),
            "encoder" => enum_str(&self.encoder),
            "external_embeddings" => path(&self.external_embeddings),
            "similarity" => enum_str(&self.similarity),
            "k" => self.k.to_string(),
            "sigma" => self.sigma.to_string(),
            "token_budget" => self.token_budget.to_string(),
            "filter_k" => self.filter_k.to_string(),
            "mu" => self.mu.to_string(),
            "lr" => self.lr.to_string(),
            "batch" => self.batch.to_string(),
            "epochs" => self.epochs.to_string(),
            "seed" => self.seed.to_string(),
            "workers" => self.workers.to_string(),
            "answer_mode" => enum_str(&self.answer_mode),
            "cell_fallback" => self.cell_fallback.to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, base: Option<&Path>, origin: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                file: origin.to_string(),
                record: format!("line {}", n + 1),
                message: format!("expected key = value, got {line:?}"),
            })?;
            self.set(key.trim(), value, base)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text, path.parent(), &path.display().to_string())
    }

    /// Applies `TQA_<KEY>` variables from `vars`; unknown suffixes are errors.
    pub fn apply_env<I: IntoIterator<Item = (String, String)>>(&mut self, vars: I) -> Result<()> {
        let mut found: BTreeMap<String, String> = BTreeMap::new();
        for (name, value) in vars {
            if let Some(rest) = name.strip_prefix(ENV_PREFIX) {
                found.insert(rest.to_lowercase(), value);
            }
        }
        for (key, value) in found {
            self.set(&key, &value, None)?;
        }
        Ok(())
    }

    /// Defaults, then the file, then the environment, then `overrides`.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        if let Some(f) = file {
            cfg.apply_file(f)?;
        }
        cfg.apply_env(std::env::vars())?;
        for (k, v) in overrides {
            cfg.set(k, v, None)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.sigma) {
            return Err(Error::Validation(format!("sigma = {} outside [0, 1]", self.sigma)));
        }
        if self.k == 0 {
            return Err(Error::Validation("k must be at least 1".into()));
        }
        if !(self.mu >= 0.0) || !self.mu.is_finite() {
            return Err(Error::Validation(format!("mu = {} must be non-negative", self.mu)));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Validation(format!("lr = {} must be positive", self.lr)));
        }
        if self.batch == 0 || self.epochs == 0 || self.filter_k == 0 {
            return Err(Error::Validation("batch, epochs and filter_k must be positive".into()));
        }
        if self.encoder == EncoderKind::External && self.external_embeddings.is_none() {
            return Err(Error::Validation("encoder = external needs external_embeddings".into()));
        }
        Ok(())
    }

    /// `key = value` lines for every key, in canonical order.
    pub fn to_text(&self) -> String {
        CONFIG_KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", self.get(k).unwrap_or_default()))
            .collect()
    }

    /// SHA-256 over the given keys' canonical `key=value` lines.
    pub fn hash_keys(&self, keys: &[&str]) -> String {
        let mut h = Sha256::new();
        for k in keys {
            h.update(format!("{k}={}\n", self.get(k).unwrap_or_default()));
        }
        hex::encode(h.finalize())
    }

    pub fn values(&self, keys: &[&str]) -> BTreeMap<String, String> {
        keys.iter()
            .map(|k| (k.to_string(), self.get(k).unwrap_or_default()))
            .collect()
    }
}
