use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{AnswerMode, CorpusFormat, EncoderKind, PipelineConfig};
use super::manifest::Manifest;
use crate::align::{find_bridge_cells, gold_bridge, make_alignment_labels, AlignmentLabels, BridgeCandidate, BridgeMatch};
use crate::dataset::{
    load_hybrid_corpus, load_wtq_corpus, read_jsonl, read_predictions, write_atomic, write_corpus, write_jsonl,
    write_predictions, CellCoord, Corpus, LoadOptions, PredictionRecord, Table,
};
use crate::encoder::{BpeTokenizer, HashEncoder, PrecomputedEncoder, TextEncoder, TinyConfig};
use crate::error::{Error, Result};
use crate::filter::{expand_table, ExpandedCell, FilterConfig};
use crate::metrics::{ablation_compare, evaluate, AblationTable, EvalItem, EvalReport};
use crate::reader::{
    answer_question, build_reader_instances, clean_instance_filter, train_reader, AnswerConfig, ReaderInstance,
    ReaderTrainConfig, SpanReader,
};
use crate::selector::{
    combine_scores, relevance_heatmap, score_table, serialize_row, topk_cells, train_selector, ExpandedCells,
    RankedCell, SelectorExample, SelectorModel, SelectorTrainConfig,
};

pub const SPLITS: [&str; 3] = ["train", "dev", "test"];

/// Pipeline stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Ingest,
    BuildAlignmentData,
    FilterPassages,
    TrainSelector,
    SelectCells,
    TrainReader,
    Answer,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Ingest,
        Stage::BuildAlignmentData,
        Stage::FilterPassages,
        Stage::TrainSelector,
        Stage::SelectCells,
        Stage::TrainReader,
        Stage::Answer,
        Stage::Evaluate,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::BuildAlignmentData => "build-alignment-data",
            Stage::FilterPassages => "filter-passages",
            Stage::TrainSelector => "train-selector",
            Stage::SelectCells => "select-cells",
            Stage::TrainReader => "train-reader",
            Stage::Answer => "answer",
            Stage::Evaluate => "evaluate",
        }
    }

    pub fn from_name(name: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|s| s.name() == name)
    }

    /// Config keys whose values change this stage's outputs.
    pub fn config_keys(&self) -> &'static [&'static str] {
        match self {
            Stage::Ingest => &["train", "dev", "test", "corpus_format"],
            Stage::BuildAlignmentData => &["bridges"],
            Stage::FilterPassages => &["encoder", "external_embeddings", "similarity", "filter_k", "token_budget", "seed"],
            Stage::TrainSelector => &["sigma", "lr", "batch", "epochs", "seed"],
            Stage::SelectCells => &["k"],
            Stage::TrainReader => &["k", "lr", "batch", "epochs", "seed"],
            Stage::Answer => &["k", "mu", "answer_mode", "cell_fallback"],
            Stage::Evaluate => &["k"],
        }
    }
}

/// Where every artifact lives under the work directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }
    pub fn corpus(&self, split: &str) -> PathBuf {
        self.root.join("corpus").join(format!("{split}.json"))
    }
    pub fn alignment(&self, split: &str) -> PathBuf {
        self.root.join("alignment").join(format!("{split}.jsonl"))
    }
    pub fn filtered(&self, split: &str) -> PathBuf {
        self.root.join("filtered").join(format!("{split}.jsonl"))
    }
    pub fn selections(&self, split: &str) -> PathBuf {
        self.root.join("selections").join(format!("{split}.jsonl"))
    }
    pub fn predictions(&self, split: &str) -> PathBuf {
        self.root.join("predictions").join(format!("{split}.jsonl"))
    }
    pub fn report(&self, split: &str) -> PathBuf {
        self.root.join("reports").join(format!("{split}.json"))
    }
    pub fn selector(&self) -> PathBuf {
        self.root.join("checkpoints").join("selector.json")
    }
    pub fn selector_log(&self) -> PathBuf {
        self.root.join("checkpoints").join("selector_log.json")
    }
    pub fn reader(&self) -> PathBuf {
        self.root.join("checkpoints").join("reader.json")
    }
    pub fn reader_log(&self) -> PathBuf {
        self.root.join("checkpoints").join("reader_log.json")
    }
    pub fn heatmap(&self, qid: &str) -> PathBuf {
        self.root.join("heatmaps").join(format!("{qid}.csv"))
    }
    pub fn sweep(&self) -> PathBuf {
        self.root.join("sweep").join("sigma_sweep.json")
    }
    /// Splits for which `artifact` exists, in train/dev/test order.
    pub fn present(&self, artifact: impl Fn(&Self, &str) -> PathBuf) -> Vec<&'static str> {
        SPLITS.into_iter().filter(|s| artifact(self, s).is_file()).collect()
    }
}

/// Passage-filter output for one question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilteredRecord {
    pub qid: String,
    pub table_id: String,
    pub cells: Vec<ExpandedCell>,
}

/// Selector output for one question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub qid: String,
    pub table_id: String,
    pub topk: Vec<RankedCell>,
    pub row_probs: Vec<f64>,
    pub col_probs: Vec<f64>,
    pub ranking: Vec<CellCoord>,
}

/// Optional bridge choice supplied from outside the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeOverride {
    pub qid: String,
    pub cell: CellCoord,
    pub passage_id: String,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub force: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub stage: String,
    pub skipped: bool,
    pub outputs: Vec<PathBuf>,
}

fn missing(stage: &str, what: &Path) -> Error {
    Error::MissingPrerequisite {
        stage: stage.to_string(),
        message: format!("{} not found; run `{stage}` first", what.display()),
    }
}

fn require(path: PathBuf, producer: &str) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(missing(producer, &path))
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    Ok(())
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Parse {
        file: path.display().to_string(),
        record: "document".into(),
        message: e.to_string(),
    })
}

fn write_records<T: Serialize>(records: &[T], path: &Path) -> Result<()> {
    ensure_parent(path)?;
    write_jsonl(records, path)
}

/// Runs `body` unless the stage's manifest says its outputs are current.
fn guarded(
    name: &str,
    cfg: &PipelineConfig,
    keys: &[&str],
    extra: &str,
    inputs: Vec<PathBuf>,
    opts: &RunOptions,
    body: impl FnOnce() -> Result<Vec<PathBuf>>,
) -> Result<StageOutcome> {
    let mut config = cfg.values(keys);
    let mut hash_src = cfg.hash_keys(keys);
    if !extra.is_empty() {
        config.insert("args".into(), extra.to_string());
        hash_src.push_str(extra);
    }
    let config_hash = {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(hash_src.as_bytes()))
    };
    let mpath = Manifest::path(&cfg.work_dir, name);
    if !opts.force {
        if let Some(m) = Manifest::load(&mpath) {
            if m.is_current(&config_hash, &inputs) {
                log::info!("{name}: up to date, skipping (use --force to rerun)");
                return Ok(StageOutcome {
                    stage: name.to_string(),
                    skipped: true,
                    outputs: m.outputs.keys().map(PathBuf::from).collect(),
                });
            }
        }
    }
    log::info!("{name}: running");
    let outputs = body()?;
    Manifest::build(name, config_hash, config, cfg.seed, &inputs, &outputs)?.save(&mpath)?;
    Ok(StageOutcome {
        stage: name.to_string(),
        skipped: false,
        outputs,
    })
}

fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    if workers == 0 {
        return f();
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot build worker pool: {e}")))?
        .install(f)
}

pub fn run_stage(stage: Stage, cfg: &PipelineConfig, opts: &RunOptions) -> Result<StageOutcome> {
    cfg.validate()?;
    with_workers(cfg.workers, || match stage {
        Stage::Ingest => ingest(cfg, opts),
        Stage::BuildAlignmentData => build_alignment_data(cfg, opts),
        Stage::FilterPassages => filter_passages(cfg, opts),
        Stage::TrainSelector => train_selector_stage(cfg, opts),
        Stage::SelectCells => select_cells(cfg, opts),
        Stage::TrainReader => train_reader_stage(cfg, opts),
        Stage::Answer => answer(cfg, opts),
        Stage::Evaluate => evaluate_stage(cfg, opts),
    })
}

/// Every stage in order.
pub fn run_all(cfg: &PipelineConfig, opts: &RunOptions) -> Result<Vec<StageOutcome>> {
    Stage::ALL.iter().map(|&s| run_stage(s, cfg, opts)).collect()
}

fn load_split(layout: &Layout, split: &str) -> Result<Corpus> {
    load_hybrid_corpus(
        layout.corpus(split),
        LoadOptions {
            require_answers: split != "test",
        },
    )
}

fn ingest(cfg: &PipelineConfig, opts: &RunOptions) -> Result<StageOutcome> {
    let layout = Layout::new(&cfg.work_dir);
    let sources: Vec<(&str, PathBuf)> = SPLITS
        .iter()
        .zip([&cfg.train, &cfg.dev, &cfg.test])
        .filter_map(|(s, p)| p.clone().map(|p| (*s, p)))
        .collect();
    if sources.is_empty() {
        return Err(Error::Validation("no corpus configured; set train, dev or test".into()));
    }
    for (_, p) in &sources {
        if !p.is_file() {
            return Err(Error::Validation(format!("corpus file {} does not exist", p.display())));
        }
    }
    let inputs = sources.iter().map(|(_, p)| p.clone()).collect();
    guarded("ingest", cfg, Stage::Ingest.config_keys(), "", inputs, opts, || {
        let mut outputs = Vec::new();
        for split in SPLITS {
            let out = layout.corpus(split);
            let Some((_, src)) = sources.iter().find(|(s, _)| *s == split) else {
                if out.exists() {
                    std::fs::remove_file(&out).map_err(|e| Error::io(&out, e))?;
                }
                continue;
            };
            let require_answers = split != "test";
            let corpus = match cfg.corpus_format {
                CorpusFormat::Hybrid => load_hybrid_corpus(src, LoadOptions { require_answers })?,
                CorpusFormat::Wtq => load_wtq_corpus(src)?,
            };
            corpus.validate(require_answers)?;
            log::info!(
                "ingest {split}: {} tables, {} passages, {} questions",
                corpus.tables.len(),
                corpus.passages.len(),
                corpus.examples.len()
            );
            ensure_parent(&out)?;
            write_corpus(&corpus, &out)?;
            outputs.push(out);
        }
        Ok(outputs)
    })
}

/// Alignment labels for every example, sorted by question id.
pub fn alignment_labels_for(corpus: &Corpus, overrides: &HashMap<String, BridgeOverride>) -> Result<Vec<AlignmentLabels>> {
    let bridges: HashMap<&str, Vec<BridgeCandidate>> = corpus
        .tables
        .iter()
        .map(|t| (t.table_id.as_str(), find_bridge_cells(t, &corpus.passages)))
        .collect();
    let mut out = corpus
        .examples
        .iter()
        .map(|ex| {
            let table = corpus.table_for(ex)?;
            let chosen = overrides.get(&ex.question_id).map(|o| BridgeCandidate {
                cell: o.cell,
                passage_id: o.passage_id.clone(),
                match_kind: BridgeMatch::TitleExact,
            });
            let bridge = match &chosen {
                Some(b) => Some(b),
                None => gold_bridge(ex, &bridges[ex.table_id.as_str()]),
            };
            Ok(make_alignment_labels(ex, table, bridge))
        })
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| a.question_id.cmp(&b.question_id));
    Ok(out)
}

fn build_alignment_data(cfg: &PipelineConfig, opts: &RunOptions) -> Result<StageOutcome> {
    let layout = Layout::new(&cfg.work_dir);
    let splits = layout.present(Layout::corpus);
    if splits.is_empty() {
        return Err(missing("ingest", &layout.corpus("train")));
    }
    let mut inputs: Vec<PathBuf> = splits.iter().map(|s| layout.corpus(s)).collect();
    if let Some(b) = &cfg.bridges {
        inputs.push(b.clone());
    }
    guarded("build-alignment-data", cfg, Stage::BuildAlignmentData.config_keys(), "", inputs, opts, || {
        let overrides: HashMap<String, BridgeOverride> = match &cfg.bridges {
            Some(p) => read_jsonl::<BridgeOverride>(p)?.into_iter().map(|o| (o.qid.clone(), o)).collect(),
            None => HashMap::new(),
        };
        let mut outputs = Vec::new();
        for split in &splits {
            let corpus = load_split(&layout, split)?;
            let labels = alignment_labels_for(&corpus, &overrides)?;
            let positives: usize = labels.iter().map(|l| l.positives().len()).sum();
            log::info!("alignment {split}: {} questions, {positives} positive columns", labels.len());
            let out = layout.alignment(split);
            write_records(&labels, &out)?;
            outputs.push(out);
        }
        Ok(outputs)
    })
}

fn make_encoder(cfg: &PipelineConfig) -> Result<Box<dyn TextEncoder>> {
    Ok(match cfg.encoder {
        EncoderKind::Hash => Box::new(HashEncoder::new(256, cfg.seed)),
        EncoderKind::External => {
            let path = cfg
                .external_embeddings
                .as_ref()
                .ok_or_else(|| Error::Validation("encoder = external needs external_embeddings".into()))?;
            Box::new(PrecomputedEncoder::load(path)?)
        }
    })
}

/// Filter output for every example, sorted by question id.
pub fn filter_corpus(corpus: &Corpus, config: &FilterConfig, encoder: &dyn TextEncoder) -> Result<Vec<FilteredRecord>> {
    let mut out = corpus
        .examples
        .par_iter()
        .map(|ex| {
            let table = corpus.table_for(ex)?;
            let cells = expand_table(table, &corpus.passages, &ex.question, config, encoder)?;
            Ok(FilteredRecord {
                qid: ex.question_id.clone(),
                table_id: ex.table_id.clone(),
                cells: cells.into_values().collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| a.qid.cmp(&b.qid));
    Ok(out)
}

fn filter_passages(cfg: &PipelineConfig, opts: &RunOptions) -> Result<StageOutcome> {
    let layout = Layout::new(&cfg.work_dir);
    let splits = layout.present(Layout::corpus);
    if splits.is_empty() {
        return Err(missing("ingest", &layout.corpus("train")));
    }
    let mut inputs: Vec<PathBuf> = splits.iter().map(|s| layout.corpus(s)).collect();
    if let (EncoderKind::External, Some(p)) = (cfg.encoder, &cfg.external_embeddings) {
        inputs.push(p.clone());
    }
    guarded("filter-passages", cfg, Stage::FilterPassages.config_keys(), "", inputs, opts, || {
        let encoder = make_encoder(cfg)?;
        let fc = FilterConfig {
            k: cfg.filter_k,
            token_budget: cfg.token_budget,
            similarity: cfg.similarity,
        };
        let mut outputs = Vec::new();
        for split in &splits {
            let corpus = load_split(&layout, split)?;
            let records = filter_corpus(&corpus, &fc, encoder.as_ref())?;
            let appended: usize = records.iter().flat_map(|r| &r.cells).map(|c| c.appended_sentences.len()).sum();
            log::info!("filter {split}: {} questions, {appended} sentences appended", records.len());
            let out = layout.filtered(split);
            write_records(&records, &out)?;
            outputs.push(out);
        }
        Ok(outputs)
    })
}

fn load_filtered(path: &Path) -> Result<HashMap<String, Arc<ExpandedCells>>> {
    Ok(read_jsonl::<FilteredRecord>(path)?
        .into_iter()
        .map(|r| (r.qid, Arc::new(r.cells.into_iter().map(|c| (c.cell, c)).collect())))
        .collect())
}

/// Selector examples for questions with a gold cell, in corpus order.
pub fn selector_examples(
    corpus: &Corpus,
    labels: &[AlignmentLabels],
    filtered: &HashMap<String, Arc<ExpandedCells>>,
) -> Result<Vec<SelectorExample>> {
    let labels: HashMap<&str, &AlignmentLabels> = labels.iter().map(|l| (l.question_id.as_str(), l)).collect();
    let tables: HashMap<&str, Arc<Table>> = corpus
        .tables
        .iter()
        .map(|t| (t.table_id.as_str(), Arc::new(t.clone())))
        .collect();
    let mut out = Vec::new();
    let mut skipped = 0usize;
    for ex in &corpus.examples {
        let Some(gold) = ex.gold_cell else {
            skipped += 1;
            continue;
        };
        let table = tables
            .get(ex.table_id.as_str())
            .ok_or_else(|| Error::Validation(format!("unknown table {}", ex.table_id)))?;
        let lab = labels
            .get(ex.question_id.as_str())
            .ok_or_else(|| Error::Validation(format!("no alignment labels for {}", ex.question_id)))?;
        out.push(SelectorExample {
            question_id: ex.question_id.clone(),
            question: ex.question.clone(),
            table: table.clone(),
            expanded: filtered.get(&ex.question_id).cloned(),
            gold,
            align_labels: lab.as_f64(),
        });
    }
    if skipped > 0 {
        log::warn!("{skipped} questions without a gold cell left out of selector data");
    }
    Ok(out)
}

fn split_examples(layout: &Layout, split: &str) -> Result<Vec<SelectorExample>> {
    let corpus = load_split(layout, split)?;
    let labels: Vec<AlignmentLabels> = read_jsonl(layout.alignment(split))?;
    let filtered = load_filtered(&layout.filtered(split))?;
    selector_examples(&corpus, &labels, &filtered)
}

/// BPE vocabulary from training questions and serialized rows.
pub fn selector_tokenizer(train: &[SelectorExample], vocab_size: usize) -> BpeTokenizer {
    let mut texts = Vec::new();
    for ex in train {
        texts.push(ex.question.clone());
        for i in 0..ex.table.n_rows() {
            texts.push(serialize_row(&ex.table, i, ex.expanded.as_deref()));
        }
    }
    BpeTokenizer::train(texts.iter().map(String::as_str), vocab_size)
}

/// Trains a fresh selector on `train`, keeping the best epoch on `dev`.
pub fn fit_selector(
    train: &[SelectorExample],
    dev: &[SelectorExample],
    config: &SelectorTrainConfig,
) -> Result<(SelectorModel, crate::selector::TrainingLog)> {
    let tiny = TinyConfig::default();
    let tok = selector_tokenizer(train, tiny.vocab_size);
    let mut model = SelectorModel::new(tiny, tok, config.seed);
    let log = train_selector(&mut model, train, dev, config)?;
    Ok((model, log))
}

fn selector_train_config(cfg: &PipelineConfig, sigma: f64) -> SelectorTrainConfig {
    SelectorTrainConfig {
        epochs: cfg.epochs,
        lr: cfg.lr,
        batch_size: cfg.batch,
        sigma,
        seed: cfg.seed,
    }
}

fn training_inputs(layout: &Layout, split: &str) -> Result<Vec<PathBuf>> {
    Ok(vec![
        require(layout.corpus(split), "ingest")?,
        require(layout.alignment(split), "build-alignment-data")?,
        require(layout.filtered(split), "filter-passages")?,
    ])
}

fn dev_inputs(layout: &Layout) -> Option<Vec<PathBuf>> {
    let v = vec![layout.corpus("dev"), layout.alignment("dev"), layout.filtered("dev")];
    v.iter().all(|p| p.is_file()).then_some(v)
}

fn train_selector_stage(cfg: &PipelineConfig, opts: &RunOptions) -> Result<StageOutcome> {
    let layout = Layout::new(&cfg.work_dir);
    let mut inputs = training_inputs(&layout, "train")?;
    let dev = dev_inputs(&layout);
    if let Some(d) = &dev {
        inputs.extend(d.iter().cloned());
    }
    guarded("train-selector", cfg, Stage::TrainSelector.config_keys(), "", inputs, opts, || {
        let train = split_examples(&layout, "train")?;
        let dev = if dev.is_some() { split_examples(&layout, "dev")? } else { Vec::new() };
        let (model, log) = fit_selector(&train, &dev, &selector_train_config(cfg, cfg.sigma))?;
        ensure_parent(&layout.selector())?;
        model.save(&layout.selector())?;
        write_json(&log, &layout.selector_log())?;
        Ok(vec![layout.selector(), layout.selector_log()])
    })
}

/// Scores every example's table. Records come back sorted by question id.
pub fn select_corpus(
    model: &SelectorModel,
    corpus: &Corpus,
    filtered: &HashMap<String, Arc<ExpandedCells>>,
    k: usize,
) -> Result<Vec<SelectionRecord>> {
    let mut out = corpus
        .examples
        .par_iter()
        .map(|ex| {
            let table = corpus.table_for(ex)?;
            let expanded = filtered.get(&ex.question_id).map(|e| e.as_ref());
            let sheet = score_table(&ex.question, table, expanded, model)?;
            let topk = topk_cells(&sheet, k.min(sheet.ranking.len()))?;
            Ok(SelectionRecord {
                qid: ex.question_id.clone(),
                table_id: ex.table_id.clone(),
                topk,
                ranking: sheet.ranking.iter().map(|c| (c.row, c.col)).collect(),
                row_probs: sheet.row_probs,
                col_probs: sheet.col_probs,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| a.qid.cmp(&b.qid));
    Ok(out)
}

fn select_cells(cfg: &PipelineConfig, opts: &RunOptions) -> Result<StageOutcome> {
    let layout = Layout::new(&cfg.work_dir);
    let ckpt = require(layout.selector(), "train-selector")?;
    let splits = layout.present(Layout::corpus);
    if splits.is_empty() {
        return Err(missing("ingest", &layout.corpus("train")));
    }
    let mut inputs = vec![ckpt];
    for s in &splits {
        inputs.push(layout.corpus(s));
        inputs.push(require(layout.filtered(s), "filter-passages")?);
    }
    guarded("select-cells", cfg, Stage::SelectCells.config_keys(), "", inputs, opts, || {
        let model = SelectorModel::load(&layout.selector())?;
        let mut outputs = Vec::new();
        for split in &splits {
            let corpus = load_split(&layout, split)?;
            let filtered = load_filtered(&layout.filtered(split))?;
            let records = select_corpus(&model, &corpus, &filtered, cfg.k)?;
            log::info!("select-cells {split}: {} questions", records.len());
            let out = layout.selections(split);
            write_records(&records, &out)?;
            outputs.push(out);
        }
        Ok(outputs)
    })
}

/// Reader training instances from the selector's top-k lists, with
/// ambiguous positives dropped.
pub fn reader_instances(
    corpus: &Corpus,
    selections: &[SelectionRecord],
    filtered: &HashMap<String, Arc<ExpandedCells>>,
    k: usize,
) -> Result<Vec<ReaderInstance>> {
    let examples: HashMap<&str, _> = corpus.examples.iter().map(|e| (e.question_id.as_str(), e)).collect();
    let mut out = Vec::new();
    for sel in selections {
        let Some(ex) = examples.get(sel.qid.as_str()) else {
            continue;
        };
        let table = corpus.table_for(ex)?;
        let topk = &sel.topk[..k.min(sel.topk.len())];
        out.extend(build_reader_instances(
            &ex.question_id,
            &ex.question,
            &ex.answer_text,
            topk,
            table,
            filtered.get(&ex.question_id).map(|e| e.as_ref()),
        )?);
    }
    Ok(clean_instance_filter(out, |qid| {
        examples.get(qid).map(|e| e.answer_text.clone()).unwrap_or_default()
    }))
}

/// BPE vocabulary from reader questions and contexts.
pub fn reader_tokenizer(instances: &[ReaderInstance], vocab_size: usize) -> BpeTokenizer {
    let texts = instances.iter().flat_map(|i| [i.question.as_str(), i.context.as_str()]);
    BpeTokenizer::train(texts, vocab_size)
}

fn train_reader_stage(cfg: &PipelineConfig, opts: &RunOptions) -> Result<StageOutcome> {
    let layout = Layout::new(&cfg.work_dir);
    let inputs = vec![
        require(layout.corpus("train"), "ingest")?,
        require(layout.filtered("train"), "filter-passages")?,
        require(layout.selections("train"), "select-cells")?,
    ];
    guarded("train-reader", cfg, Stage::TrainReader.config_keys(), "", inputs, opts, || {
        let corpus = load_split(&layout, "train")?;
        let filtered = load_filtered(&layout.filtered("train"))?;
        let selections: Vec<SelectionRecord> = read_jsonl(layout.selections("train"))?;
        let instances = reader_instances(&corpus, &selections, &filtered, cfg.k)?;
        let positives = instances.iter().filter(|i| i.is_positive).count();
        log::info!("train-reader: {} instances, {positives} positive", instances.len());
        let tiny = TinyConfig::default();
        let tok = reader_tokenizer(&instances, tiny.vocab_size);
        let mut reader = SpanReader::new(tiny, tok, cfg.seed);
        let rc = ReaderTrainConfig {
            epochs: cfg.epochs,
            lr: cfg.lr,
            batch_size: cfg.batch,
            seed: cfg.seed,
        };
        let log = train_reader(&mut reader, &instances, &rc)?;
        ensure_parent(&layout.reader())?;
        reader.save(&layout.reader())?;
        write_json(&log, &layout.reader_log())?;
        Ok(vec![layout.reader(), layout.reader_log()])
    })
}

fn uses_reader(cfg: &PipelineConfig, corpus: &Corpus) -> bool {
    match cfg.answer_mode {
        AnswerMode::Cell => false,
        AnswerMode::Extractive => true,
        AnswerMode::Auto => !corpus.passages.is_empty(),
    }
}

/// Predictions for every selection record, sorted by question id.
pub fn answer_corpus(
    corpus: &Corpus,
    selections: &[SelectionRecord],
    filtered: &HashMap<String, Arc<ExpandedCells>>,
    reader: Option<&SpanReader>,
    config: &AnswerConfig,
) -> Result<Vec<PredictionRecord>> {
    let examples: HashMap<&str, _> = corpus.examples.iter().map(|e| (e.question_id.as_str(), e)).collect();
    let mut out = selections
        .par_iter()
        .map(|sel| {
            let ex = examples
                .get(sel.qid.as_str())
                .ok_or_else(|| Error::Validation(format!("selection for unknown question {}", sel.qid)))?;
            let table = corpus.table_for(ex)?;
            let sheet = combine_scores(&sel.row_probs, &sel.col_probs)?;
            answer_question(
                &ex.question_id,
                &ex.question,
                &sheet,
                table,
                filtered.get(&ex.question_id).map(|e| e.as_ref()),
                reader,
                config,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| a.qid.cmp(&b.qid));
    Ok(out)
}

fn answer(cfg: &PipelineConfig, opts: &RunOptions) -> Result<StageOutcome> {
    let layout = Layout::new(&cfg.work_dir);
    let splits = layout.present(Layout::selections);
    if splits.is_empty() {
        return Err(missing("select-cells", &layout.selections("dev")));
    }
    let mut inputs = Vec::new();
    let mut need_reader = false;
    for s in &splits {
        inputs.push(require(layout.corpus(s), "ingest")?);
        inputs.push(require(layout.filtered(s), "filter-passages")?);
        inputs.push(layout.selections(s));
        need_reader |= uses_reader(cfg, &load_split(&layout, s)?);
    }
    if need_reader {
        inputs.push(require(layout.reader(), "train-reader")?);
    }
    guarded("answer", cfg, Stage::Answer.config_keys(), "", inputs, opts, || {
        let reader = if need_reader { Some(SpanReader::load(&layout.reader())?) } else { None };
        let ac = AnswerConfig {
            k: cfg.k,
            mu: cfg.mu,
            cell_fallback: cfg.cell_fallback,
        };
        let mut outputs = Vec::new();
        for split in &splits {
            let corpus = load_split(&layout, split)?;
            let filtered = load_filtered(&layout.filtered(split))?;
            let selections: Vec<SelectionRecord> = read_jsonl(layout.selections(split))?;
            let r = if uses_reader(cfg, &corpus) { reader.as_ref() } else { None };
            let preds = answer_corpus(&corpus, &selections, &filtered, r, &ac)?;
            let out = layout.predictions(split);
            ensure_parent(&out)?;
            write_predictions(&preds, &out)?;
            outputs.push(out);
        }
        Ok(outputs)
    })
}

/// Scores predictions (and, when given, selector rankings) against the
/// corpus. Questions missing from `predictions` count as unanswered.
pub fn evaluate_split(
    corpus: &Corpus,
    predictions: &[PredictionRecord],
    selections: Option<&[SelectionRecord]>,
    k: usize,
) -> EvalReport {
    let preds: HashMap<&str, &PredictionRecord> = predictions.iter().map(|p| (p.qid.as_str(), p)).collect();
    let sels: HashMap<&str, &SelectionRecord> = selections
        .unwrap_or(&[])
        .iter()
        .map(|s| (s.qid.as_str(), s))
        .collect();
    let mut examples: Vec<_> = corpus.examples.iter().collect();
    examples.sort_by(|a, b| a.question_id.cmp(&b.question_id));
    let items: Vec<EvalItem<'_>> = examples
        .into_iter()
        .map(|ex| {
            let p = preds.get(ex.question_id.as_str());
            EvalItem {
                example: ex,
                answer: p.map(|p| p.answer.as_str()),
                predicted_cell: p.map(|p| p.cell),
                ranking: sels.get(ex.question_id.as_str()).map(|s| s.ranking.as_slice()),
            }
        })
        .collect();
    evaluate(&items, k)
}

fn evaluate_stage(cfg: &PipelineConfig, opts: &RunOptions) -> Result<StageOutcome> {
    let layout = Layout::new(&cfg.work_dir);
    let splits = layout.present(Layout::predictions);
    if splits.is_empty() {
        return Err(missing("answer", &layout.predictions("dev")));
    }
    let mut inputs = Vec::new();
    for s in &splits {
        inputs.push(require(layout.corpus(s), "ingest")?);
        inputs.push(layout.predictions(s));
        if layout.selections(s).is_file() {
            inputs.push(layout.selections(s));
        }
    }
    guarded("evaluate", cfg, Stage::Evaluate.config_keys(), "", inputs, opts, || {
        let mut outputs = Vec::new();
        for split in &splits {
            let corpus = load_split(&layout, split)?;
            let preds = read_predictions(layout.predictions(split))?;
            let sels: Option<Vec<SelectionRecord>> = if layout.selections(split).is_file() {
                Some(read_jsonl(layout.selections(split))?)
            } else {
                None
            };
            let report = evaluate_split(&corpus, &preds, sels.as_deref(), cfg.k);
            log::info!("evaluate {split}: EM {:.3} F1 {:.3}", report.em, report.f1);
            let out = layout.report(split);
            write_json(&report, &out)?;
            outputs.push(out);
        }
        Ok(outputs)
    })
}

/// Reads the report written by `evaluate` for `split`.
pub fn load_report(cfg: &PipelineConfig, split: &str) -> Result<EvalReport> {
    let path = Layout::new(&cfg.work_dir).report(split);
    let path = require(path, "evaluate")?;
    read_json(&path)
}

/// Compares two prediction files on the same split of the work directory.
pub fn ablation(
    cfg: &PipelineConfig,
    split: &str,
    with: (&Path, Option<&Path>),
    without: (&Path, Option<&Path>),
) -> Result<AblationTable> {
    let layout = Layout::new(&cfg.work_dir);
    require(layout.corpus(split), "ingest")?;
    let corpus = load_split(&layout, split)?;
    let report = |(p, s): (&Path, Option<&Path>)| -> Result<EvalReport> {
        let preds = read_predictions(p)?;
        let sels: Option<Vec<SelectionRecord>> = s.map(read_jsonl).transpose()?;
        Ok(evaluate_split(&corpus, &preds, sels.as_deref(), cfg.k))
    };
    Ok(ablation_compare(&report(with)?, &report(without)?))
}

/// Token-to-header relevance matrix for one question, as CSV.
pub fn heatmap(cfg: &PipelineConfig, qid: &str, softmax: bool, out: Option<&Path>, opts: &RunOptions) -> Result<StageOutcome> {
    let layout = Layout::new(&cfg.work_dir);
    let ckpt = require(layout.selector(), "train-selector")?;
    let splits = layout.present(Layout::corpus);
    let mut found = None;
    for s in &splits {
        let corpus = load_split(&layout, s)?;
        if let Some(ex) = corpus.examples.iter().find(|e| e.question_id == qid) {
            let headers = corpus.table_for(ex)?.headers.clone();
            found = Some((layout.corpus(s), ex.question.clone(), headers));
            break;
        }
    }
    let Some((corpus_path, question, headers)) = found else {
        if splits.is_empty() {
            return Err(missing("ingest", &layout.corpus("train")));
        }
        return Err(Error::InvalidArgument(format!("question {qid} not found in any split")));
    };
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| layout.heatmap(qid));
    let extra = format!("qid={qid};softmax={softmax};out={}", out.display());
    guarded("heatmap", cfg, &[], &extra, vec![ckpt, corpus_path], opts, || {
        let model = SelectorModel::load(&layout.selector())?;
        let map = relevance_heatmap(&question, &headers, &model.encoder(), softmax);
        ensure_parent(&out)?;
        write_atomic(&out, map.to_csv().as_bytes())?;
        Ok(vec![out.clone()])
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub sigma: f64,
    pub dev_hits_at_1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub runs: Vec<SweepRun>,
    pub best_sigma: f64,
    pub best_hits_at_1: f64,
}

/// `0.0, 0.1, ..., 1.0`.
pub fn default_sigma_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

/// Evaluates every grid value; the best dev Hits@1 wins, the lower sigma
/// on ties.
pub fn sweep_sigma(grid: &[f64], mut eval: impl FnMut(f64) -> Result<f64>) -> Result<SweepResult> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("sigma grid is empty".into()));
    }
    for &s in grid {
        crate::selector::check_sigma(s)?;
    }
    let mut runs = Vec::with_capacity(grid.len());
    for &sigma in grid {
        let h = eval(sigma)?;
        log::info!("sweep sigma {sigma}: dev Hits@1 {h:.4}");
        runs.push(SweepRun {
            sigma,
            dev_hits_at_1: h,
        });
    }
    let best = runs
        .iter()
        .max_by(|a, b| {
            a.dev_hits_at_1
                .total_cmp(&b.dev_hits_at_1)
                .then(b.sigma.total_cmp(&a.sigma))
        })
        .expect("non-empty grid");
    Ok(SweepResult {
        best_sigma: best.sigma,
        best_hits_at_1: best.dev_hits_at_1,
        runs,
    })
}

/// Trains one selector per sigma and reports dev Hits@1 of each.
pub fn sweep_sigma_stage(cfg: &PipelineConfig, grid: &[f64], opts: &RunOptions) -> Result<StageOutcome> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.work_dir);
    let mut inputs = training_inputs(&layout, "train")?;
    inputs.extend(training_inputs(&layout, "dev")?);
    let extra = format!("grid={grid:?}");
    with_workers(cfg.workers, || {
        guarded("sweep-sigma", cfg, &["lr", "batch", "epochs", "seed"], &extra, inputs, opts, || {
            let train = split_examples(&layout, "train")?;
            let dev = split_examples(&layout, "dev")?;
            let result = sweep_sigma(grid, |sigma| {
                let (model, _) = fit_selector(&train, &dev, &selector_train_config(cfg, sigma))?;
                crate::selector::hits_at_1(&model, &dev)
            })?;
            log::info!("sweep: best sigma {} (dev Hits@1 {:.4})", result.best_sigma, result.best_hits_at_1);
            write_json(&result, &layout.sweep())?;
            Ok(vec![layout.sweep()])
        })
    })
}

/// Reads the sweep summary.
pub fn load_sweep(cfg: &PipelineConfig) -> Result<SweepResult> {
    read_json(&require(Layout::new(&cfg.work_dir).sweep(), "sweep-sigma")?)
}
