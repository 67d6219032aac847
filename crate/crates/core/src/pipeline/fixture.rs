use std::path::{Path, PathBuf};

use crate::dataset::{write_atomic, write_corpus, write_jsonl};
use crate::error::{Error, Result};
use crate::synth::{generate_corpus, SynthConfig};

/// Learning rate and batch size that train the tiny encoders in a few
/// epochs; written into the fixture's config file.
pub const FIXTURE_LR: f64 = 1e-3;
pub const FIXTURE_BATCH: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureFiles {
    pub corpus: PathBuf,
    pub labels: PathBuf,
    pub train: PathBuf,
    pub dev: PathBuf,
    pub test: PathBuf,
    pub config: PathBuf,
}

/// Generates a synthetic corpus under `dir` and splits it by table: the
/// last tenth of the tables (at least one) is test, the tenth before it
/// dev, the rest train. Also writes `pipeline.conf` pointing at the splits.
pub fn write_synthetic_fixture(dir: &Path, config: &SynthConfig) -> Result<FixtureFiles> {
    if config.n_tables < 3 {
        return Err(Error::InvalidArgument("a split fixture needs at least 3 tables".into()));
    }
    let synth = generate_corpus(config)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let n = config.n_tables;
    let held = (n / 10).max(1);
    let dev_start = n - 2 * held;
    let test_start = n - held;
    let files = FixtureFiles {
        corpus: dir.join("corpus.json"),
        labels: dir.join("alignment_labels.jsonl"),
        train: dir.join("train.json"),
        dev: dir.join("dev.json"),
        test: dir.join("test.json"),
        config: dir.join("pipeline.conf"),
    };
    write_corpus(&synth.corpus, &files.corpus)?;
    write_jsonl(&synth.labels, &files.labels)?;
    write_corpus(&synth.corpus.subset_tables(|i, _| i < dev_start), &files.train)?;
    write_corpus(&synth.corpus.subset_tables(|i, _| (dev_start..test_start).contains(&i)), &files.dev)?;
    write_corpus(&synth.corpus.subset_tables(|i, _| i >= test_start), &files.test)?;
    let conf = format!(
        "# synthetic fixture ({n} tables, seed {seed})\n\
         train = train.json\n\
         dev = dev.json\n\
         test = test.json\n\
         work_dir = work\n\
         seed = {seed}\n\
         lr = {FIXTURE_LR}\n\
         batch = {FIXTURE_BATCH}\n",
        seed = config.seed
    );
    write_atomic(&files.config, conf.as_bytes())?;
    Ok(files)
}
