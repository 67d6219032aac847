use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tabqa_core::pipeline::{
    ablation, default_sigma_grid, heatmap, load_report, load_sweep, run_stage, sweep_sigma_stage,
    write_synthetic_fixture, Layout, PipelineConfig, RunOptions, Stage, StageOutcome, SPLITS,
};
use tabqa_core::synth::SynthConfig;
use tabqa_core::{Error, Result};

/// Hybrid table and text question answering pipeline.
#[derive(Parser, Debug)]
#[command(name = "tabqa", version)]
struct Cli {
    /// key = value config file.
    #[arg(long, short, global = true, env = "TQA_CONFIG")]
    config: Option<PathBuf>,
    /// Override any config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[arg(long, global = true)]
    work_dir: Option<PathBuf>,
    /// Worker threads for per-question parallelism (0 = all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Rerun a stage even when its manifest is current.
    #[arg(long, global = true)]
    force: bool,
    /// Repeat for more log output.
    #[arg(long, short, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct TrainArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load, validate and store the configured corpus splits.
    Ingest,
    /// Derive per-column alignment labels.
    BuildAlignmentData {
        /// JSONL of {"qid","cell":[r,c],"passage_id"} bridge choices.
        #[arg(long)]
        bridges: Option<PathBuf>,
    },
    /// Append the most question-relevant passage sentences to linked cells.
    FilterPassages {
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        budget: Option<usize>,
        /// hash or external
        #[arg(long)]
        encoder: Option<String>,
        /// JSON file of precomputed embeddings for the external encoder.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// cosine or dot
        #[arg(long)]
        similarity: Option<String>,
    },
    /// Train the row/column selector with the alignment loss.
    TrainSelector {
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        k: Option<usize>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Score every question's table and keep the top-k cells.
    SelectCells {
        #[arg(long)]
        k: Option<usize>,
    },
    /// Train the span reader on selected candidates.
    TrainReader {
        #[arg(long)]
        k: Option<usize>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Write final predictions.
    Answer {
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        mu: Option<f64>,
    },
    /// Score predictions; with --ablation compare two prediction files.
    Evaluate {
        #[arg(long, num_args = 2, value_names = ["WITH", "WITHOUT"])]
        ablation: Option<Vec<PathBuf>>,
        /// Selection files matching the two --ablation predictions.
        #[arg(long, num_args = 2, value_names = ["WITH", "WITHOUT"], requires = "ablation")]
        selections: Option<Vec<PathBuf>>,
        /// Split the ablation files were produced on.
        #[arg(long, default_value = "dev")]
        split: String,
    },
    /// Export a question-token by header-token relevance matrix as CSV.
    Heatmap {
        #[arg(long)]
        qid: String,
        /// Row-normalize with a softmax.
        #[arg(long)]
        softmax: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one selector per sigma and report the best by dev Hits@1.
    SweepSigma {
        /// Comma-separated sigma values; defaults to 0.0,0.1,...,1.0.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Write a synthetic corpus, its splits and a config file.
    GenerateSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        tables: usize,
        #[arg(long, default_value_t = 8)]
        questions_per_table: usize,
        #[arg(long, default_value_t = 4)]
        min_rows: usize,
        #[arg(long, default_value_t = 8)]
        max_rows: usize,
        #[arg(long, default_value_t = 3)]
        min_cols: usize,
        #[arg(long, default_value_t = 6)]
        max_cols: usize,
    },
    /// Run every stage from ingest to evaluate.
    RunAll,
}

fn overrides(cli: &Cli) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Validation(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    let mut push = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            out.push((k.to_string(), v));
        }
    };
    push("work_dir", cli.work_dir.as_ref().map(|p| p.display().to_string()));
    push("workers", cli.workers.map(|v| v.to_string()));
    push("seed", cli.seed.map(|v| v.to_string()));
    let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
    let train = |t: &TrainArgs, push: &mut dyn FnMut(&str, Option<String>)| {
        push("epochs", t.epochs.map(|v| v.to_string()));
        push("lr", t.lr.map(|v| v.to_string()));
        push("batch", t.batch.map(|v| v.to_string()));
    };
    match &cli.command {
        Command::BuildAlignmentData { bridges } => push("bridges", path(bridges)),
        Command::FilterPassages {
            k,
            budget,
            encoder,
            embeddings,
            similarity,
        } => {
            push("filter_k", k.map(|v| v.to_string()));
            push("token_budget", budget.map(|v| v.to_string()));
            push("encoder", encoder.clone());
            push("external_embeddings", path(embeddings));
            push("similarity", similarity.clone());
        }
        Command::TrainSelector { sigma, k, train: t } => {
            push("sigma", sigma.map(|v| v.to_string()));
            push("k", k.map(|v| v.to_string()));
            train(t, &mut push);
        }
        Command::SelectCells { k } => push("k", k.map(|v| v.to_string())),
        Command::TrainReader { k, train: t } => {
            push("k", k.map(|v| v.to_string()));
            train(t, &mut push);
        }
        Command::Answer { k, mu } => {
            push("k", k.map(|v| v.to_string()));
            push("mu", mu.map(|v| v.to_string()));
        }
        Command::SweepSigma { train: t, .. } => train(t, &mut push),
        _ => {}
    }
    Ok(out)
}

fn report_outcome(o: &StageOutcome) {
    let state = if o.skipped { "up to date" } else { "done" };
    println!("{}: {state}", o.stage);
    for p in &o.outputs {
        println!("  {}", p.display());
    }
}

fn print_reports(cfg: &PipelineConfig) -> Result<()> {
    let layout = Layout::new(&cfg.work_dir);
    for split in SPLITS {
        if layout.report(split).is_file() {
            println!("== {split} ==\n{}", load_report(cfg, split)?);
        }
    }
    Ok(())
}

fn stage(cfg: &PipelineConfig, s: Stage, opts: &RunOptions) -> Result<()> {
    report_outcome(&run_stage(s, cfg, opts)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let opts = RunOptions { force: cli.force };
    if let Command::GenerateSynthetic {
        out,
        tables,
        questions_per_table,
        min_rows,
        max_rows,
        min_cols,
        max_cols,
    } = &cli.command
    {
        let sc = SynthConfig {
            n_tables: *tables,
            rows: *min_rows..=*max_rows,
            cols: *min_cols..=*max_cols,
            questions_per_table: *questions_per_table,
            seed: cli.seed.unwrap_or(13),
        };
        let files = write_synthetic_fixture(out, &sc)?;
        println!("wrote {}", files.corpus.display());
        println!("wrote {}", files.labels.display());
        println!("config {}", files.config.display());
        return Ok(());
    }
    let cfg = PipelineConfig::load(cli.config.as_deref(), &overrides(&cli)?)?;
    log::debug!("effective config:\n{}", cfg.to_text());
    match &cli.command {
        Command::Ingest => stage(&cfg, Stage::Ingest, &opts),
        Command::BuildAlignmentData { .. } => stage(&cfg, Stage::BuildAlignmentData, &opts),
        Command::FilterPassages { .. } => stage(&cfg, Stage::FilterPassages, &opts),
        Command::TrainSelector { .. } => stage(&cfg, Stage::TrainSelector, &opts),
        Command::SelectCells { .. } => stage(&cfg, Stage::SelectCells, &opts),
        Command::TrainReader { .. } => stage(&cfg, Stage::TrainReader, &opts),
        Command::Answer { .. } => stage(&cfg, Stage::Answer, &opts),
        Command::Evaluate {
            ablation: Some(files),
            selections,
            split,
        } => {
            let sel = |i: usize| selections.as_ref().map(|s| s[i].as_path());
            let table = ablation(&cfg, split, (&files[0], sel(0)), (&files[1], sel(1)))?;
            println!("{table}");
            Ok(())
        }
        Command::Evaluate { .. } => {
            stage(&cfg, Stage::Evaluate, &opts)?;
            print_reports(&cfg)
        }
        Command::Heatmap { qid, softmax, out } => {
            report_outcome(&heatmap(&cfg, qid, *softmax, out.as_deref(), &opts)?);
            Ok(())
        }
        Command::SweepSigma { grid, .. } => {
            let grid = grid.clone().unwrap_or_else(default_sigma_grid);
            report_outcome(&sweep_sigma_stage(&cfg, &grid, &opts)?);
            let r = load_sweep(&cfg)?;
            for run in &r.runs {
                println!("sigma {:.2}  dev Hits@1 {:.4}", run.sigma, run.dev_hits_at_1);
            }
            println!("best sigma {} (dev Hits@1 {:.4})", r.best_sigma, r.best_hits_at_1);
            Ok(())
        }
        Command::RunAll => {
            for s in Stage::ALL {
                stage(&cfg, s, &opts)?;
            }
            print_reports(&cfg)
        }
        Command::GenerateSynthetic { .. } => unreachable!("handled above"),
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // usage errors are validation failures, not missing prerequisites
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    init_logging(cli.verbose);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
