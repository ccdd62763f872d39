use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use hvslu::corpus::Split;
use hvslu::slu::Preset;
use hvslu_cli::commands::{self, CORPUS_FILE, EXTRACTOR_FILE, MODEL_FILE};
use hvslu_cli::config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "hvslu", about = "Spoken concept recognition with dialog-history vectors")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Corpus file (`corpus.jsonl`) or the directory holding it.
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    /// Run directory for every output of the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides `seed` (and, for gen-corpus, `corpus_seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    preset: Option<Preset>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dialog corpus.
    GenCorpus,
    /// Train an h-vector extractor.
    TrainHvec {
        /// unsupervised | supervised-freq | supervised-all (overrides the config)
        #[arg(long = "type")]
        kind: Option<String>,
        /// concept_errors_dev.tsv of a baseline run (supervised-freq only)
        #[arg(long)]
        baseline_errors: Option<PathBuf>,
    },
    /// Train the signal-to-concept model for one phase.
    TrainSlu {
        #[arg(long)]
        phase: Option<String>,
        /// Extractor checkpoint or run directory; `zero` injects zeros.
        #[arg(long)]
        extractor: Option<PathBuf>,
        /// Checkpoint or run directory the phase starts from.
        #[arg(long)]
        source: Option<PathBuf>,
    },
    /// Decode a split with a trained model.
    Decode {
        /// Model checkpoint or run directory.
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        extractor: Option<PathBuf>,
    },
    /// Score a hypothesis file.
    Score {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long)]
        name: Option<String>,
    },
    /// Result table over scored run directories; the first is the baseline.
    Table {
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

fn in_dir(p: &Path, file: &str) -> PathBuf {
    if p.is_dir() {
        p.join(file)
    } else {
        p.to_path_buf()
    }
}

fn resolve(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(p) = common.preset {
        cfg.preset = p;
    }
    Ok(cfg)
}

fn out_dir(common: &Common, cfg: &ExperimentConfig) -> Result<PathBuf> {
    common
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| anyhow!("no output directory: pass --out or set out_dir"))
}

fn corpus_path(common: &Common) -> Result<PathBuf> {
    let p = common.corpus.as_ref().ok_or_else(|| anyhow!("--corpus is required"))?;
    Ok(in_dir(p, CORPUS_FILE))
}

/// `zero` (or no flag) means no extractor.
fn extractor_path(p: &Option<PathBuf>) -> Option<PathBuf> {
    p.as_ref().filter(|p| p.as_os_str() != "zero").map(|p| in_dir(p, EXTRACTOR_FILE))
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = resolve(&cli.common)?;
    let c = &cli.common;
    match cli.command {
        Command::GenCorpus => {
            if let Some(s) = c.seed {
                cfg.corpus_seed = s;
            }
            let out = out_dir(c, &cfg)?;
            let path = commands::cmd_gen_corpus(&cfg, &out)?;
            println!("{}", path.display());
        }
        Command::TrainHvec { kind, baseline_errors } => {
            if let Some(k) = kind {
                cfg.extractor = k.parse().map_err(|e: String| anyhow!(e))?;
            }
            cfg.validate()?;
            let out = out_dir(c, &cfg)?;
            let path = commands::cmd_train_hvec(&cfg, &corpus_path(c)?, &out, baseline_errors.as_deref())?;
            println!("{}", path.display());
        }
        Command::TrainSlu {
            phase,
            extractor,
            source,
        } => {
            if let Some(p) = phase {
                cfg.phase = commands::parse_phase(&p)?;
            }
            let out = out_dir(c, &cfg)?;
            let source = source.map(|p| in_dir(&p, MODEL_FILE));
            let path = commands::cmd_train_slu(
                &cfg,
                &corpus_path(c)?,
                &out,
                extractor_path(&extractor).as_deref(),
                source.as_deref(),
            )?;
            println!("{}", path.display());
        }
        Command::Decode {
            model,
            split,
            extractor,
        } => {
            let out = out_dir(c, &cfg)?;
            let path = commands::cmd_decode(
                &cfg,
                &in_dir(&model, MODEL_FILE),
                &corpus_path(c)?,
                split,
                extractor_path(&extractor).as_deref(),
                &out,
            )?;
            println!("{}", path.display());
        }
        Command::Score { hyp, name } => {
            let out = out_dir(c, &cfg)?;
            let name = match name {
                Some(n) => n,
                None => out
                    .file_name()
                    .map(|s| s.to_string_lossy().into_owned())
                    .context("cannot derive a system name; pass --name")?,
            };
            let report = commands::cmd_score(&corpus_path(c)?, &hyp, &name, &out)?;
            println!("{}", serde_json::to_string(&report.record)?);
        }
        Command::Table { split, runs } => {
            let table = commands::cmd_table(&runs, split)?;
            print!("{table}");
            if let Some(out) = &c.out {
                std::fs::create_dir_all(out)?;
                std::fs::write(out.join(format!("table_{split}.txt")), &table)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
