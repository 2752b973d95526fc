//! `sdsr`: generate toy corpora, train, stream and aggregate latency reports.

mod report;
mod run;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use sdsr::pipeline::ClockMode;
use sdsr::training::{gen_corpus, stage1_train, stage2_finetune, Corpus, LogRow};
use sdsr::{model::ModelBundle, RunConfig};

use crate::run::{KChoice, RunInput};

#[derive(Debug, Parser)]
#[command(name = "sdsr", version, about = "Simultaneous speech reconstruction on synthetic toys")]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed override; falls back to SDSR_SEED, then to the config's seed.
    #[arg(long, global = true, env = "SDSR_SEED")]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a paired normal/dysarthric corpus directory.
    GenCorpus {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one training stage and write a checkpoint plus a per-step log CSV.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        /// 1 trains everything on normal speech, 2 fine-tunes the recognizer.
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// Starting checkpoint; required for stage 2.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output checkpoint; the log goes next to it as `<stem>.log.csv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Stream one utterance and write codes and a latency report to a run dir.
    Stream {
        /// Trained checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Corpus holding the utterance named by --utt.
        #[arg(long, requires = "utt")]
        corpus: Option<PathBuf>,
        /// Utterance id within --corpus.
        #[arg(long, requires = "corpus", conflicts_with = "input")]
        utt: Option<String>,
        /// Utterance record file, as written under a corpus's utts/ dir.
        #[arg(long, required_unless_present = "utt")]
        input: Option<PathBuf>,
        /// Wait-k lag in frames, or `sentence` to emit only after the input ends.
        #[arg(long, default_value = "10")]
        k: KChoice,
        /// Codes per vocoder chunk; defaults to the config's.
        #[arg(long)]
        chunk_size: Option<usize>,
        /// Clock charging stage work: wall or logical; defaults to the config's.
        #[arg(long)]
        clock: Option<ClockMode>,
        /// Run directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate stream run dirs into a CSV and a per-k summary table.
    Report {
        /// Run directories written by `stream`.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Aggregated CSV; stdout gets the summary either way.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

/// 2 for config and contract errors, 1 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    let usage = err.chain().any(|cause| {
        matches!(
            cause.downcast_ref::<sdsr::Error>(),
            Some(sdsr::Error::Config(_) | sdsr::Error::Contract(_))
        )
    });
    if usage {
        2
    } else {
        1
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            RunConfig::load(path).with_context(|| format!("loading config {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.validate()?;
    }
    Ok(cfg)
}

fn dispatch(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::GenCorpus { out } => gen_corpus_cmd(&cfg, &out),
        Command::Train {
            corpus,
            stage,
            checkpoint,
            out,
        } => train_cmd(&cfg, &corpus, stage, checkpoint.as_deref(), &out),
        Command::Stream {
            checkpoint,
            corpus,
            utt,
            input,
            k,
            chunk_size,
            clock,
            out,
        } => {
            let input = match (corpus, utt, input) {
                (Some(corpus), Some(id), _) => RunInput::Corpus { dir: corpus, id },
                (_, _, Some(path)) => RunInput::File(path),
                _ => bail!(sdsr::Error::Config("stream needs --corpus with --utt, or --input".into())),
            };
            let mut pipe = cfg.pipeline.clone();
            pipe.chunk_size = chunk_size.unwrap_or(pipe.chunk_size);
            pipe.clock = clock.unwrap_or(pipe.clock);
            pipe.validate()?;
            run::stream_cmd(&cfg, &pipe, &checkpoint, &input, k, &out)
        }
        Command::Report { runs, out } => report::report_cmd(&runs, out.as_deref()),
    }
}

fn gen_corpus_cmd(cfg: &RunConfig, out: &Path) -> Result<()> {
    let corpus = gen_corpus(&cfg.corpus, &cfg.quantizer, cfg.pipeline.frame_duration, cfg.seed)?;
    corpus
        .save(out)
        .with_context(|| format!("writing corpus to {}", out.display()))?;
    println!("wrote {} utterances to {}", corpus.utterances.len(), out.display());
    Ok(())
}

/// Where `train` writes the log for checkpoint `out`.
fn log_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.log.csv"))
}

fn train_cmd(cfg: &RunConfig, corpus_dir: &Path, stage: u8, checkpoint: Option<&Path>, out: &Path) -> Result<()> {
    let corpus = Corpus::load(corpus_dir).with_context(|| format!("loading corpus {}", corpus_dir.display()))?;
    let mut bundle = match checkpoint {
        Some(path) => ModelBundle::load(&cfg.model, path).with_context(|| format!("loading {}", path.display()))?,
        None if stage == 2 => bail!(sdsr::Error::Config("stage 2 needs --checkpoint".into())),
        None => ModelBundle::init(
            &cfg.model,
            corpus.spec.feature_dim,
            corpus.spec.vocab,
            corpus.codebook.clone(),
            cfg.seed,
        )?,
    };
    let log = match stage {
        1 => stage1_train(&mut bundle, &corpus, &cfg.training, cfg.seed)?,
        _ => stage2_finetune(&mut bundle, &corpus, &cfg.training, cfg.seed)?,
    };
    bundle.save(out).with_context(|| format!("writing {}", out.display()))?;
    let log_file = log_path(out);
    write_log(&log_file, &log)?;
    if let (Some(first), Some(last)) = (log.first(), log.last()) {
        println!(
            "stage {stage}: {} steps, total loss {:.4} -> {:.4}; wrote {} and {}",
            log.len(),
            first.total,
            last.total,
            out.display(),
            log_file.display()
        );
    }
    Ok(())
}

fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    if rows.is_empty() {
        w.write_record(["step", "rnnt_loss", "ce_loss", "kd_loss", "total"])?;
    }
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
