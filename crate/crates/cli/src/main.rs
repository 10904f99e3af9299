mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "gse", version, about = "Guided speaker embedding experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct Common {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    /// Root seed; falls back to the config, then GSE_SEED.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 gives bit-identical reruns.
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a multi-speaker corpus.
    SynthData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Build one-vs-many trials, or conversations with `--conversations`.
    Mix {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        conversations: bool,
    },
    /// Train a baseline or guided extractor.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Embed one speaker of a recording.
    Extract {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        wav: PathBuf,
        /// Activity sidecar; required for guided checkpoints.
        #[arg(long)]
        activity: Option<PathBuf>,
        /// Speaker id in the activity file.
        #[arg(long)]
        target: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score trials and report EER and minDCF.
    Verify {
        #[arg(long)]
        trials: PathBuf,
        /// Existing score file, or the output when a checkpoint is given.
        #[arg(long)]
        scores: PathBuf,
        #[arg(long, requires_all = ["corpus", "manifest"])]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Cluster per-window speaker tracks into a diarization.
    Diarize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        wav: PathBuf,
        /// Local results: RTTM with a trailing window-index column.
        #[arg(long)]
        local: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        file_id: Option<String>,
    },
    /// DER and JER of a hypothesis RTTM against a reference.
    Score {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        hyp: PathBuf,
        /// Per-file `file,der,jer` table.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Mixture statistics and attention strips as CSV and SVG.
    Report {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Guided checkpoint for attention strips.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        strips: usize,
    },
}

/// Failure classes, mapped to exit codes 1, 2 and 3.
enum Failure {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl From<gse_core::Error> for Failure {
    fn from(e: gse_core::Error) -> Self {
        if e.is_numeric() {
            Failure::Numeric(e.to_string())
        } else if matches!(e, gse_core::Error::Config(_)) {
            Failure::Usage(e.to_string())
        } else {
            Failure::Data(e.to_string())
        }
    }
}

fn run(cli: Cli) -> Result<String, Failure> {
    let mut cfg = RunConfig::load(cli.common.config.as_deref(), &cli.common.sets)?;
    cfg.resolve_seed(cli.common.seed)?;
    if let Some(w) = cli.common.workers {
        cfg.train.workers = w;
    }
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.train.workers)
        .build()
        .map_err(|e| Failure::Usage(format!("thread pool: {e}")))?;
    pool.install(|| {
        Ok(match cli.cmd {
            Command::SynthData { out } => commands::synth_data(&cfg, &out)?,
            Command::Mix {
                corpus,
                out,
                conversations,
            } => {
                if conversations {
                    commands::mix_conversations(&cfg, &corpus, &out)?
                } else {
                    commands::mix_trials(&cfg, &corpus, &out)?
                }
            }
            Command::Train { corpus, out } => commands::train(&cfg, &corpus, &out)?,
            Command::Extract {
                checkpoint,
                wav,
                activity,
                target,
                out,
            } => commands::extract(
                &checkpoint,
                &wav,
                activity.as_deref(),
                target.as_deref(),
                &out,
            )?,
            Command::Verify {
                trials,
                scores,
                checkpoint,
                corpus,
                manifest,
            } => match (checkpoint, corpus, manifest) {
                (Some(c), Some(corpus), Some(m)) => {
                    commands::verify_model(&cfg, &trials, &scores, &c, &corpus, &m)?
                }
                _ => commands::verify_scores(&trials, &scores)?,
            },
            Command::Diarize {
                checkpoint,
                wav,
                local,
                out,
                file_id,
            } => commands::diarize(&cfg, &checkpoint, &wav, &local, &out, file_id)?,
            Command::Score {
                reference,
                hyp,
                csv,
            } => commands::score(&reference, &hyp, csv.as_deref())?,
            Command::Report {
                manifest,
                out,
                checkpoint,
                strips,
            } => report::report(&manifest, &out, checkpoint.as_deref(), strips)?,
        })
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Numeric(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}
