//! `burst`: generate a synthetic corpus, train and evaluate variants, run the
//! ablation and the gradient self-test.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use burst_core::data::Split;
use burst_core::model::Profile;
use burst_core::Error;
use clap::{Args, Parser, Subcommand};
use commands::{ConfigFlags, EvaluateArgs};

#[derive(Parser)]
#[command(name = "burst", version, about = "Personalised vocal-burst emotion recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration; unset keys take the profile's defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `desk` (small, CPU-friendly) or `paper` (full size).
    #[arg(long)]
    profile: Option<Profile>,
    /// Seeds both the corpus generator and training.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn flags(&self) -> ConfigFlags {
        ConfigFlags {
            config: self.config.clone(),
            profile: self.profile,
            seed: self.seed,
            bootstrap_n: None,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus (manifest + WAV files).
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train one variant and keep the best checkpoint by monitored Ĉ.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        /// 1-7, or a '+'-joined list of components, e.g. `enrolment+enrolment_speaker`.
        #[arg(long)]
        variant: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score a checkpoint on one split with a bootstrap CI.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        bootstrap_n: Option<usize>,
        /// Report JSON of a baseline run; adds the relative gain.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train and evaluate all seven variants with shared seeds.
    Ablate {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Check every differentiable op and the composed loss against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Corrupt the backward rule of one op; the suite must then fail.
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Spec(_) => 2,
        Error::Numeric { .. } | Error::NumericInput { .. } | Error::Diverged { .. } => 3,
        Error::Label(_) | Error::Data(_) | Error::InputTooShort { .. } | Error::Format { .. } | Error::Io { .. } => 4,
        Error::Dimension { .. } | Error::Contract(_) => 1,
    }
}

fn run(cli: Cli) -> burst_core::Result<ExitCode> {
    match cli.command {
        Command::Generate { out, cfg } => commands::generate(&cfg.flags(), &out)?,
        Command::Train {
            corpus,
            variant,
            out,
            cfg,
        } => commands::train(&cfg.flags(), &corpus, &variant, &out)?,
        Command::Evaluate {
            checkpoint,
            corpus,
            split,
            bootstrap_n,
            baseline,
            out,
            cfg,
        } => {
            let flags = ConfigFlags {
                bootstrap_n,
                ..cfg.flags()
            };
            let args = EvaluateArgs {
                checkpoint: &checkpoint,
                corpus: &corpus,
                split,
                baseline: baseline.as_deref(),
                out: out.as_deref(),
            };
            commands::evaluate(&flags, &args)?
        }
        Command::Ablate { corpus, out, cfg } => {
            if let Some(e) = commands::ablate(&cfg.flags(), &corpus, &out)? {
                eprintln!("error: at least one variant failed, first: {e}");
                return Ok(ExitCode::from(exit_code(&e)));
            }
        }
        Command::Gradcheck {
            seeds,
            out,
            inject_fault,
        } => {
            if !commands::gradcheck(seeds, inject_fault.as_deref(), out.as_deref())? {
                return Ok(ExitCode::from(3));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
