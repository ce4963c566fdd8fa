//! `seabed`: command-line front end for relief synthesis, sonar emulation,
//! estimation, training and evaluation.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use seabed_core::pipeline::dataset::Profile;
use seabed_core::pipeline::train::FinetuneMode;

#[derive(Parser, Debug)]
#[command(name = "seabed", version, about = "Seabed relief synthesis, sonar emulation and relief estimation")]
pub struct Cli {
    #[command(flatten)]
    pub shared: Shared,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Shared {
    /// Seed for every random stream the command uses.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output file or directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// JSON file whose fields override the command's defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Print the effective configuration as JSON and exit.
    #[arg(long, global = true)]
    pub dump_config: bool,

    /// Run every loop on the calling thread.
    #[arg(long, global = true)]
    pub sequential: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Synthesize a relief map from texture parameters.
    Synth,
    /// Render a sonar intensity image from a relief map.
    Render {
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Generate a tiled, folded training corpus.
    Dataset {
        #[arg(long, value_parser = parse_profile, default_value = "desk")]
        profile: Profile,
    },
    /// Estimate relief from an intensity image with the GMRF estimator.
    Gmrf {
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Train a model from scratch.
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Continue training a checkpoint on another dataset.
    Finetune {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_parser = parse_finetune, default_value = "last-layer")]
        mode: FinetuneMode,
    },
    /// Predict relief for an intensity image.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// L1 of a network or the GMRF estimator on one dataset split.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        /// Network checkpoint; without it the GMRF estimator is scored.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// `val`, `test` or a training fold `0`..`4`.
        #[arg(long, default_value = "val")]
        fold: String,
    },
    /// Per-aspect-difference L1 between predictions for two looks.
    PairEval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset whose statistics normalize outputs when no checkpoint is given.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Also score the GMRF estimator.
        #[arg(long)]
        gmrf: bool,
    },
    /// Difference map `b - a` of two relief maps.
    Diff {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Per-layer and total parameter counts of a model.
    Params {
        #[arg(long, default_value = "unet-opt")]
        model: String,
    },
}

fn parse_profile(s: &str) -> Result<Profile, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("unknown profile `{s}`"))
}

fn parse_finetune(s: &str) -> Result<FinetuneMode, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("unknown finetune mode `{s}`"))
}

/// Single-line, `key=value` error record on stderr.
fn error_line(kind: &str, message: &str) -> String {
    let flat = message.split_whitespace().collect::<Vec<_>>().join(" ");
    format!("error kind={kind} message={}", serde_json::Value::String(flat))
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    if let Some(e) = err.downcast_ref::<seabed_core::Error>() {
        e.kind()
    } else if err.downcast_ref::<std::io::Error>().is_some() {
        "io"
    } else if err.downcast_ref::<serde_json::Error>().is_some() {
        "json"
    } else {
        "invalid_argument"
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("usage error").trim_start_matches("error: ");
            eprintln!("{}", error_line("usage", first));
            return ExitCode::from(2);
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}");
            eprintln!("{}", error_line(error_kind(&e), &msg));
            ExitCode::from(1)
        }
    }
}
