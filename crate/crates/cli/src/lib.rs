//! Command-line harness: train gates, evaluate eviction policies, analyze
//! head retention, benchmark gating overhead and inspect artifacts.

pub mod commands;
pub mod common;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::RunConfig;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "fastkv", version, about = "Gated KV-cache eviction at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (overrides `[output] dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Base seed (overrides the top-level `seed`).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build shards from the corpus and train one gate per layer.
    Train(RunArgs),
    /// Compare policies by logit deviation from the full cache.
    Eval(RunArgs),
    /// Per-head retention, head taxonomy and token tables.
    Analyze(RunArgs),
    /// Latency, gating overhead and peak cache size.
    Bench(RunArgs),
    /// Print a JSON summary of a run or of individual artifact files.
    Inspect {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Artifact files to describe.
        #[arg(long = "file")]
        files: Vec<PathBuf>,
    },
}

fn load_config(config: &std::path::Path, out: Option<PathBuf>, seed: Option<u64>) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(out) = out {
        cfg.output.dir = out;
    }
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Caps rayon's global pool at `FASTKV_THREADS` when set.
pub fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("FASTKV_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("FASTKV_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(e.to_string()))
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => {
            let cfg = load_config(&a.config, a.out, a.seed)?;
            let (_, summary) = commands::train::run(&cfg)?;
            println!("wrote {} ({} bytes)", summary.gate_file, summary.gate_file_bytes);
        }
        Command::Eval(a) => {
            let cfg = load_config(&a.config, a.out, a.seed)?;
            let report = commands::eval::run(&cfg)?;
            print!("{}", report.to_csv());
        }
        Command::Analyze(a) => {
            let cfg = load_config(&a.config, a.out, a.seed)?;
            let an = commands::analyze::run(&cfg)?;
            println!(
                "mean retention {:.4} at ratio {}; heads sparse/medium/dense: {:?}",
                an.mean_retention, an.ratio, an.class_counts
            );
        }
        Command::Bench(a) => {
            let cfg = load_config(&a.config, a.out, a.seed)?;
            let report = commands::bench::run(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Inspect {
            config,
            out,
            seed,
            files,
        } => {
            if config.is_none() && files.is_empty() {
                return Err(CliError::Config("inspect needs --config or --file".into()));
            }
            let mut items = Vec::new();
            if let Some(c) = config {
                items.push(commands::inspect::describe_run(&load_config(&c, out, seed)?)?);
            }
            for f in &files {
                items.push(commands::inspect::describe_file(f)?);
            }
            let v = if items.len() == 1 {
                items.pop().unwrap()
            } else {
                serde_json::Value::Array(items)
            };
            println!("{}", serde_json::to_string_pretty(&v)?);
        }
    }
    Ok(())
}
