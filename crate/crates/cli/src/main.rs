//! `rffi` command-line driver.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 I/O error,
//! 4 numeric failure, 5 unrecognized or corrupt file.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rffi::pipeline::commands::{cmd_eval, cmd_finetune, cmd_gen, cmd_inspect, cmd_pretrain, configure_threads};
use rffi::pipeline::{RunConfig, RunMode};
use rffi::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "rffi", version, about = "RF fingerprint identification with residual-channel contrastive learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate source and target datasets plus their MMSE statistics.
    Gen(RunArgs),
    /// Contrastive pretraining on the source dataset.
    Pretrain(RunArgs),
    /// Fine-tune a classifier on the labeled slice of the target dataset.
    Finetune(RunArgs),
    /// Accuracy over an SNR sweep, feature NMI and feature export.
    Eval(RunArgs),
    /// Describe a dataset, checkpoint or MMSE statistics file.
    Inspect {
        path: PathBuf,
    },
}

#[derive(Args, Debug)]
struct RunArgs {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<RunMode>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run single-threaded.
    #[arg(long)]
    deterministic: bool,
    /// Output directory for datasets, checkpoints and reports.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_mode(s: &str) -> std::result::Result<RunMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(mode) = self.mode {
            cfg.mode = mode;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        cfg.deterministic |= self.deterministic;
        cfg.validate()?;
        configure_threads(cfg.deterministic)?;
        Ok(cfg)
    }
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut progress = |line: &str| eprintln!("{line}");
    match cli.command {
        Command::Gen(a) => print_json(&cmd_gen(&a.resolve()?, &mut progress)?),
        Command::Pretrain(a) => print_json(&cmd_pretrain(&a.resolve()?, &mut progress)?),
        Command::Finetune(a) => print_json(&cmd_finetune(&a.resolve()?, &mut progress)?),
        Command::Eval(a) => print_json(&cmd_eval(&a.resolve()?, &mut progress)?),
        Command::Inspect { path } => {
            let (kind, info) = cmd_inspect(&path)?;
            print_json(&serde_json::json!({ "path": path, "kind": kind, "info": info }))
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
