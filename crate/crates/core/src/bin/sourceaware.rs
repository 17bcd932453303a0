use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;
use sourceaware::config::RunConfig;
use sourceaware::pipeline::{self, TrainStage};
use sourceaware::Error;

/// Source-aware multi-expert scan classification pipeline.
#[derive(Parser)]
#[command(version)]
struct Cli {
    /// TOML run config; defaults apply when omitted. Relative paths in the
    /// file resolve against its directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `paths.data_root`.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Overrides `paths.output_root`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and its manifest.
    Synth,
    /// Precompute pooled model inputs.
    Prep,
    /// Train one stage: 1, 2a, 2b or 3.
    Train {
        #[arg(long)]
        stage: String,
    },
    /// Write per-expert and source prediction files.
    Predict,
    /// Route and vote into the final prediction file.
    Fuse,
    /// Score final and per-expert predictions.
    Evaluate,
    /// Print a markdown summary of the run.
    Report,
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let mut c = RunConfig::load(path)?;
            c.rebase(path.parent().unwrap_or(std::path::Path::new(".")));
            c
        }
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = &cli.data {
        cfg.paths.data_root = d.clone();
    }
    if let Some(o) = &cli.out {
        cfg.paths.output_root = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_json(v: &impl Serialize) {
    println!("{}", serde_json::to_string_pretty(v).expect("summary serializes"));
}

fn run(cli: &Cli) -> Result<(), Error> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Synth => print_json(&pipeline::cmd_synth(&cfg)?),
        Command::Prep => print_json(&pipeline::cmd_prep(&cfg)?),
        Command::Train { stage } => print_json(&pipeline::cmd_train(&cfg, TrainStage::parse(stage)?)?),
        Command::Predict => {
            let s = pipeline::cmd_predict(&cfg)?;
            for w in &s.warnings {
                eprintln!("warning: {w}");
            }
            print_json(&s);
        }
        Command::Fuse => {
            let fused = pipeline::cmd_fuse(&cfg)?;
            println!("fused {} scans into {}", fused.len(), pipeline::Layout::new(&cfg).final_predictions().display());
        }
        Command::Evaluate => print_json(&pipeline::cmd_evaluate(&cfg)?),
        Command::Report => print!("{}", pipeline::cmd_report(&cfg)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::from(1)
        }
    }
}
