use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ddrom::pipeline::{run_pipeline, RunConfig, Stage, StageStatus};

#[derive(Parser)]
#[command(name = "ddrom", version, about = "Reduced order models with data-driven closures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate training and reference snapshots.
    Generate(Args),
    /// Compute POD bases.
    Pod(Args),
    /// Assemble reduced and enriched operators.
    Assemble(Args),
    /// Compute exact corrections and the training dataset.
    Corrections(Args),
    /// Train the closure ensembles.
    Train(Args),
    /// Solve the online problems.
    Solve(Args),
    /// Compute error series.
    Evaluate(Args),
    /// Write summary tables and plot data.
    Report(Args),
    /// Run every stage.
    All(Args),
}

#[derive(clap::Args)]
struct Args {
    /// TOML run configuration.
    #[arg(short, long)]
    config: PathBuf,
    /// Override the output directory from the config.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (stage, args) = match cli.command {
        Command::Generate(a) => (Stage::Generate, a),
        Command::Pod(a) => (Stage::Pod, a),
        Command::Assemble(a) => (Stage::Assemble, a),
        Command::Corrections(a) => (Stage::Corrections, a),
        Command::Train(a) => (Stage::Train, a),
        Command::Solve(a) => (Stage::Solve, a),
        Command::Evaluate(a) => (Stage::Evaluate, a),
        Command::Report(a) | Command::All(a) => (Stage::Report, a),
    };
    match run(stage, &args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(stage: Stage, args: &Args) -> ddrom::Result<()> {
    let mut cfg = RunConfig::from_file(&args.config)?;
    if let Some(out) = &args.output {
        cfg.output_dir = out.clone();
    }
    let manifest = run_pipeline(&cfg, stage)?;
    for rec in &manifest.stages {
        let status = match rec.status {
            StageStatus::Completed => "completed",
            StageStatus::Reused => "reused",
            StageStatus::Failed => "failed",
        };
        println!("{:<12} {:<10} {} artifacts", rec.stage.name(), status, rec.artifacts.len());
    }
    if stage == Stage::Report {
        let table = std::fs::read_to_string(cfg.output_dir.join("report/summary.txt"))
            .map_err(|e| ddrom::Error::io(cfg.output_dir.join("report/summary.txt"), e))?;
        print!("{table}");
    }
    Ok(())
}
