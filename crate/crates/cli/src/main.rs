//! `forge` drives the long-CoT synthesis pipeline: question generation,
//! simple-CoT extraction, thought expansion, dataset construction,
//! analytics, and benchmark evaluation.
//!
//! Exit codes: 0 success, 1 fatal error, 2 per-item failures above the
//! configured threshold.

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use forge_core::config::load_config;
use forge_core::pipeline::{run_stage, verify_chain, RunOptions, StageKind, StageReport};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "forge", version, about = "Long chain-of-thought synthesis pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct StageArgs {
    /// Path to the run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Skip the stage when its manifest matches the current inputs.
    #[arg(long)]
    resume: bool,
    /// Process only the first N input rows.
    #[arg(long, value_name = "N")]
    limit: Option<usize>,
    /// Validate configuration and inputs without writing anything.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Stage 1: dense descriptions to multiple-choice questions.
    GenMcq(StageArgs),
    /// Stage 2: sample simple CoTs from the VLM.
    GenCot(StageArgs),
    /// Stage 3: expand seed CoTs with the reasoning model.
    Expand(StageArgs),
    /// Build the SFT dataset from labeled samples.
    BuildSft(StageArgs),
    /// Build the DPO preference pairs from labeled samples.
    BuildDpo(StageArgs),
    /// Behavior tagging, trace lengths, and difficulty binning.
    Analyze(StageArgs),
    /// Evaluate the configured model on the benchmark file.
    Eval(StageArgs),
    /// Repeated sampled rollouts for difficulty estimation.
    Rollouts(StageArgs),
    /// Verify the manifest chain against the files on disk.
    Verify {
        #[arg(long)]
        config: PathBuf,
    },
}

fn stage_of(command: &Command) -> Option<(StageKind, &StageArgs)> {
    match command {
        Command::GenMcq(a) => Some((StageKind::GenMcq, a)),
        Command::GenCot(a) => Some((StageKind::GenCot, a)),
        Command::Expand(a) => Some((StageKind::Expand, a)),
        Command::BuildSft(a) => Some((StageKind::BuildSft, a)),
        Command::BuildDpo(a) => Some((StageKind::BuildDpo, a)),
        Command::Analyze(a) => Some((StageKind::Analyze, a)),
        Command::Eval(a) => Some((StageKind::Eval, a)),
        Command::Rollouts(a) => Some((StageKind::Rollouts, a)),
        Command::Verify { .. } => None,
    }
}

fn print_report(report: &StageReport) {
    if report.dry_run {
        println!("stage {}: dry run, would write:", report.stage);
        for path in &report.outputs {
            println!("  {}", path.display());
        }
        return;
    }
    if report.skipped {
        println!("stage {}: up to date, skipped", report.stage);
        return;
    }
    let rows: Vec<String> =
        report.row_counts.iter().map(|(k, v)| format!("{k}={v}")).collect();
    println!(
        "stage {}: {} ({} ms)",
        report.stage,
        if rows.is_empty() { "done".to_string() } else { rows.join(" ") },
        report.wall_time_ms
    );
    let counters: Vec<String> = report
        .counters
        .iter()
        .filter(|(_, v)| **v > 0)
        .map(|(k, v)| format!("{k}={v}"))
        .collect();
    if !counters.is_empty() {
        println!("  counters: {}", counters.join(" "));
    }
    for path in &report.outputs {
        println!("  wrote {}", path.display());
    }
    if report.failures > 0 {
        eprintln!(
            "  warning: {}/{} items failed",
            report.failures, report.processed
        );
    }
}

fn run() -> anyhow::Result<ExitCode> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Verify { config } => {
            let config = load_config(config).context("loading config")?;
            let verified = verify_chain(&config).context("verifying manifest chain")?;
            if verified.is_empty() {
                println!("no manifests found under {}", config.workdir().display());
            } else {
                for stage in &verified {
                    println!("verified {stage}");
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        command => {
            let (stage, args) = stage_of(command).expect("stage command");
            let config = load_config(&args.config).context("loading config")?;
            let options = RunOptions {
                resume: args.resume,
                limit: args.limit,
                dry_run: args.dry_run,
            };
            let report = run_stage(stage, &config, &options)?;
            print_report(&report);
            let over_threshold = report.failures > 0
                && report.failure_fraction() > config.partial_failure_threshold;
            if over_threshold {
                Ok(ExitCode::from(2))
            } else {
                Ok(ExitCode::SUCCESS)
            }
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
