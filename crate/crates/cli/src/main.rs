//! `bench`: command-line driver for the shiftlab benchmark harness.

use clap::{Parser, Subcommand};
use shiftlab::bench::{dump_embeddings, execute_run, render_report, BenchConfig, ReportFormat};
use shiftlab::datagen::{load_csv, make_shift_pair, save_csv, Dataset, ShiftSpec};
use shiftlab::gradcheck::run_full_suite;
use shiftlab::models::Checkpoint;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "bench",
    version,
    about = "Deterministic domain-adaptation benchmarks on synthetic and CSV datasets"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a benchmark config and write reports, run logs, and dumps.
    Run {
        /// Benchmark configuration (JSON).
        config: PathBuf,
        /// Output directory for all artifacts.
        #[arg(long)]
        out: PathBuf,
        /// Worker threads for the task matrix (never changes results).
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Run the full finite-difference gradient suite; exits nonzero on failure.
    Gradcheck,
    /// Materialize the synthetic dataset described by a shift spec.
    Gen {
        /// Shift spec (JSON).
        #[arg(long)]
        spec: PathBuf,
        /// Destination CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Project a checkpoint's features for two datasets onto two principal
    /// components and write the embedding CSV.
    Embed {
        /// Checkpoint file (JSON) from a benchmark run.
        checkpoint: PathBuf,
        /// Source-domain CSV.
        source: PathBuf,
        /// Target-domain CSV.
        target: PathBuf,
        /// Destination CSV.
        #[arg(long)]
        out: PathBuf,
    },
}

/// Loads a CSV for embedding: uses the `label` column when present, with the
/// class count inferred from the labels.
fn load_for_embed(path: &Path) -> shiftlab::Result<Dataset> {
    let header = std::fs::read_to_string(path)?
        .lines()
        .next()
        .unwrap_or_default()
        .to_string();
    let has_label = header.split(',').any(|h| h.trim() == "label");
    if has_label {
        let mut d = load_csv(path, Some("label"), usize::MAX)?;
        d.class_count = d
            .labels
            .as_ref()
            .and_then(|ls| ls.iter().max().map(|&m| m + 1))
            .unwrap_or(1);
        Ok(d)
    } else {
        load_csv(path, None, 1)
    }
}

fn run(cli: Cli) -> shiftlab::Result<ExitCode> {
    match cli.cmd {
        Cmd::Run { config, out, workers } => {
            let cfg = BenchConfig::from_path(&config)?;
            let table = execute_run(&cfg, &out, workers)?;
            print!("{}", render_report(&table, ReportFormat::Markdown));
            println!("\nartifacts written to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Gradcheck => {
            let report = run_full_suite()?;
            print!("{}", report.render());
            Ok(if report.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Cmd::Gen { spec, out } => {
            let text = std::fs::read_to_string(&spec)?;
            let spec: ShiftSpec = serde_json::from_str(&text)?;
            let (_, data) = make_shift_pair(&spec)?;
            save_csv(&data, &out)?;
            println!(
                "wrote {} samples x {} features to {}",
                data.len(),
                data.dim(),
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Embed {
            checkpoint,
            source,
            target,
            out,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let source = load_for_embed(&source)?;
            let target = load_for_embed(&target)?;
            dump_embeddings(&ck.bundle, &source, &target, &out)?;
            println!(
                "wrote {} embedding rows to {}",
                source.len() + target.len(),
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
