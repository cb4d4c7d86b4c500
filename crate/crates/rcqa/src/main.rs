//! Command-line entry point: one subcommand per pipeline stage.
//!
//! Configuration precedence: flags > `RCQA_*` environment variables > the
//! `--config` file > built-in defaults.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or
//! validation error, 3 calibration target unattainable at positive coverage.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rcqa::config::{CliOverrides, PipelineConfig, ScorerKind};
use rcqa::pipeline;
use rcqa::qualify::LayerMask;
use rcqa::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_INFEASIBLE: u8 = 3;

#[derive(Parser)]
#[command(
    name = "rcqa",
    version,
    about = "Risk-controlled question answering: train a span reader, score its confidence, and calibrate a risk-bounded decision rule"
)]
struct Cli {
    /// TOML run configuration (defaults apply when omitted).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Master seed; every stage seed derives from it.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Run directory receiving all artifacts.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Restrict the run to a single confidence scorer.
    #[arg(long, global = true, value_name = "NAME")]
    scorer: Option<String>,

    /// Probe layers fed to the convolutional scorer.
    #[arg(long, global = true, value_name = "all|last")]
    layers: Option<String>,

    /// Risk bound used when fitting the decision threshold.
    #[arg(long, global = true, value_name = "R")]
    target_risk: Option<f64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and its vocabulary file.
    GenData,
    /// Train the reader (with epoch snapshots), the layerwise probes, and
    /// any configured ensemble members.
    Train,
    /// Dump per-instance probe signals for the validation and test splits.
    Extract,
    /// Train the configured confidence scorers (parameter-free ones get
    /// marker checkpoints).
    TrainQualify,
    /// Fit a risk-bounded decision threshold per scorer on the calibration
    /// split.
    Calibrate,
    /// Score the test split and write metric reports plus risk-coverage
    /// CSVs for every scorer and the oracle.
    Evaluate,
    /// Render risk-coverage charts and probe-signal heatmaps.
    Report,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap exits with 2 by convention, but this tool reserves 2 for
            // data errors; usage problems exit 1 (--help/--version exit 0).
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(match err {
                Error::Config(_) => EXIT_USAGE,
                _ => EXIT_DATA,
            })
        }
    }
}

fn run(cli: Cli) -> rcqa::Result<ExitCode> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    config.apply_process_env()?;
    let overrides = CliOverrides {
        seed: cli.seed,
        out: cli.out.clone(),
        scorer: cli
            .scorer
            .as_deref()
            .map(str::parse::<ScorerKind>)
            .transpose()?,
        layers: cli
            .layers
            .as_deref()
            .map(|raw| {
                raw.parse::<LayerMask>()
                    .map_err(|e| Error::Config(format!("--layers: {e}")))
            })
            .transpose()?,
        target_risk: cli.target_risk,
    };
    overrides.apply(&mut config);

    match cli.command {
        Command::GenData => print_summary(&pipeline::cmd_gen_data(&config)?)?,
        Command::Train => print_summary(&pipeline::cmd_train(&config)?)?,
        Command::Extract => print_summary(&pipeline::cmd_extract(&config)?)?,
        Command::TrainQualify => print_summary(&pipeline::cmd_train_qualify(&config)?)?,
        Command::Calibrate => {
            let summary = pipeline::cmd_calibrate(&config)?;
            print_summary(&summary)?;
            if summary.any_infeasible() {
                eprintln!(
                    "warning: target risk {} is unattainable at positive coverage \
                     for at least one scorer (threshold rejects everything)",
                    config.target_risk
                );
                return Ok(ExitCode::from(EXIT_INFEASIBLE));
            }
        }
        Command::Evaluate => print_summary(&pipeline::cmd_evaluate(&config)?)?,
        Command::Report => print_summary(&pipeline::cmd_report(&config)?)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn print_summary(summary: &impl serde::Serialize) -> rcqa::Result<()> {
    let text = serde_json::to_string_pretty(summary)
        .map_err(|e| Error::InvalidInput(format!("summary serialization failed: {e}")))?;
    println!("{text}");
    Ok(())
}
