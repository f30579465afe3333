use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use npn_core::gates::GateKind;
use npn_core::harness::{self, ExperimentConfig, ObjectiveKind};
use npn_core::net::load_checkpoint;
use npn_core::NpnError;

#[derive(Parser)]
#[command(name = "npn", version, about = "Neural plasticity network experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Gate {
    Sigmoid,
    Hard,
}

#[derive(Clone, Copy, ValueEnum)]
enum Objective {
    Quadratic,
    Constant,
}

#[derive(Subcommand)]
enum Command {
    /// Run a training config and write metrics, checkpoint and summary.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Exit with status 4 if any `check.*` bound in the config fails.
        #[arg(long)]
        check: bool,
    },
    /// Compare the ARM estimate against exhaustive enumeration.
    VerifyArm {
        #[arg(long, default_value_t = 8)]
        vars: usize,
        #[arg(long, default_value_t = 200_000)]
        samples: usize,
        #[arg(long, default_value_t = 1.0)]
        k: f64,
        #[arg(long, value_enum, default_value_t = Gate::Sigmoid)]
        gate: Gate,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Objective::Quadratic)]
        objective: Objective,
    },
    /// Class-1 probability over a grid of the moons input plane.
    ExportBoundary {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 100)]
        resolution: usize,
        #[arg(long, default_value_t = 0.5)]
        tau: f64,
        /// Output CSV (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Histogram of gate probabilities per gated layer.
    ExportHistogram {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Effective parameter count of an architecture string.
    CountParams {
        #[arg(long)]
        template: String,
        #[arg(long)]
        arch: String,
    },
}

fn emit(text: &str, out: Option<&Path>) -> Result<(), NpnError> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| NpnError::Io {
            path: path.to_path_buf(),
            source: e,
        }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<i32, NpnError> {
    match cli.command {
        Command::Train { config, check } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let outcome = harness::cmd_train(&cfg)?;
            let last = outcome.records.last();
            println!("run directory: {}", outcome.run_dir.display());
            println!(
                "final: arch {} params {} pruned {:.2}% test_acc {:.4}",
                outcome.final_arch.arch,
                outcome.final_arch.param_count,
                100.0 * outcome.final_arch.pruned_fraction,
                last.map_or(0.0, |r| r.test_acc)
            );
            if check {
                if outcome.check_failures.is_empty() {
                    println!("check: PASS");
                } else {
                    for f in &outcome.check_failures {
                        println!("check: FAIL {f}");
                    }
                    return Ok(harness::EXIT_CHECK);
                }
            }
            Ok(harness::EXIT_OK)
        }
        Command::VerifyArm {
            vars,
            samples,
            k,
            gate,
            seed,
            objective,
        } => {
            let kind = match gate {
                Gate::Sigmoid => GateKind::ScaledSigmoid,
                Gate::Hard => GateKind::HardSigmoid,
            };
            let objective = match objective {
                Objective::Quadratic => ObjectiveKind::Quadratic,
                Objective::Constant => ObjectiveKind::Constant,
            };
            let report = harness::cmd_verify_arm(vars, samples, k, kind, seed, objective)?;
            print!("{}", report.render());
            Ok(if report.passed { harness::EXIT_OK } else { harness::EXIT_CHECK })
        }
        Command::ExportBoundary {
            checkpoint,
            resolution,
            tau,
            out,
        } => {
            let model = load_checkpoint(&checkpoint)?;
            emit(&harness::cmd_export_boundary(&model, resolution, tau)?, out.as_deref())?;
            Ok(harness::EXIT_OK)
        }
        Command::ExportHistogram { checkpoint, bins, out } => {
            let model = load_checkpoint(&checkpoint)?;
            emit(&harness::cmd_export_histogram(&model, bins)?, out.as_deref())?;
            Ok(harness::EXIT_OK)
        }
        Command::CountParams { template, arch } => {
            println!("{}", harness::cmd_count_params(&template, &arch)?);
            Ok(harness::EXIT_OK)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(harness::exit_code(&e) as u8)
        }
    }
}
