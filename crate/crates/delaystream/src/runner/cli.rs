//! Command-line interface.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 run/report failure,
//! 3 selftest failure. `DELAYSTREAM_SEED_OVERRIDE` (an integer) replaces
//! every seed of a plan, for smoke tests.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use super::{parse_config, report, run_plan, run_selftest};
use crate::stream::{
    AbruptShift, GeneratorSpec, LabelBurst, RotatingGaussians, StreamConfig, StreamHandle,
};

pub const SEED_OVERRIDE_ENV: &str = "DELAYSTREAM_SEED_OVERRIDE";

#[derive(Parser)]
#[command(
    name = "delaystream",
    about = "Online continual learning under label delay: budgeted streams, replay methods, sweeps",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute every run of a plan file and write traces and aggregates.
    Run {
        /// Path to the JSON plan.
        config: PathBuf,
        /// Parallel workers (whole runs; each run stays sequential).
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Recompute runs whose output directories already exist.
        #[arg(long)]
        overwrite: bool,
        /// Print one line per run.
        #[arg(long)]
        verbose: bool,
    },
    /// Materialize a synthetic stream to the ingestion CSV format.
    Gen {
        #[command(subcommand)]
        generator: GenCommand,
    },
    /// Recompute gap/recovery tables from the summaries in an output dir.
    Report { output_dir: PathBuf },
    /// Gradient checks and sampler chi-square.
    Selftest {
        #[arg(long)]
        verbose: bool,
    },
}

#[derive(Args)]
struct CommonGen {
    /// Steps to materialize.
    #[arg(long, default_value_t = 100)]
    steps: u64,
    /// Batch size.
    #[arg(long, default_value_t = 32)]
    n: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 8)]
    dim: usize,
    #[arg(long, default_value_t = 0.35)]
    noise: f64,
    #[arg(long, default_value_t = 1.0)]
    radius: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV path.
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum GenCommand {
    /// Rotating Gaussian mixture.
    Rotating {
        #[command(flatten)]
        common: CommonGen,
        /// Radians per step.
        #[arg(long, default_value_t = 0.01)]
        omega: f64,
    },
    /// Mean translation at a fixed step.
    Abrupt {
        #[command(flatten)]
        common: CommonGen,
        #[arg(long)]
        shift_step: u64,
        #[arg(long, default_value_t = 2.0)]
        shift_magnitude: f64,
    },
    /// Labels arriving in constant runs.
    Burst {
        #[command(flatten)]
        common: CommonGen,
        #[arg(long, default_value_t = 32)]
        burst_len: usize,
    },
}

fn materialize(common: &CommonGen, generator: GeneratorSpec) -> Result<(), String> {
    let config = StreamConfig {
        n: common.n,
        delay: 0,
        horizon: common.steps,
        generator,
        seed: common.seed,
        validation_fraction: 0.0,
    };
    let handle = StreamHandle::open(config).map_err(|e| e.to_string())?;
    handle
        .export_csv(&common.out)
        .map_err(|e| format!("cannot write {}: {e}", common.out.display()))?;
    println!(
        "wrote {} ({} steps x {} samples)",
        common.out.display(),
        common.steps,
        common.n
    );
    Ok(())
}

fn seed_override() -> Result<Option<u64>, String> {
    match std::env::var(SEED_OVERRIDE_ENV) {
        Ok(raw) => raw
            .trim()
            .parse::<u64>()
            .map(Some)
            .map_err(|_| format!("{SEED_OVERRIDE_ENV} must be an integer, got `{raw}`")),
        Err(_) => Ok(None),
    }
}

/// Entry point shared by `main` and the CLI tests.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders --help/--version through the same path.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };

    match cli.command {
        Command::Run {
            config,
            workers,
            overwrite,
            verbose,
        } => {
            let mut plan = match parse_config(&config) {
                Ok(plan) => plan,
                Err(e) => {
                    eprintln!("error: {e}");
                    return 1;
                }
            };
            match seed_override() {
                Ok(Some(seed)) => {
                    eprintln!("note: {SEED_OVERRIDE_ENV} replaces all seeds with {seed}");
                    plan.seeds = vec![seed];
                }
                Ok(None) => {}
                Err(msg) => {
                    eprintln!("error: {msg}");
                    return 1;
                }
            }
            match run_plan(&plan, workers.max(1), overwrite, verbose) {
                Ok(records) => {
                    let failed = records.iter().filter(|r| r.summary.is_err()).count();
                    println!(
                        "{} run(s) complete, {failed} failed; outputs in {}",
                        records.len(),
                        plan.output_dir.display()
                    );
                    for r in records.iter().filter(|r| r.summary.is_err()) {
                        eprintln!("failed {}: {}", r.run_id, r.summary.as_ref().unwrap_err());
                    }
                    if failed > 0 {
                        2
                    } else {
                        0
                    }
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    2
                }
            }
        }
        Command::Gen { generator } => {
            let result = match &generator {
                GenCommand::Rotating { common, omega } => materialize(
                    common,
                    GeneratorSpec::RotatingGaussians(RotatingGaussians {
                        num_classes: common.classes,
                        dim: common.dim,
                        noise: common.noise,
                        angular_velocity: *omega,
                        radius: common.radius,
                    }),
                ),
                GenCommand::Abrupt {
                    common,
                    shift_step,
                    shift_magnitude,
                } => materialize(
                    common,
                    GeneratorSpec::AbruptShift(AbruptShift {
                        num_classes: common.classes,
                        dim: common.dim,
                        noise: common.noise,
                        radius: common.radius,
                        shift_step: *shift_step,
                        shift_magnitude: *shift_magnitude,
                    }),
                ),
                GenCommand::Burst { common, burst_len } => materialize(
                    common,
                    GeneratorSpec::LabelBurst(LabelBurst {
                        num_classes: common.classes,
                        dim: common.dim,
                        noise: common.noise,
                        radius: common.radius,
                        burst_len: *burst_len,
                    }),
                ),
            };
            match result {
                Ok(()) => 0,
                Err(msg) => {
                    eprintln!("error: {msg}");
                    1
                }
            }
        }
        Command::Report { output_dir } => match report(&output_dir) {
            Ok(rep) => {
                let text = rep.render();
                print!("{text}");
                let path = output_dir.join("report.csv");
                if let Err(e) = std::fs::write(&path, &text) {
                    eprintln!("error: cannot write {}: {e}", path.display());
                    return 2;
                }
                0
            }
            Err(e) => {
                eprintln!("error: {e}");
                2
            }
        },
        Command::Selftest { verbose } => {
            if run_selftest(verbose) {
                println!("selftest: all checks passed");
                0
            } else {
                eprintln!("selftest: FAILED");
                3
            }
        }
    }
}
