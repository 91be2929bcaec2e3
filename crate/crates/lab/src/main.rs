use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tiermoe_lab::config::{load_config, ExperimentConfig, Overrides, OUT_ROOT_ENV};
use tiermoe_lab::data::{generate_dataset, Task};
use tiermoe_lab::experiment::{report, run_experiment, RunOptions};
use tiermoe_lab::verify::{gradcheck, invariants};
use tiermoe_lab::LabResult;

/// Ordinal mixture-of-experts training lab.
///
/// Exit status: 0 success, 1 verification or runtime failure, 2
/// configuration error, 3 numeric abort during training.
#[derive(Parser)]
#[command(name = "tiermoe", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a configuration, or every level of its ablation grid.
    Run {
        /// TOML configuration; defaults are used without one.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory (overrides `output.dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seed for the model, the data and the grouping draws.
        #[arg(long)]
        seed: Option<u64>,
        /// Number of training steps.
        #[arg(long)]
        steps: Option<u64>,
        /// No per-evaluation progress lines.
        #[arg(long)]
        quiet: bool,
    },
    /// Run a verification suite.
    Verify {
        #[command(subcommand)]
        suite: Suite,
    },
    /// Write a synthetic dataset as plain text.
    GenData {
        #[arg(long, value_enum, default_value_t = Task::Copy)]
        task: Task,
        /// Number of training sequences.
        #[arg(long)]
        size: usize,
        #[arg(long, default_value_t = 256)]
        eval_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Vocabulary and prompt length come from this configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the summary table of a run or ablation directory.
    Report { dir: PathBuf },
}

#[derive(Subcommand)]
enum Suite {
    /// Finite-difference check of the total loss over the toy matrix.
    Gradcheck {
        /// Corrupt the gate backward pass; the check must then fail.
        #[arg(long)]
        inject_fault: bool,
    },
    /// Randomized property checks with per-property pass counts.
    Invariants {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn out_root() -> Option<PathBuf> {
    std::env::var_os(OUT_ROOT_ENV).map(PathBuf::from)
}

fn under_root(p: &Path) -> PathBuf {
    match out_root() {
        Some(r) if p.is_relative() => r.join(p),
        _ => p.to_path_buf(),
    }
}

fn base_config(path: Option<&Path>) -> LabResult<ExperimentConfig> {
    path.map_or_else(|| Ok(ExperimentConfig::default()), load_config)
}

fn execute(cmd: Command) -> LabResult<ExitCode> {
    match cmd {
        Command::Run {
            config,
            out,
            seed,
            steps,
            quiet,
        } => {
            let cfg = base_config(config.as_deref())?;
            let opts = RunOptions {
                overrides: Overrides { seed, steps, out },
                out_root: out_root(),
                progress: !quiet,
            };
            let dir = run_experiment(cfg, &opts)?;
            print!("{}", report(&dir)?);
            println!("results in {}", dir.display());
        }
        Command::Verify { suite } => {
            let failures = match suite {
                Suite::Gradcheck { inject_fault } => {
                    let r = gradcheck(inject_fault)?;
                    print!("{}", r.render());
                    r.failures()
                }
                Suite::Invariants { seed } => {
                    let r = invariants(seed);
                    print!("{}", r.render());
                    r.failures()
                }
            };
            if failures > 0 {
                return Ok(ExitCode::from(1));
            }
        }
        Command::GenData {
            task,
            size,
            eval_size,
            seed,
            config,
            out,
        } => {
            let cfg = base_config(config.as_deref())?;
            let dir = under_root(&out);
            let m = generate_dataset(
                task,
                size,
                eval_size,
                seed,
                cfg.model.vocab_size,
                &cfg.data,
                &dir,
            )?;
            println!(
                "wrote {} training and {} evaluation sequences to {}",
                m.train_size,
                m.eval_size,
                dir.display()
            );
        }
        Command::Report { dir } => print!("{}", report(&dir)?),
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
