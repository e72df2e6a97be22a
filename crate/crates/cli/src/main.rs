//! `chaoscast`: train and evaluate chaotic-dynamics forecasters from one
//! JSON run configuration.
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 numerical
//! divergence, 3 I/O or checkpoint corruption.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use chaoscast_cli::config::{self, RunConfig};
use chaoscast_cli::runner::{self, Action};
use chaoscast_core::autodiff::check::{run_op_checks, CHECK_EPS, CHECK_TOLERANCE};
use chaoscast_core::model::{grad_check_tiny, Arch};
use chaoscast_core::{Error, Result};

#[derive(Parser)]
#[command(name = "chaoscast", version, about = "Chaotic-dynamics forecasting pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct CommonArgs {
    /// Run configuration (JSON); built-in defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory (beats CHAOSCAST_OUT_DIR and the config).
    #[arg(long)]
    out: Option<String>,
    /// Override the architecture: bilstm, transformer or hybrid.
    #[arg(long)]
    arch: Option<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the observation series and write data.csv.
    GenData(CommonArgs),
    /// Generate data and train a model; writes model.ckpt and history.csv.
    Train(CommonArgs),
    /// Autonomous forecast from a checkpoint; writes rollout.csv.
    Rollout {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoint written by `train` or `run`.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Infer unmeasured variables from a checkpoint; writes infer.csv.
    Infer {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoint written by `train` or `run`.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train and forecast across consecutive master seeds; writes sweep.csv.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// Override the number of master seeds.
        #[arg(long)]
        n_seeds: Option<usize>,
        /// Override the worker-thread bound.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Finite-difference gradient checks over ops and a small model.
    Gradcheck {
        /// Number of seeds to check.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Perturbation for central differences.
        #[arg(long, default_value_t = CHECK_EPS)]
        eps: f64,
    },
    /// Full pipeline: generate, train, then evaluate per the config task.
    Run(CommonArgs),
}

fn load_raw(common: &CommonArgs) -> Result<RunConfig> {
    match &common.config {
        Some(p) => config::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn apply_common(raw: &mut RunConfig, common: &CommonArgs) -> Result<()> {
    if let Some(s) = common.seed {
        raw.seed = s;
    }
    if let Some(a) = &common.arch {
        raw.arch = Arch::parse(a)?;
    }
    if let Some(o) = &common.out {
        raw.out_dir = o.clone();
    } else if let Ok(dir) = std::env::var("CHAOSCAST_OUT_DIR") {
        if !dir.is_empty() {
            raw.out_dir = dir;
        }
    }
    Ok(())
}

fn run_action(action: Action, raw: RunConfig, common: &CommonArgs) -> Result<()> {
    let mut raw = raw;
    apply_common(&mut raw, common)?;
    let cfg = raw.resolve()?;
    let manifest = runner::execute(&action, &cfg)?;
    println!("out_dir: {}", cfg.out_dir);
    println!("metrics: {}", manifest.final_metrics);
    Ok(())
}

fn exec(action: Action, common: &CommonArgs) -> Result<()> {
    run_action(action, load_raw(common)?, common)
}

/// Returns the process exit code: 0 when every check passes, 2 otherwise.
fn gradcheck(seeds: u64, eps: f64) -> Result<u8> {
    if seeds == 0 {
        return Err(Error::config("gradcheck needs at least one seed"));
    }
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        for res in run_op_checks(seed, eps)? {
            println!(
                "seed {seed}  op {:<14} rel_err {:.3e}  {}",
                res.name,
                res.max_rel_err,
                if res.pass { "pass" } else { "FAIL" }
            );
            worst = worst.max(res.max_rel_err);
        }
        let model_err = grad_check_tiny(seed)?;
        println!(
            "seed {seed}  model          rel_err {model_err:.3e}  {}",
            if model_err < CHECK_TOLERANCE { "pass" } else { "FAIL" }
        );
        worst = worst.max(model_err);
    }
    println!("worst rel_err {worst:.3e} (tolerance {CHECK_TOLERANCE:.0e})");
    Ok(if worst < CHECK_TOLERANCE { 0 } else { 2 })
}

fn dispatch(cli: Cli) -> Result<u8> {
    match cli.cmd {
        Cmd::GenData(c) => exec(Action::GenData, &c)?,
        Cmd::Train(c) => exec(Action::Train, &c)?,
        Cmd::Rollout { common, checkpoint } => exec(Action::Rollout { checkpoint }, &common)?,
        Cmd::Infer { common, checkpoint } => exec(Action::Infer { checkpoint }, &common)?,
        Cmd::Sweep {
            common,
            n_seeds,
            jobs,
        } => {
            let mut raw = load_raw(&common)?;
            if let Some(n) = n_seeds {
                raw.n_seeds = n;
            }
            if let Some(j) = jobs {
                raw.jobs = j;
            }
            run_action(Action::Sweep, raw, &common)?;
        }
        Cmd::Gradcheck { seeds, eps } => return gradcheck(seeds, eps),
        Cmd::Run(c) => exec(Action::Run, &c)?,
    }
    Ok(0)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Argument(_)
        | Error::ShapeMismatch { .. }
        | Error::ConfigMismatch(_)
        | Error::Config(_) => 1,
        Error::NonFinite { .. } | Error::Integration { .. } | Error::Diverged { .. } => 2,
        Error::Io(_) | Error::Json(_) | Error::CorruptCheckpoint(_) => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
