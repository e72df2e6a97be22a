//! Pipeline stages behind each subcommand, plus the driver that strings them
//! together and writes artifacts.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use chaoscast_core::dynsys::{generate_observations, LorenzParams, Trajectory};
use chaoscast_core::eval::{
    autonomous_rollout, infer_unmeasured, seed_sweep, InferenceResult, RolloutResult, SweepStats,
};
use chaoscast_core::model::{load_params_checked, save_params, CheckpointMeta, Model};
use chaoscast_core::train::{split_and_window, train_model, TrainConfig, TrainHistory};
use chaoscast_core::{Error, Result};

use crate::artifacts::{
    atomic_write, data_csv, fmt_f64, history_csv, infer_csv, rollout_csv, sweep_csv, RunManifest,
};
use crate::config::{RunConfig, Task};

/// Stream seeds of one run, all derived from the master seed so a single
/// `seed` field pins data, initialization and training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunSeeds {
    pub data: u64,
    pub init: u64,
    pub train: u64,
}

pub fn derive_run_seeds(master: u64) -> RunSeeds {
    let mut r = ChaCha8Rng::seed_from_u64(master);
    RunSeeds {
        data: r.next_u64(),
        init: r.next_u64(),
        train: r.next_u64(),
    }
}

/// Observation series of the run's master seed.
pub fn generate(cfg: &RunConfig) -> Result<Trajectory> {
    let seeds = derive_run_seeds(cfg.seed);
    generate_observations(&cfg.data, &LorenzParams::default(), seeds.data)
}

pub struct TrainedRun {
    pub traj: Trajectory,
    pub model: Model,
    pub history: TrainHistory,
    pub meta: CheckpointMeta,
}

/// Generate data, window it and train a fresh model under `master`.
pub fn train_run(cfg: &RunConfig, master: u64) -> Result<TrainedRun> {
    let seeds = derive_run_seeds(master);
    let traj = generate_observations(&cfg.data, &LorenzParams::default(), seeds.data)?;
    let (train_ds, val_ds, _) = split_and_window(
        &traj,
        &cfg.observed_vars,
        &cfg.target_vars,
        cfg.model.i_w,
        cfg.model.o_w,
        &cfg.splits,
    )?;
    let mut model = Model::init(cfg.model, seeds.init)?;
    let tcfg = TrainConfig {
        seed: seeds.train,
        ..cfg.train
    };
    let history = train_model(&mut model, &train_ds, &val_ds, &tcfg)?;
    let meta = CheckpointMeta {
        config: cfg.model,
        norm: train_ds.norm.clone(),
        input_vars: cfg.observed_vars.clone(),
        target_vars: cfg.target_vars.clone(),
        seed: master,
    };
    Ok(TrainedRun {
        traj,
        model,
        history,
        meta,
    })
}

/// Forecast from the val/test boundary: the seed window is the last `I_w`
/// validation states, truth the first `horizon` test states.
pub fn rollout_run(cfg: &RunConfig, tr: &TrainedRun) -> Result<RolloutResult> {
    let (_, _, r_test) = cfg.splits.ranges();
    let i_w = cfg.model.i_w;
    let seed_window = &tr.traj.states[r_test.start - i_w..r_test.start];
    let truth = &tr.traj.states[r_test.start..r_test.start + cfg.horizon];
    autonomous_rollout(&tr.model, &tr.meta.norm, seed_window, truth, cfg.data.delta())
}

/// Sliding-window inference across the test split.
pub fn infer_run(cfg: &RunConfig, tr: &TrainedRun) -> Result<InferenceResult> {
    let (_, _, r_test) = cfg.splits.ranges();
    infer_unmeasured(
        &tr.model,
        &tr.meta.norm,
        &cfg.observed_vars,
        &cfg.target_vars,
        &tr.traj.states[r_test],
    )
}

/// Train and roll out once per master seed `seed, seed+1, ...`; aggregate
/// the VPTs.
pub fn sweep_run(cfg: &RunConfig) -> Result<SweepStats> {
    if cfg.task != Task::Autonomous {
        return Err(Error::config("sweep covers the autonomous task only"));
    }
    let seeds: Vec<u64> = (0..cfg.n_seeds as u64)
        .map(|k| cfg.seed.wrapping_add(k))
        .collect();
    seed_sweep(&seeds, cfg.jobs, |master| {
        let tr = train_run(cfg, master)?;
        rollout_run(cfg, &tr)
    })
}

fn load_trained(cfg: &RunConfig, checkpoint: &Path) -> Result<TrainedRun> {
    let (model, meta) = load_params_checked(checkpoint, &cfg.model)?;
    if meta.input_vars != cfg.observed_vars || meta.target_vars != cfg.target_vars {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint maps {:?} -> {:?}, config wants {:?} -> {:?}",
            meta.input_vars, meta.target_vars, cfg.observed_vars, cfg.target_vars
        )));
    }
    Ok(TrainedRun {
        traj: generate(cfg)?,
        model,
        history: TrainHistory::default(),
        meta,
    })
}

/// What an invocation should do; `Run` is the full train-and-evaluate
/// pipeline.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Action {
    GenData,
    Train,
    Rollout { checkpoint: PathBuf },
    Infer { checkpoint: PathBuf },
    Sweep,
    Run,
}

fn require_task(cfg: &RunConfig, want: Task, what: &str) -> Result<()> {
    if cfg.task != want {
        return Err(Error::config(format!(
            "{what} needs task \"{}\", config says \"{}\"",
            want.as_str(),
            cfg.task.as_str()
        )));
    }
    Ok(())
}

fn rollout_metrics(r: &RolloutResult) -> serde_json::Value {
    serde_json::json!({
        "vpt_lyapunov": r.vpt.lyapunov,
        "vpt_steps": r.vpt.steps,
        "censored": r.vpt.censored,
        "diverged_at": r.diverged_at,
        "final_nrmse": r.nrmse.last().copied().map(fmt_f64),
    })
}

fn infer_metrics(r: &InferenceResult) -> serde_json::Value {
    serde_json::json!({
        "steps": r.len(),
        "final_rmse": r.rmse.last(),
        "final_cum_rmse": r.final_cum_rmse(),
    })
}

fn train_metrics(h: &TrainHistory) -> serde_json::Value {
    serde_json::json!({
        "epochs_run": h.epochs.len(),
        "best_val_loss": h.best_val(),
        "final_lr": h.epochs.last().map(|e| e.lr),
    })
}

/// Run `action` under `cfg`, writing artifacts into `cfg.out_dir`. The
/// manifest is written even when a stage fails, with `error` set and the
/// artifact list covering what exists.
pub fn execute(action: &Action, cfg: &RunConfig) -> Result<RunManifest> {
    let start = Instant::now();
    let out = PathBuf::from(&cfg.out_dir);
    let mut manifest = RunManifest::new(cfg.clone());

    let emit = |manifest: &mut RunManifest, name: &str, text: String| -> Result<()> {
        atomic_write(&out.join(name), text.as_bytes())?;
        manifest.artifacts.push(name.to_string());
        Ok(())
    };

    let result = (|| -> Result<()> {
        let mut echo = serde_json::to_string_pretty(cfg)?;
        echo.push('\n');
        emit(&mut manifest, "config.json", echo)?;

        match action {
            Action::GenData => {
                let traj = generate(cfg)?;
                emit(&mut manifest, "data.csv", data_csv(&traj))?;
                manifest.final_metrics = serde_json::json!({
                    "n_samples": traj.len(),
                    "delta": traj.dt,
                });
            }
            Action::Train => {
                let tr = train_run(cfg, cfg.seed)?;
                emit(&mut manifest, "data.csv", data_csv(&tr.traj))?;
                save_params(&tr.model, &tr.meta, &out.join("model.ckpt"))?;
                manifest.artifacts.push("model.ckpt".into());
                emit(&mut manifest, "history.csv", history_csv(&tr.history))?;
                manifest.final_metrics = train_metrics(&tr.history);
            }
            Action::Rollout { checkpoint } => {
                require_task(cfg, Task::Autonomous, "rollout")?;
                let tr = load_trained(cfg, checkpoint)?;
                let r = rollout_run(cfg, &tr)?;
                emit(&mut manifest, "rollout.csv", rollout_csv(&r, cfg.data.delta()))?;
                manifest.final_metrics = rollout_metrics(&r);
            }
            Action::Infer { checkpoint } => {
                require_task(cfg, Task::Infer, "infer")?;
                let tr = load_trained(cfg, checkpoint)?;
                let r = infer_run(cfg, &tr)?;
                emit(
                    &mut manifest,
                    "infer.csv",
                    infer_csv(&r, &cfg.target_vars),
                )?;
                manifest.final_metrics = infer_metrics(&r);
            }
            Action::Sweep => {
                let stats = sweep_run(cfg)?;
                emit(
                    &mut manifest,
                    "sweep.csv",
                    sweep_csv(&stats, cfg.arch.as_str()),
                )?;
                let diverged = stats.entries.iter().filter(|e| e.diverged).count();
                let censored = stats.entries.iter().filter(|e| e.censored).count();
                manifest.final_metrics = serde_json::json!({
                    "median_vpt": stats.median,
                    "mean_vpt": stats.mean,
                    "n_seeds": stats.entries.len(),
                    "n_diverged": diverged,
                    "n_censored": censored,
                });
            }
            Action::Run => {
                let tr = train_run(cfg, cfg.seed)?;
                emit(&mut manifest, "data.csv", data_csv(&tr.traj))?;
                save_params(&tr.model, &tr.meta, &out.join("model.ckpt"))?;
                manifest.artifacts.push("model.ckpt".into());
                emit(&mut manifest, "history.csv", history_csv(&tr.history))?;
                let eval = match cfg.task {
                    Task::Autonomous => {
                        let r = rollout_run(cfg, &tr)?;
                        emit(
                            &mut manifest,
                            "rollout.csv",
                            rollout_csv(&r, cfg.data.delta()),
                        )?;
                        rollout_metrics(&r)
                    }
                    Task::Infer => {
                        let r = infer_run(cfg, &tr)?;
                        emit(
                            &mut manifest,
                            "infer.csv",
                            infer_csv(&r, &cfg.target_vars),
                        )?;
                        infer_metrics(&r)
                    }
                };
                manifest.final_metrics = serde_json::json!({
                    "train": train_metrics(&tr.history),
                    "eval": eval,
                });
            }
        }
        Ok(())
    })();

    manifest.wall_time_s = start.elapsed().as_secs_f64();
    match result {
        Ok(()) => {
            manifest.write(&out.join("manifest.json"))?;
            Ok(manifest)
        }
        Err(e) => {
            manifest.error = Some(e.to_string());
            let _ = manifest.write(&out.join("manifest.json"));
            Err(e)
        }
    }
}
