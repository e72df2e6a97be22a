//! Artifact serialization: CSV builders, the run manifest, and atomic file
//! writes. Every float is printed with 17 significant digits so files are
//! byte-reproducible and round-trip exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use chaoscast_core::dynsys::Trajectory;
use chaoscast_core::eval::{InferenceResult, RolloutResult, SweepStats};
use chaoscast_core::train::{TrainHistory, Var};
use chaoscast_core::Result;

use crate::config::RunConfig;

/// Shortest-exact formatting is locale-free but length-varying; a fixed
/// `e` format with 16 fractional digits keeps every f64 exact and columnar.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Write via a sibling tmp file and rename, so readers never see a partial
/// artifact. Parent directories are created on demand.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn data_csv(traj: &Trajectory) -> String {
    let mut out = String::from("t,x,y,z\n");
    for (i, s) in traj.states.iter().enumerate() {
        let t = traj.time_at(i);
        out.push_str(&fmt_f64(t));
        for v in s {
            out.push(',');
            out.push_str(&fmt_f64(*v));
        }
        out.push('\n');
    }
    out
}

pub fn history_csv(history: &TrainHistory) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,lr\n");
    for e in &history.epochs {
        out.push_str(&format!(
            "{},{},{},{}\n",
            e.epoch,
            fmt_f64(e.train_loss),
            fmt_f64(e.val_loss),
            fmt_f64(e.lr)
        ));
    }
    out
}

/// One row per forecast step; `t` is time since the forecast start.
pub fn rollout_csv(r: &RolloutResult, delta: f64) -> String {
    let mut out =
        String::from("step,t,truth_x,truth_y,truth_z,pred_x,pred_y,pred_z,nrmse\n");
    for j in 0..r.truth.len() {
        out.push_str(&format!("{},{}", j + 1, fmt_f64((j + 1) as f64 * delta)));
        for v in r.truth[j] {
            out.push(',');
            out.push_str(&fmt_f64(v));
        }
        for v in r.predicted[j] {
            out.push(',');
            out.push_str(&fmt_f64(v));
        }
        out.push(',');
        out.push_str(&fmt_f64(r.nrmse[j]));
        out.push('\n');
    }
    out
}

/// Header names the variables, e.g. `truth_z,pred_z` or `truth_|x|,pred_|x|`.
pub fn infer_csv(r: &InferenceResult, target_vars: &[Var]) -> String {
    let mut out = String::from("step");
    for v in target_vars {
        out.push_str(&format!(",truth_{v}"));
    }
    for v in target_vars {
        out.push_str(&format!(",pred_{v}"));
    }
    out.push_str(",rmse,cum_rmse\n");
    let d = r.d_out;
    for j in 0..r.len() {
        out.push_str(&format!("{}", j + 1));
        for v in &r.truth[j * d..(j + 1) * d] {
            out.push(',');
            out.push_str(&fmt_f64(*v));
        }
        for v in &r.inferred[j * d..(j + 1) * d] {
            out.push(',');
            out.push_str(&fmt_f64(*v));
        }
        out.push_str(&format!(",{},{}\n", fmt_f64(r.rmse[j]), fmt_f64(r.cum_rmse[j])));
    }
    out
}

pub fn sweep_csv(stats: &SweepStats, arch: &str) -> String {
    let mut out = String::from("seed,arch,vpt,censored\n");
    for e in &stats.entries {
        out.push_str(&format!(
            "{},{},{},{}\n",
            e.seed,
            arch,
            fmt_f64(e.vpt_lyapunov),
            e.censored
        ));
    }
    out
}

/// Machine-readable run summary written last; `error` is set when the run
/// stopped early and the manifest describes a partial output set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config: RunConfig,
    /// Artifact file names relative to the run directory, in write order.
    pub artifacts: Vec<String>,
    pub wall_time_s: f64,
    pub final_metrics: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RunManifest {
    pub fn new(config: RunConfig) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            artifacts: Vec::new(),
            wall_time_s: 0.0,
            final_metrics: serde_json::Value::Null,
            error: None,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        atomic_write(path, json.as_bytes())
    }
}
