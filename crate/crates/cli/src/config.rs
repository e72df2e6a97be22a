//! The run configuration: one JSON document pinning every degree of freedom
//! of a run. Parsing rejects unknown keys; `resolve` fills task-derived
//! fields (variable sets, model geometry) so the struct serializes back as a
//! complete echo of the effective settings.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use chaoscast_core::dynsys::DataProtocol;
use chaoscast_core::model::{Arch, ModelConfig};
use chaoscast_core::train::{SplitSizes, TrainConfig, Var};
use chaoscast_core::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Autonomous,
    Infer,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Autonomous => "autonomous",
            Task::Infer => "infer",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    pub arch: Arch,
    /// Measured variables fed to the model; defaulted by the task.
    pub observed_vars: Vec<Var>,
    /// Variables the model predicts; defaulted by the task.
    pub target_vars: Vec<Var>,
    pub data: DataProtocol,
    pub splits: SplitSizes,
    /// Model settings; `arch`, `d_x` and `d_out` are overwritten from the
    /// top-level fields during `resolve`.
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Autonomous rollout length in observation steps.
    pub horizon: usize,
    /// Master seed; the data, init and train streams all derive from it.
    pub seed: u64,
    /// Number of master seeds a sweep covers (seed, seed+1, ...).
    pub n_seeds: usize,
    /// Sweep worker-thread bound.
    pub jobs: usize,
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: Task::Autonomous,
            arch: Arch::Hybrid,
            observed_vars: Vec::new(),
            target_vars: Vec::new(),
            data: DataProtocol::default(),
            splits: SplitSizes::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            horizon: 500,
            seed: 0,
            n_seeds: 10,
            jobs: 1,
            out_dir: "runs/out".into(),
        }
    }
}

fn no_duplicates(name: &str, vars: &[Var]) -> Result<()> {
    for (i, v) in vars.iter().enumerate() {
        if vars[..i].contains(v) {
            return Err(Error::config(format!("{name} lists {v} twice")));
        }
    }
    Ok(())
}

impl RunConfig {
    /// Fill task-derived fields and validate every section. The result is
    /// the complete effective configuration.
    pub fn resolve(mut self) -> Result<Self> {
        let xyz = vec![Var::X, Var::Y, Var::Z];
        match self.task {
            Task::Autonomous => {
                if self.observed_vars.is_empty() {
                    self.observed_vars = xyz.clone();
                }
                if self.target_vars.is_empty() {
                    self.target_vars = xyz.clone();
                }
                if self.observed_vars != xyz || self.target_vars != xyz {
                    return Err(Error::config(
                        "autonomous task fixes observed_vars and target_vars to [x, y, z]",
                    ));
                }
            }
            Task::Infer => {
                if self.observed_vars.is_empty() || self.target_vars.is_empty() {
                    return Err(Error::config(
                        "infer task needs nonempty observed_vars and target_vars",
                    ));
                }
                no_duplicates("observed_vars", &self.observed_vars)?;
                no_duplicates("target_vars", &self.target_vars)?;
                if let Some(v) = self
                    .observed_vars
                    .iter()
                    .find(|v| self.target_vars.contains(v))
                {
                    return Err(Error::config(format!(
                        "observed_vars and target_vars must be disjoint; both hold {v}"
                    )));
                }
            }
        }
        self.model.arch = self.arch;
        self.model.d_x = self.observed_vars.len();
        self.model.d_out = self.target_vars.len();

        self.data
            .validate()
            .map_err(|e| Error::config(format!("data: {e}")))?;
        self.model.validate().map_err(|e| Error::config(format!("model: {e}")))?;
        self.train.validate().map_err(|e| Error::config(format!("train: {e}")))?;
        if self.splits.train == 0 || self.splits.val == 0 || self.splits.test == 0 {
            return Err(Error::config("splits must all be nonzero"));
        }
        if self.splits.total() > self.data.n_samples {
            return Err(Error::config(format!(
                "splits total {} exceeds n_samples {}",
                self.splits.total(),
                self.data.n_samples
            )));
        }
        if self.horizon == 0 {
            return Err(Error::config("horizon must be >= 1"));
        }
        if self.task == Task::Autonomous {
            if self.horizon > self.splits.test {
                return Err(Error::config(format!(
                    "horizon {} exceeds the test split of {}",
                    self.horizon, self.splits.test
                )));
            }
            if self.splits.val < self.model.i_w {
                return Err(Error::config(
                    "val split shorter than one input window; no rollout seed window",
                ));
            }
        }
        if self.n_seeds == 0 {
            return Err(Error::config("n_seeds must be >= 1"));
        }
        if self.jobs == 0 {
            return Err(Error::config("jobs must be >= 1"));
        }
        if self.out_dir.is_empty() {
            return Err(Error::config("out_dir must not be empty"));
        }
        Ok(self)
    }
}

/// Read a config file without resolving, so callers can apply CLI overrides
/// first.
pub fn load(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

/// Read, resolve and validate a run configuration.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    load(path)?.resolve()
}
