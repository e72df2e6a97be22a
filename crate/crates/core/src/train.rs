//! Dataset preparation (per-variable min-max normalization fit on the train
//! split only, sliding windows that never straddle split boundaries) and the
//! optimization protocol: MSE over windows, Adam, plateau LR halving, early
//! stopping, and best-validation-checkpoint restore.

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::dynsys::{State, Trajectory};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::Mode;

/// Validation loss must drop by more than this to count as an improvement.
pub const IMPROVE_EPS: f64 = 1e-12;

const EVAL_CHUNK: usize = 256;

/// Observable quantity a model input or target can be wired to. The absolute
/// variants take |.| before normalization, and stats are fit on the
/// transformed values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Var {
    #[serde(rename = "x")]
    X,
    #[serde(rename = "y")]
    Y,
    #[serde(rename = "z")]
    Z,
    #[serde(rename = "|x|")]
    AbsX,
    #[serde(rename = "|y|")]
    AbsY,
}

impl Var {
    pub fn extract(self, s: &State) -> f64 {
        match self {
            Var::X => s[0],
            Var::Y => s[1],
            Var::Z => s[2],
            Var::AbsX => s[0].abs(),
            Var::AbsY => s[1].abs(),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Var::X => "x",
            Var::Y => "y",
            Var::Z => "z",
            Var::AbsX => "|x|",
            Var::AbsY => "|y|",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "x" => Ok(Var::X),
            "y" => Ok(Var::Y),
            "z" => Ok(Var::Z),
            "|x|" => Ok(Var::AbsX),
            "|y|" => Ok(Var::AbsY),
            other => Err(Error::config(format!(
                "unknown variable '{other}' (expected x|y|z||x|||y|)"
            ))),
        }
    }

    pub const ALL: [Var; 5] = [Var::X, Var::Y, Var::Z, Var::AbsX, Var::AbsY];
}

impl std::fmt::Display for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Per-variable min/max, mapping [min,max] onto [-1,+1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub vars: Vec<Var>,
    pub mins: Vec<f64>,
    pub maxs: Vec<f64>,
}

impl NormStats {
    /// Fit on a state sequence (the training split).
    pub fn fit(states: &[State], vars: &[Var]) -> Result<Self> {
        if states.is_empty() || vars.is_empty() {
            return Err(Error::argument("normalization needs data and variables"));
        }
        let mut mins = vec![f64::INFINITY; vars.len()];
        let mut maxs = vec![f64::NEG_INFINITY; vars.len()];
        for s in states {
            for (k, var) in vars.iter().enumerate() {
                let v = var.extract(s);
                mins[k] = mins[k].min(v);
                maxs[k] = maxs[k].max(v);
            }
        }
        for (k, var) in vars.iter().enumerate() {
            if !(maxs[k] - mins[k]).is_finite() || maxs[k] <= mins[k] {
                return Err(Error::argument(format!(
                    "degenerate range for {var}: [{}, {}]",
                    mins[k], maxs[k]
                )));
            }
        }
        Ok(Self {
            vars: vars.to_vec(),
            mins,
            maxs,
        })
    }

    /// Stats that make normalization the identity (range [-1,+1]).
    pub fn identity(vars: &[Var]) -> Self {
        Self {
            vars: vars.to_vec(),
            mins: vec![-1.0; vars.len()],
            maxs: vec![1.0; vars.len()],
        }
    }

    fn index_of(&self, var: Var) -> Result<usize> {
        self.vars
            .iter()
            .position(|v| *v == var)
            .ok_or_else(|| Error::argument(format!("no stats for variable {var}")))
    }

    pub fn normalize_scalar(&self, var: Var, v: f64) -> Result<f64> {
        let k = self.index_of(var)?;
        Ok(2.0 * (v - self.mins[k]) / (self.maxs[k] - self.mins[k]) - 1.0)
    }

    pub fn denormalize_scalar(&self, var: Var, v: f64) -> Result<f64> {
        let k = self.index_of(var)?;
        Ok((v + 1.0) / 2.0 * (self.maxs[k] - self.mins[k]) + self.mins[k])
    }

    pub fn normalize(&self, var: Var, xs: &[f64]) -> Result<Vec<f64>> {
        let k = self.index_of(var)?;
        let (lo, hi) = (self.mins[k], self.maxs[k]);
        Ok(xs.iter().map(|v| 2.0 * (v - lo) / (hi - lo) - 1.0).collect())
    }

    pub fn denormalize(&self, var: Var, xs: &[f64]) -> Result<Vec<f64>> {
        let k = self.index_of(var)?;
        let (lo, hi) = (self.mins[k], self.maxs[k]);
        Ok(xs.iter().map(|v| (v + 1.0) / 2.0 * (hi - lo) + lo).collect())
    }
}

/// Chronological split lengths, consumed in order train, val, test.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 4000,
            val: 500,
            test: 500,
        }
    }
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    /// Index ranges of the three splits within the observation sequence.
    pub fn ranges(
        &self,
    ) -> (
        std::ops::Range<usize>,
        std::ops::Range<usize>,
        std::ops::Range<usize>,
    ) {
        let a = self.train;
        let b = a + self.val;
        let c = b + self.test;
        (0..a, a..b, b..c)
    }
}

/// Windows a series of `len` rows yields with the given window lengths.
pub fn window_count(len: usize, i_w: usize, o_w: usize) -> usize {
    if len < i_w + o_w {
        0
    } else {
        len - i_w - o_w + 1
    }
}

/// Normalized, windowed samples from one split: inputs [n x I_w x d_x] and
/// flattened targets [n x O_w*d_out], stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowedDataset {
    pub inputs: Vec<f64>,
    pub targets: Vec<f64>,
    pub n: usize,
    pub i_w: usize,
    pub o_w: usize,
    pub d_x: usize,
    pub d_out: usize,
    pub input_vars: Vec<Var>,
    pub target_vars: Vec<Var>,
    pub norm: NormStats,
}

impl WindowedDataset {
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        inputs: Vec<f64>,
        targets: Vec<f64>,
        i_w: usize,
        o_w: usize,
        input_vars: Vec<Var>,
        target_vars: Vec<Var>,
        norm: NormStats,
    ) -> Result<Self> {
        let (d_x, d_out) = (input_vars.len(), target_vars.len());
        let per_in = i_w * d_x;
        let per_tg = o_w * d_out;
        if per_in == 0 || per_tg == 0 || !inputs.len().is_multiple_of(per_in) {
            return Err(Error::argument("window data does not tile the given shape"));
        }
        let n = inputs.len() / per_in;
        if targets.len() != n * per_tg {
            return Err(Error::argument("input/target sample counts disagree"));
        }
        Ok(Self {
            inputs,
            targets,
            n,
            i_w,
            o_w,
            d_x,
            d_out,
            input_vars,
            target_vars,
            norm,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Gather the indexed samples into a [B x I_w x d_x] tensor.
    pub fn input_batch(&self, idx: &[usize]) -> Result<Tensor> {
        self.gather(idx, &self.inputs, self.i_w * self.d_x, |b| {
            vec![b, self.i_w, self.d_x]
        })
    }

    /// Gather the indexed targets into a [B x O_w*d_out] tensor.
    pub fn target_batch(&self, idx: &[usize]) -> Result<Tensor> {
        self.gather(idx, &self.targets, self.o_w * self.d_out, |b| {
            vec![b, self.o_w * self.d_out]
        })
    }

    fn gather(
        &self,
        idx: &[usize],
        flat: &[f64],
        stride: usize,
        shape: impl Fn(usize) -> Vec<usize>,
    ) -> Result<Tensor> {
        let mut out = Vec::with_capacity(idx.len() * stride);
        for &i in idx {
            if i >= self.n {
                return Err(Error::argument(format!("sample index {i} out of range")));
            }
            out.extend_from_slice(&flat[i * stride..(i + 1) * stride]);
        }
        Tensor::new(&shape(idx.len()), out)
    }
}

fn window_rows(
    in_rows: &[f64],
    tg_rows: &[f64],
    len: usize,
    d_x: usize,
    d_out: usize,
    i_w: usize,
    o_w: usize,
) -> (Vec<f64>, Vec<f64>) {
    let n = window_count(len, i_w, o_w);
    let mut inputs = Vec::with_capacity(n * i_w * d_x);
    let mut targets = Vec::with_capacity(n * o_w * d_out);
    for t in 0..n {
        inputs.extend_from_slice(&in_rows[t * d_x..(t + i_w) * d_x]);
        targets.extend_from_slice(&tg_rows[(t + i_w) * d_out..(t + i_w + o_w) * d_out]);
    }
    (inputs, targets)
}

/// Split a trajectory chronologically, fit normalization on the train split,
/// and window each split independently. Observations beyond the split total
/// are ignored.
pub fn split_and_window(
    traj: &Trajectory,
    input_vars: &[Var],
    target_vars: &[Var],
    i_w: usize,
    o_w: usize,
    splits: &SplitSizes,
) -> Result<(WindowedDataset, WindowedDataset, WindowedDataset)> {
    if input_vars.is_empty() || target_vars.is_empty() || i_w == 0 || o_w == 0 {
        return Err(Error::argument("empty variable set or zero window length"));
    }
    if traj.len() < splits.total() {
        return Err(Error::argument(format!(
            "trajectory has {} observations, splits need {}",
            traj.len(),
            splits.total()
        )));
    }
    let (r_train, r_val, r_test) = splits.ranges();
    for (name, r) in [("train", &r_train), ("val", &r_val), ("test", &r_test)] {
        if r.len() < i_w + o_w {
            return Err(Error::argument(format!(
                "{name} split of {} observations is shorter than one window",
                r.len()
            )));
        }
    }

    let mut stat_vars = input_vars.to_vec();
    for v in target_vars {
        if !stat_vars.contains(v) {
            stat_vars.push(*v);
        }
    }
    let norm = NormStats::fit(&traj.states[r_train.clone()], &stat_vars)?;

    let mut out = Vec::with_capacity(3);
    for r in [r_train, r_val, r_test] {
        let states = &traj.states[r];
        let mut in_rows = Vec::with_capacity(states.len() * input_vars.len());
        let mut tg_rows = Vec::with_capacity(states.len() * target_vars.len());
        for s in states {
            for v in input_vars {
                in_rows.push(norm.normalize_scalar(*v, v.extract(s))?);
            }
            for v in target_vars {
                tg_rows.push(norm.normalize_scalar(*v, v.extract(s))?);
            }
        }
        let (inputs, targets) = window_rows(
            &in_rows,
            &tg_rows,
            states.len(),
            input_vars.len(),
            target_vars.len(),
            i_w,
            o_w,
        );
        out.push(WindowedDataset::from_parts(
            inputs,
            targets,
            i_w,
            o_w,
            input_vars.to_vec(),
            target_vars.to_vec(),
            norm.clone(),
        )?);
    }
    let test = out.pop().unwrap();
    let val = out.pop().unwrap();
    let train = out.pop().unwrap();
    Ok((train, val, test))
}

/// Mean over samples of the squared Euclidean error, in normalized units.
pub fn mse_loss(tape: &Tape, pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.shape() != target.shape() || pred.rank() != 2 {
        return Err(Error::ShapeMismatch {
            op: "mse_loss",
            lhs: pred.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let diff = tape.sub(pred, target)?;
    let sq = tape.mul(&diff, &diff)?;
    let per_sample = tape.sum_axis(&sq, 1)?;
    tape.mean_all(&per_sample)
}

// ---- Adam ----

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// First/second moment buffers, one pair per parameter tensor.
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            t: 0,
        }
    }

    /// One bias-corrected update, mutating parameters in place. Gradients
    /// must be finite and aligned with the parameter list.
    pub fn step(
        &mut self,
        params: Vec<&mut Tensor>,
        grads: &[Vec<f64>],
        lr: f64,
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::argument("optimizer state does not match parameters"));
        }
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if g.len() != m.len() || p.len() != m.len() {
                return Err(Error::argument("gradient length mismatch"));
            }
            if !g.iter().all(|x| x.is_finite()) {
                return Err(Error::NonFinite {
                    context: "gradient".into(),
                });
            }
            let data = p.make_mut();
            for i in 0..data.len() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                data[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

// ---- schedule ----

/// Plateau tracker shared by LR halving and early stopping: both counters
/// derive from epochs since the last strict improvement.
pub(crate) struct PlateauSchedule {
    best: f64,
    stall: usize,
    lr: f64,
    plateau: usize,
    stop: usize,
    factor: f64,
}

impl PlateauSchedule {
    pub(crate) fn new(lr: f64, plateau: usize, stop: usize, factor: f64) -> Self {
        Self {
            best: f64::INFINITY,
            stall: 0,
            lr,
            plateau,
            stop,
            factor,
        }
    }

    pub(crate) fn lr(&self) -> f64 {
        self.lr
    }

    pub(crate) fn best(&self) -> f64 {
        self.best
    }

    /// Feed one validation loss; returns (improved, stop). The LR halves
    /// whenever the stall count reaches a multiple of the plateau patience,
    /// unless the early-stop patience is hit first.
    pub(crate) fn observe(&mut self, val: f64) -> (bool, bool) {
        if val < self.best - IMPROVE_EPS {
            self.best = val;
            self.stall = 0;
            return (true, false);
        }
        self.stall += 1;
        if self.stall >= self.stop {
            return (false, true);
        }
        if self.stall.is_multiple_of(self.plateau) {
            self.lr *= self.factor;
        }
        (false, false)
    }
}

// ---- training loop ----

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub max_epochs: usize,
    pub plateau_patience: usize,
    pub lr_factor: f64,
    pub early_stop_patience: usize,
    /// Seed of the training stream (shuffling and dropout).
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch: 16,
            max_epochs: 200,
            plateau_patience: 5,
            lr_factor: 0.5,
            early_stop_patience: 15,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::config("lr must be positive"));
        }
        if self.batch == 0 || self.max_epochs == 0 {
            return Err(Error::config("batch and max_epochs must be >= 1"));
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return Err(Error::config("patience values must be >= 1"));
        }
        if !(0.0 < self.lr_factor && self.lr_factor <= 1.0) {
            return Err(Error::config("lr_factor must be in (0,1]"));
        }
        Ok(())
    }
}

/// Per-epoch record kept by the training loop; `lr` is the rate used during
/// that epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

/// Full epoch history of one training run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

impl TrainHistory {
    pub fn best_val(&self) -> Option<f64> {
        self.epochs.iter().map(|e| e.val_loss).fold(None, |acc, v| {
            Some(acc.map_or(v, |a: f64| a.min(v)))
        })
    }
}

/// Split one stream seed into (shuffle, dropout) child seeds.
pub fn derive_streams(seed: u64) -> (u64, u64) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (r.next_u64(), r.next_u64())
}

/// Mean per-sample loss over a whole dataset, dropout off, in eval chunks.
pub fn eval_loss(model: &Model, ds: &WindowedDataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::argument("cannot evaluate an empty dataset"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut sum = 0.0;
    let idx: Vec<usize> = (0..ds.n).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let tape = Tape::new();
        let x = ds.input_batch(chunk)?;
        let y = ds.target_batch(chunk)?;
        let out = model.forward_batch(&tape, &x, Mode::Eval, &mut rng)?;
        let diff = tape.sub(&out, &y)?;
        let sq = tape.mul(&diff, &diff)?;
        sum += tape.sum_all(&sq)?.item()?;
    }
    let loss = sum / ds.n as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            context: "validation loss".into(),
        });
    }
    Ok(loss)
}

fn check_model_matches(model: &Model, ds: &WindowedDataset, what: &str) -> Result<()> {
    let cfg = model.config();
    if ds.d_x != cfg.d_x || ds.i_w != cfg.i_w || ds.o_w != cfg.o_w || ds.d_out != cfg.d_out {
        return Err(Error::ConfigMismatch(format!(
            "{what} dataset windows ({}x{} -> {}x{}) do not fit the model ({}x{} -> {}x{})",
            ds.i_w, ds.d_x, ds.o_w, ds.d_out, cfg.i_w, cfg.d_x, cfg.o_w, cfg.d_out
        )));
    }
    Ok(())
}

/// Train in place and return the epoch history; on return the model holds
/// the parameters of the best validation epoch. A non-finite loss or
/// gradient aborts with the partial history attached.
pub fn train_model(
    model: &mut Model,
    train_ds: &WindowedDataset,
    val_ds: &WindowedDataset,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    cfg.validate()?;
    check_model_matches(model, train_ds, "train")?;
    check_model_matches(model, val_ds, "val")?;
    if train_ds.is_empty() || val_ds.is_empty() {
        return Err(Error::argument("train and val splits must be non-empty"));
    }

    let (shuffle_seed, dropout_seed) = derive_streams(cfg.seed);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(dropout_seed);

    let mut adam = AdamState::new(&model.params());
    let mut sched = PlateauSchedule::new(
        cfg.lr,
        cfg.plateau_patience,
        cfg.early_stop_patience,
        cfg.lr_factor,
    );
    let mut best_params: Vec<Tensor> = model.params().into_iter().cloned().collect();
    let mut epochs: Vec<EpochStats> = Vec::new();

    let diverge = |epoch: usize, epochs: &[EpochStats], e: Error| -> Error {
        match e {
            Error::NonFinite { .. } => Error::Diverged {
                epoch,
                history: TrainHistory {
                    epochs: epochs.to_vec(),
                },
            },
            other => other,
        }
    };

    for epoch in 1..=cfg.max_epochs {
        let lr_used = sched.lr();
        let mut order: Vec<usize> = (0..train_ds.n).collect();
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let step = (|| -> Result<Vec<Vec<f64>>> {
                let tape = Tape::new();
                let tracked = model.tracked(&tape);
                let x = train_ds.input_batch(chunk)?;
                let y = train_ds.target_batch(chunk)?;
                let out = tracked.forward_batch(&tape, &x, Mode::Train, &mut dropout_rng)?;
                let loss = mse_loss(&tape, &out, &y)?;
                loss_sum += loss.item()? * chunk.len() as f64;
                let grads = tape.backward(&loss)?;
                tracked
                    .params()
                    .iter()
                    .map(|p| grads.wrt(p).map(|g| g.to_vec()))
                    .collect()
            })();
            let gvecs = step.map_err(|e| diverge(epoch, &epochs, e))?;
            adam.step(model.params_mut(), &gvecs, lr_used)
                .map_err(|e| diverge(epoch, &epochs, e))?;
        }

        let train_loss = loss_sum / train_ds.n as f64;
        if !train_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                history: TrainHistory { epochs },
            });
        }
        let val_loss = eval_loss(model, val_ds).map_err(|e| diverge(epoch, &epochs, e))?;
        epochs.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            lr: lr_used,
        });

        let (improved, stop) = sched.observe(val_loss);
        if improved {
            best_params = model.params().into_iter().cloned().collect();
        }
        if stop {
            break;
        }
    }

    for (slot, saved) in model.params_mut().into_iter().zip(best_params) {
        *slot = saved;
    }
    debug_assert!(sched.best().is_finite());
    Ok(TrainHistory { epochs })
}
