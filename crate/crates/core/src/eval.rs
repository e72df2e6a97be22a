//! The two evaluation tasks and their metrics: autonomous recursive rollout
//! scored by NRMSE and valid prediction time, and inference of unmeasured
//! variables scored by instantaneous and cumulative RMSE, plus multi-seed
//! sweep statistics. All metrics work in original (denormalized) units.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::dynsys::State;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::Mode;
use crate::train::{NormStats, Var};

/// Largest Lyapunov exponent of the Lorenz system at the canonical
/// parameters, treated as a known constant; only used to express times in
/// Lyapunov units.
pub const LLE: f64 = 0.9056;

/// NRMSE level whose first strict crossing ends the valid prediction time.
pub const VPT_THRESHOLD: f64 = 0.9;

const INFER_CHUNK: usize = 256;

/// NRMSE series: E_j = |pred_j - truth_j| / sqrt(mean_{i<=j} |truth_i|^2),
/// rows of width `d`, cumulative truth-only denominator.
pub fn nrmse(pred: &[f64], truth: &[f64], d: usize) -> Result<Vec<f64>> {
    if d == 0 || pred.len() != truth.len() || !pred.len().is_multiple_of(d) || pred.is_empty() {
        return Err(Error::argument("nrmse needs equal, nonempty [n x d] inputs"));
    }
    let n = pred.len() / d;
    let mut out = Vec::with_capacity(n);
    let mut denom_sum = 0.0;
    for j in 0..n {
        let row = j * d;
        let mut err_sq = 0.0;
        let mut truth_sq = 0.0;
        for k in 0..d {
            let e = pred[row + k] - truth[row + k];
            err_sq += e * e;
            truth_sq += truth[row + k] * truth[row + k];
        }
        denom_sum += truth_sq;
        if denom_sum == 0.0 {
            return Err(Error::argument(format!(
                "all-zero truth prefix at step {} leaves NRMSE undefined",
                j + 1
            )));
        }
        out.push(err_sq.sqrt() / (denom_sum / (j + 1) as f64).sqrt());
    }
    Ok(out)
}

/// Per-step error norms |pred_j - truth_j| over rows of width `d`.
pub fn rmse_series(pred: &[f64], truth: &[f64], d: usize) -> Result<Vec<f64>> {
    if d == 0 || pred.len() != truth.len() || !pred.len().is_multiple_of(d) {
        return Err(Error::argument("rmse needs equal [n x d] inputs"));
    }
    Ok(pred
        .chunks_exact(d)
        .zip(truth.chunks_exact(d))
        .map(|(p, t)| {
            p.iter()
                .zip(t)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .collect())
}

/// Running arithmetic mean of a series.
pub fn cum_mean(series: &[f64]) -> Vec<f64> {
    let mut sum = 0.0;
    series
        .iter()
        .enumerate()
        .map(|(i, v)| {
            sum += v;
            sum / (i + 1) as f64
        })
        .collect()
}

/// A valid-prediction-time verdict: `steps` is the 1-based index of the
/// first strict threshold crossing, or the horizon when censored.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vpt {
    pub steps: usize,
    pub lyapunov: f64,
    pub censored: bool,
}

pub fn vpt(e: &[f64], delta: f64, lle: f64, threshold: f64) -> Result<Vpt> {
    if e.is_empty() {
        return Err(Error::argument("vpt needs a nonempty error series"));
    }
    if delta <= 0.0 || lle <= 0.0 {
        return Err(Error::argument("vpt needs positive delta and lle"));
    }
    let crossing = e.iter().position(|&v| v > threshold);
    let (steps, censored) = match crossing {
        Some(i) => (i + 1, false),
        None => (e.len(), true),
    };
    Ok(Vpt {
        steps,
        lyapunov: steps as f64 * delta * lle,
        censored,
    })
}

// ---- autonomous rollout ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutResult {
    /// Predicted states in original units; rows after a divergence are NaN.
    pub predicted: Vec<State>,
    pub truth: Vec<State>,
    /// E_j series; steps after a divergence score infinite.
    pub nrmse: Vec<f64>,
    pub vpt: Vpt,
    /// 0-based step at which a non-finite prediction ended the feedback loop.
    pub diverged_at: Option<usize>,
}

/// Variables of the autonomous task, in row order.
pub const STATE_VARS: [Var; 3] = [Var::X, Var::Y, Var::Z];

/// Recursive forecast driven by `step`: the closure maps the current
/// normalized window (I_w rows of 3) to the next normalized state row.
/// Predictions feed back into the window; ground truth is only used for
/// scoring. A non-finite prediction ends the loop and the remaining steps
/// score as diverged.
pub fn autonomous_rollout_with<F>(
    mut step: F,
    norm: &NormStats,
    seed_window: &[State],
    truth: &[State],
    delta: f64,
) -> Result<RolloutResult>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if seed_window.is_empty() || truth.is_empty() {
        return Err(Error::argument("rollout needs a seed window and a horizon"));
    }
    let i_w = seed_window.len();
    let mut window = Vec::with_capacity(i_w * 3);
    for s in seed_window {
        for v in STATE_VARS {
            window.push(norm.normalize_scalar(v, v.extract(s))?);
        }
    }

    let n_steps = truth.len();
    let mut predicted: Vec<State> = Vec::with_capacity(n_steps);
    let mut diverged_at = None;
    for j in 0..n_steps {
        let next = match step(&window) {
            Ok(row) => row,
            Err(Error::NonFinite { .. }) => {
                diverged_at = Some(j);
                break;
            }
            Err(e) => return Err(e),
        };
        if next.len() != 3 {
            return Err(Error::argument("rollout step must emit one state row"));
        }
        if !next.iter().all(|v| v.is_finite()) {
            diverged_at = Some(j);
            break;
        }
        let mut state = [0.0; 3];
        for (k, v) in STATE_VARS.iter().enumerate() {
            state[k] = norm.denormalize_scalar(*v, next[k])?;
        }
        predicted.push(state);
        window.copy_within(3.., 0);
        window[(i_w - 1) * 3..].copy_from_slice(&next);
    }

    let done = predicted.len();
    let flat_pred: Vec<f64> = predicted.iter().flatten().copied().collect();
    let flat_truth: Vec<f64> = truth[..done].iter().flatten().copied().collect();
    let mut e = if done > 0 {
        nrmse(&flat_pred, &flat_truth, 3)?
    } else {
        Vec::new()
    };
    e.resize(n_steps, f64::INFINITY);
    predicted.resize(n_steps, [f64::NAN; 3]);

    let verdict = vpt(&e, delta, LLE, VPT_THRESHOLD)?;
    Ok(RolloutResult {
        predicted,
        truth: truth.to_vec(),
        nrmse: e,
        vpt: verdict,
        diverged_at,
    })
}

/// Rollout driven by a trained model in eval mode.
pub fn autonomous_rollout(
    model: &Model,
    norm: &NormStats,
    seed_window: &[State],
    truth: &[State],
    delta: f64,
) -> Result<RolloutResult> {
    let cfg = model.config();
    if cfg.d_x != 3 || cfg.d_out != 3 || cfg.o_w != 1 {
        return Err(Error::ConfigMismatch(
            "autonomous rollout needs a 3 -> 3 model with O_w = 1".into(),
        ));
    }
    if seed_window.len() != cfg.i_w {
        return Err(Error::ConfigMismatch(format!(
            "seed window has {} states, model wants {}",
            seed_window.len(),
            cfg.i_w
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    autonomous_rollout_with(
        |window| {
            let tape = Tape::new();
            let x = crate::autodiff::Tensor::new(&[1, cfg.i_w, 3], window.to_vec())?;
            let out = model.forward_batch(&tape, &x, Mode::Eval, &mut rng)?;
            Ok(out.to_vec())
        },
        norm,
        seed_window,
        truth,
        delta,
    )
}

// ---- inference of unmeasured variables ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult {
    /// Inferred target rows [n x d_out], original units.
    pub inferred: Vec<f64>,
    /// True target rows [n x d_out], original units.
    pub truth: Vec<f64>,
    pub d_out: usize,
    pub rmse: Vec<f64>,
    pub cum_rmse: Vec<f64>,
}

impl InferenceResult {
    pub fn len(&self) -> usize {
        self.rmse.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rmse.is_empty()
    }

    pub fn final_cum_rmse(&self) -> Option<f64> {
        self.cum_rmse.last().copied()
    }
}

fn infer_score(
    inferred: Vec<f64>,
    states: &[State],
    target_vars: &[Var],
    i_w: usize,
) -> Result<InferenceResult> {
    let d_out = target_vars.len();
    let n = states.len() - i_w;
    let mut truth = Vec::with_capacity(n * d_out);
    for s in &states[i_w..] {
        for v in target_vars {
            truth.push(v.extract(s));
        }
    }
    let rmse = rmse_series(&inferred, &truth, d_out)?;
    let cum_rmse = cum_mean(&rmse);
    Ok(InferenceResult {
        inferred,
        truth,
        d_out,
        rmse,
        cum_rmse,
    })
}

/// Inference driven by `step`, which maps one normalized observation window
/// (I_w rows of the observed variables) to a normalized target row. The
/// window always holds true observations; predictions are never fed back.
pub fn infer_unmeasured_with<F>(
    mut step: F,
    norm: &NormStats,
    input_vars: &[Var],
    target_vars: &[Var],
    i_w: usize,
    states: &[State],
) -> Result<InferenceResult>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if input_vars.is_empty() || target_vars.is_empty() || i_w == 0 {
        return Err(Error::argument("inference needs variables and a window"));
    }
    if states.len() < i_w + 1 {
        return Err(Error::argument(format!(
            "series of {} states is too short for a {i_w}-window and one target",
            states.len()
        )));
    }
    let d_x = input_vars.len();
    let d_out = target_vars.len();
    let n = states.len() - i_w;
    let mut inferred = Vec::with_capacity(n * d_out);
    let mut window = vec![0.0; i_w * d_x];
    for t in 0..n {
        for (r, s) in states[t..t + i_w].iter().enumerate() {
            for (k, v) in input_vars.iter().enumerate() {
                window[r * d_x + k] = norm.normalize_scalar(*v, v.extract(s))?;
            }
        }
        let row = step(&window)?;
        if row.len() != d_out {
            return Err(Error::argument("inference step emitted a wrong-width row"));
        }
        for (k, v) in target_vars.iter().enumerate() {
            inferred.push(norm.denormalize_scalar(*v, row[k])?);
        }
    }
    infer_score(inferred, states, target_vars, i_w)
}

/// Inference driven by a trained model in eval mode, batched over window
/// positions.
pub fn infer_unmeasured(
    model: &Model,
    norm: &NormStats,
    input_vars: &[Var],
    target_vars: &[Var],
    states: &[State],
) -> Result<InferenceResult> {
    let cfg = model.config();
    if cfg.d_x != input_vars.len() || cfg.d_out != target_vars.len() || cfg.o_w != 1 {
        return Err(Error::ConfigMismatch(format!(
            "inference wants a {} -> {} model with O_w = 1, got {} -> {}x{}",
            input_vars.len(),
            target_vars.len(),
            cfg.d_x,
            cfg.o_w,
            cfg.d_out
        )));
    }
    let i_w = cfg.i_w;
    if states.len() < i_w + 1 {
        return Err(Error::argument(format!(
            "series of {} states is too short for a {i_w}-window and one target",
            states.len()
        )));
    }
    let d_x = input_vars.len();
    let d_out = target_vars.len();
    let n = states.len() - i_w;

    let mut rows = Vec::with_capacity(states.len() * d_x);
    for s in states {
        for v in input_vars {
            rows.push(norm.normalize_scalar(*v, v.extract(s))?);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut inferred_norm = Vec::with_capacity(n * d_out);
    let mut start = 0;
    while start < n {
        let b = (n - start).min(INFER_CHUNK);
        let mut flat = Vec::with_capacity(b * i_w * d_x);
        for t in start..start + b {
            flat.extend_from_slice(&rows[t * d_x..(t + i_w) * d_x]);
        }
        let tape = Tape::new();
        let x = crate::autodiff::Tensor::new(&[b, i_w, d_x], flat)?;
        let out = model.forward_batch(&tape, &x, Mode::Eval, &mut rng)?;
        inferred_norm.extend_from_slice(out.data());
        start += b;
    }

    let mut inferred = Vec::with_capacity(n * d_out);
    for row in inferred_norm.chunks_exact(d_out) {
        for (k, v) in target_vars.iter().enumerate() {
            inferred.push(norm.denormalize_scalar(*v, row[k])?);
        }
    }
    infer_score(inferred, states, target_vars, i_w)
}

/// Target-variable mapping of the absolute-value inference task: x and y
/// become |x| and |y|; everything else is unchanged.
pub fn abs_target_vars(vars: &[Var]) -> Vec<Var> {
    vars.iter()
        .map(|v| match v {
            Var::X => Var::AbsX,
            Var::Y => Var::AbsY,
            other => *other,
        })
        .collect()
}

// ---- seed sweeps ----

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub seed: u64,
    pub vpt_lyapunov: f64,
    pub censored: bool,
    /// True when the run itself failed (training blow-up); scored as vpt 0
    /// and excluded from median/mean.
    pub diverged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepStats {
    /// One entry per master seed, sorted by seed.
    pub entries: Vec<SweepEntry>,
    /// Median/mean over completed (non-diverged) runs.
    pub median: f64,
    pub mean: f64,
}

fn median_of(mut xs: Vec<f64>) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Run one rollout per master seed and aggregate VPTs. A `Diverged` run is
/// recorded with vpt 0; any other error aborts the sweep. `jobs` bounds the
/// worker threads.
pub fn seed_sweep<F>(seeds: &[u64], jobs: usize, run_one: F) -> Result<SweepStats>
where
    F: Fn(u64) -> Result<RolloutResult> + Sync,
{
    if seeds.is_empty() {
        return Err(Error::argument("sweep needs at least one seed"));
    }
    let outcomes: Vec<(u64, Result<RolloutResult>)> = if jobs > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::argument(format!("worker pool: {e}")))?;
        pool.install(|| {
            seeds
                .par_iter()
                .map(|&s| (s, run_one(s)))
                .collect()
        })
    } else {
        seeds.iter().map(|&s| (s, run_one(s))).collect()
    };

    let mut entries = Vec::with_capacity(seeds.len());
    for (seed, outcome) in outcomes {
        match outcome {
            Ok(r) => entries.push(SweepEntry {
                seed,
                vpt_lyapunov: r.vpt.lyapunov,
                censored: r.vpt.censored,
                diverged: false,
            }),
            Err(Error::Diverged { .. }) => entries.push(SweepEntry {
                seed,
                vpt_lyapunov: 0.0,
                censored: false,
                diverged: true,
            }),
            Err(e) => return Err(e),
        }
    }
    entries.sort_by_key(|e| e.seed);
    let completed: Vec<f64> = entries
        .iter()
        .filter(|e| !e.diverged)
        .map(|e| e.vpt_lyapunov)
        .collect();
    let mean = if completed.is_empty() {
        f64::NAN
    } else {
        completed.iter().sum::<f64>() / completed.len() as f64
    };
    Ok(SweepStats {
        entries,
        median: median_of(completed),
        mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Arch, Model, ModelConfig};
    use crate::train::TrainHistory;
    use rand::Rng;

    fn rand_rows(n: usize, d: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n * d).map(|_| rng.gen_range(-5.0..5.0)).collect()
    }

    #[test]
    fn lle_constant() {
        assert_eq!(LLE, 0.9056);
        assert_eq!(VPT_THRESHOLD, 0.9);
    }

    #[test]
    fn nrmse_perfect_predictor_is_zero() {
        let truth = rand_rows(40, 3, 1);
        let e = nrmse(&truth, &truth, 3).unwrap();
        assert!(e.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn nrmse_single_term() {
        // Truth norm 2, error norm 1.
        let e = nrmse(&[1.0, 0.0, 0.0], &[2.0, 0.0, 0.0], 3).unwrap();
        assert_eq!(e, vec![0.5]);
    }

    #[test]
    fn nrmse_matches_scalar_oracle() {
        let pred = rand_rows(50, 3, 2);
        let truth = rand_rows(50, 3, 3);
        let got = nrmse(&pred, &truth, 3).unwrap();
        for j in 0..50 {
            let err: f64 = (0..3)
                .map(|k| (pred[j * 3 + k] - truth[j * 3 + k]).powi(2))
                .sum::<f64>()
                .sqrt();
            let mut denom = 0.0;
            for i in 0..=j {
                denom += (0..3).map(|k| truth[i * 3 + k].powi(2)).sum::<f64>();
            }
            let expect = err / (denom / (j + 1) as f64).sqrt();
            assert!((got[j] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn nrmse_zero_truth_prefix_is_error() {
        let pred = [1.0, 1.0, 1.0, 1.0, 1.0, 1.0];
        let truth = [0.0, 0.0, 0.0, 1.0, 2.0, 3.0];
        assert!(nrmse(&pred, &truth, 3).is_err());
    }

    #[test]
    fn nrmse_rotation_invariant() {
        let (s, c) = (0.6f64, 0.8f64);
        let rotate = |rows: &[f64]| -> Vec<f64> {
            rows.chunks_exact(3)
                .flat_map(|r| [c * r[0] - s * r[1], s * r[0] + c * r[1], r[2]])
                .collect()
        };
        let pred = rand_rows(30, 3, 4);
        let truth = rand_rows(30, 3, 5);
        let base = nrmse(&pred, &truth, 3).unwrap();
        let rot = nrmse(&rotate(&pred), &rotate(&truth), 3).unwrap();
        for (a, b) in base.iter().zip(&rot) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn nrmse_of_zero_predictor_on_constant_norm_truth() {
        // |truth_i| = 2 for all i, so E_j = 2 / 2 = 1 exactly.
        let truth: Vec<f64> = (0..25)
            .flat_map(|i| {
                let a = i as f64 * 0.7;
                [2.0 * a.cos(), 2.0 * a.sin(), 0.0]
            })
            .collect();
        let pred = vec![0.0; truth.len()];
        let e = nrmse(&pred, &truth, 3).unwrap();
        for v in e {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rmse_is_error_norm() {
        let e = rmse_series(&[1.0, 2.0], &[0.0, 0.0], 2).unwrap();
        assert!((e[0] - 5.0f64.sqrt()).abs() < 1e-15);
        let pred = rand_rows(20, 2, 6);
        let truth = rand_rows(20, 2, 7);
        let got = rmse_series(&pred, &truth, 2).unwrap();
        for j in 0..20 {
            let expect = ((pred[2 * j] - truth[2 * j]).powi(2)
                + (pred[2 * j + 1] - truth[2 * j + 1]).powi(2))
            .sqrt();
            assert!((got[j] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn cum_mean_is_exact_running_mean() {
        let xs = rand_rows(100, 1, 8);
        let got = cum_mean(&xs);
        for j in 0..xs.len() {
            let direct = xs[..=j].iter().sum::<f64>() / (j + 1) as f64;
            assert_eq!(got[j], direct);
        }
    }

    #[test]
    fn vpt_first_strict_crossing() {
        let v = vpt(&[0.1, 0.95, 0.2], 0.06, LLE, 0.9).unwrap();
        assert_eq!(v.steps, 2);
        assert!(!v.censored);
        assert!((v.lyapunov - 2.0 * 0.06 * LLE).abs() < 1e-15);

        let first = vpt(&[1.0], 0.06, LLE, 0.9).unwrap();
        assert_eq!(first.steps, 1);
        assert!((first.lyapunov - 0.06 * LLE).abs() < 1e-15);
    }

    #[test]
    fn vpt_boundary_does_not_trigger() {
        let v = vpt(&[0.9, 0.9], 0.06, LLE, 0.9).unwrap();
        assert!(v.censored);
        assert_eq!(v.steps, 2);
    }

    #[test]
    fn vpt_zero_series_censored_at_horizon() {
        let v = vpt(&[0.0; 7], 0.5, 2.0, 0.9).unwrap();
        assert!(v.censored);
        assert_eq!(v.steps, 7);
        assert_eq!(v.lyapunov, 7.0 * 0.5 * 2.0);
    }

    #[test]
    fn vpt_monotone_in_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let e: Vec<f64> = (0..30).map(|_| rng.gen_range(0.0..2.0)).collect();
            let lo = vpt(&e, 0.06, LLE, 0.5).unwrap();
            let mid = vpt(&e, 0.06, LLE, 0.9).unwrap();
            let hi = vpt(&e, 0.06, LLE, 1.3).unwrap();
            assert!(lo.steps <= mid.steps && mid.steps <= hi.steps);
        }
    }

    fn spiral_states(n: usize) -> Vec<State> {
        (0..n)
            .map(|i| {
                let a = i as f64 * 0.31;
                [8.0 * a.cos(), 8.0 * a.sin(), 4.0 + (i as f64 * 0.11).sin()]
            })
            .collect()
    }

    #[test]
    fn rollout_oracle_model_never_crosses() {
        let states = spiral_states(60);
        let (seed, truth) = states.split_at(10);
        let norm = NormStats::fit(seed, &STATE_VARS).unwrap();
        let mut idx = 0;
        let r = autonomous_rollout_with(
            |_| {
                let s = &truth[idx];
                idx += 1;
                Ok(STATE_VARS
                    .iter()
                    .map(|v| norm.normalize_scalar(*v, v.extract(s)).unwrap())
                    .collect())
            },
            &norm,
            seed,
            truth,
            0.06,
        )
        .unwrap();
        assert!(r.vpt.censored);
        assert_eq!(r.vpt.steps, truth.len());
        assert!(r.nrmse.iter().all(|&v| v < 1e-9));
        assert!(r.diverged_at.is_none());
    }

    #[test]
    fn rollout_zero_predictor_crosses_immediately() {
        // Identity stats keep normalized zero equal to original zero; truth
        // has constant norm, so E_1 = 1 > 0.9.
        let truth: Vec<State> = (0..20)
            .map(|i| {
                let a = i as f64 * 0.42;
                [0.5 * a.cos(), 0.5 * a.sin(), 0.0]
            })
            .collect();
        let norm = NormStats::identity(&STATE_VARS);
        let r = autonomous_rollout_with(
            |_| Ok(vec![0.0, 0.0, 0.0]),
            &norm,
            &truth[..5],
            &truth,
            0.06,
        )
        .unwrap();
        assert_eq!(r.vpt.steps, 1);
        assert!(!r.vpt.censored);
    }

    #[test]
    fn rollout_window_feedback_contract() {
        // With identity stats, the window after k steps must hold the tail
        // of the seed followed by the k predictions.
        let norm = NormStats::identity(&STATE_VARS);
        let seed: Vec<State> = (0..4).map(|i| [i as f64 * 0.25, 0.0, 0.0]).collect();
        let truth: Vec<State> = (0..6).map(|_| [0.3, 0.4, 0.0]).collect();
        let mut seen: Vec<Vec<f64>> = Vec::new();
        let mut k = 0;
        let r = autonomous_rollout_with(
            |w| {
                seen.push(w.to_vec());
                k += 1;
                Ok(vec![k as f64 * 0.01, 0.0, 0.0])
            },
            &norm,
            &seed,
            &truth,
            0.06,
        )
        .unwrap();
        assert_eq!(seen.len(), 6);
        // Window 0 is the seed itself.
        assert_eq!(seen[0][0], 0.0);
        assert_eq!(seen[0][9], 0.75);
        // Window 2 holds seed rows 2..4 then predictions 1, 2.
        let w2 = &seen[2];
        assert_eq!(&w2[0..3], &[0.5, 0.0, 0.0]);
        assert_eq!(&w2[3..6], &[0.75, 0.0, 0.0]);
        assert_eq!(&w2[6..9], &[0.01, 0.0, 0.0]);
        assert_eq!(&w2[9..12], &[0.02, 0.0, 0.0]);
        // Denormalizing through the affine map costs one rounding.
        assert!((r.predicted[0][0] - 0.01).abs() < 1e-15);
    }

    #[test]
    fn rollout_divergence_scores_remaining_steps() {
        let truth = spiral_states(12);
        let norm = NormStats::identity(&STATE_VARS);
        let mut k = 0;
        let r = autonomous_rollout_with(
            |_| {
                k += 1;
                if k > 4 {
                    Ok(vec![f64::NAN, 0.0, 0.0])
                } else {
                    Ok(vec![0.9, 0.9, 0.9])
                }
            },
            &norm,
            &truth[..3],
            &truth,
            0.06,
        )
        .unwrap();
        assert_eq!(r.diverged_at, Some(4));
        assert_eq!(r.nrmse.len(), 12);
        assert!(r.nrmse[4..].iter().all(|v| v.is_infinite()));
        assert!(r.predicted[4].iter().all(|v| v.is_nan()));
        assert!(!r.vpt.censored);
        assert!(r.vpt.steps <= 5);
    }

    fn tiny_model(arch: Arch) -> (Model, ModelConfig) {
        let cfg = ModelConfig {
            arch,
            d_x: 3,
            d_out: 3,
            i_w: 4,
            o_w: 1,
            hidden_dim: 4,
            d_m: 4,
            n_layers: 1,
            n_heads: 2,
            ffn_dim: 5,
            dropout: 0.0,
        };
        (Model::init(cfg, 42).unwrap(), cfg)
    }

    #[test]
    fn rollout_is_deterministic() {
        let (model, _) = tiny_model(Arch::Hybrid);
        let states = spiral_states(30);
        let norm = NormStats::fit(&states[..10], &STATE_VARS).unwrap();
        let (seed, truth) = states.split_at(4);
        let a = autonomous_rollout(&model, &norm, seed, truth, 0.06).unwrap();
        let b = autonomous_rollout(&model, &norm, seed, truth, 0.06).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rollout_checks_model_shape() {
        let (model, cfg) = tiny_model(Arch::Bilstm);
        let states = spiral_states(20);
        let norm = NormStats::fit(&states, &STATE_VARS).unwrap();
        let err = autonomous_rollout(&model, &norm, &states[..cfg.i_w + 1], &states, 0.06);
        assert!(matches!(err, Err(Error::ConfigMismatch(_))));
    }

    #[test]
    fn infer_oracle_has_zero_rmse() {
        let states = spiral_states(40);
        let vars_in = [Var::X];
        let vars_out = [Var::Y, Var::Z];
        let norm = NormStats::fit(&states, &[Var::X, Var::Y, Var::Z]).unwrap();
        let mut pos = 0;
        let r = infer_unmeasured_with(
            |_| {
                let s = &states[pos + 5];
                pos += 1;
                Ok(vars_out
                    .iter()
                    .map(|v| norm.normalize_scalar(*v, v.extract(s)).unwrap())
                    .collect())
            },
            &norm,
            &vars_in,
            &vars_out,
            5,
            &states,
        )
        .unwrap();
        assert_eq!(r.len(), 35);
        assert!(r.rmse.iter().all(|&v| v < 1e-12));
        assert!(r.cum_rmse.iter().all(|&v| v < 1e-12));
    }

    #[test]
    fn infer_model_matches_unbatched_path() {
        let cfg = ModelConfig {
            arch: Arch::Hybrid,
            d_x: 1,
            d_out: 2,
            i_w: 5,
            o_w: 1,
            hidden_dim: 3,
            d_m: 4,
            n_layers: 1,
            n_heads: 2,
            ffn_dim: 4,
            dropout: 0.0,
        };
        let model = Model::init(cfg, 77).unwrap();
        let states = spiral_states(50);
        let vars_in = [Var::X];
        let vars_out = [Var::Y, Var::Z];
        let norm = NormStats::fit(&states[..20], &[Var::X, Var::Y, Var::Z]).unwrap();
        let batched =
            infer_unmeasured(&model, &norm, &vars_in, &vars_out, &states).unwrap();
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let single = infer_unmeasured_with(
            |w| {
                let x = crate::autodiff::Tensor::new(&[1, cfg.i_w, 1], w.to_vec())?;
                Ok(model.forward_batch(&tape, &x, Mode::Eval, &mut rng)?.to_vec())
            },
            &norm,
            &vars_in,
            &vars_out,
            cfg.i_w,
            &states,
        )
        .unwrap();
        assert_eq!(batched.len(), single.len());
        for (a, b) in batched.inferred.iter().zip(&single.inferred) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in batched.cum_rmse.iter().zip(&single.cum_rmse) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn infer_rejects_short_series() {
        let (model, cfg) = tiny_model(Arch::Hybrid);
        let states = spiral_states(cfg.i_w);
        let norm = NormStats::identity(&STATE_VARS);
        assert!(infer_unmeasured(&model, &norm, &STATE_VARS, &STATE_VARS, &states).is_err());
    }

    #[test]
    fn abs_target_mapping() {
        assert_eq!(
            abs_target_vars(&[Var::X, Var::Y, Var::Z]),
            vec![Var::AbsX, Var::AbsY, Var::Z]
        );
        assert_eq!(abs_target_vars(&[Var::AbsX]), vec![Var::AbsX]);
    }

    fn fake_rollout(v: f64, censored: bool) -> RolloutResult {
        RolloutResult {
            predicted: vec![[0.0; 3]],
            truth: vec![[0.0; 3]],
            nrmse: vec![0.0],
            vpt: Vpt {
                steps: 1,
                lyapunov: v,
                censored,
            },
            diverged_at: None,
        }
    }

    #[test]
    fn sweep_single_seed_median_equals_mean() {
        let s = seed_sweep(&[7], 1, |_| Ok(fake_rollout(3.25, false))).unwrap();
        assert_eq!(s.median, 3.25);
        assert_eq!(s.mean, 3.25);
        assert_eq!(s.entries.len(), 1);
        assert_eq!(s.entries[0].seed, 7);
    }

    #[test]
    fn sweep_sorts_by_seed_and_is_order_invariant() {
        let value = |s: u64| (s % 5) as f64 + 0.5;
        let a = seed_sweep(&[3, 1, 2, 9, 4], 1, |s| Ok(fake_rollout(value(s), false))).unwrap();
        let b = seed_sweep(&[9, 4, 3, 2, 1], 1, |s| Ok(fake_rollout(value(s), false))).unwrap();
        assert_eq!(a.median, b.median);
        assert_eq!(a.mean, b.mean);
        let seeds: Vec<u64> = a.entries.iter().map(|e| e.seed).collect();
        assert_eq!(seeds, vec![1, 2, 3, 4, 9]);
    }

    #[test]
    fn sweep_median_arithmetic() {
        let s = seed_sweep(&[1, 2, 3, 4], 1, |k| Ok(fake_rollout(k as f64, false))).unwrap();
        assert_eq!(s.median, 2.5);
        assert_eq!(s.mean, 2.5);
        let odd = seed_sweep(&[1, 2, 3], 1, |k| Ok(fake_rollout(k as f64, false))).unwrap();
        assert_eq!(odd.median, 2.0);
    }

    #[test]
    fn sweep_records_diverged_runs_as_zero() {
        let s = seed_sweep(&[1, 2, 3], 1, |k| {
            if k == 2 {
                Err(Error::Diverged {
                    epoch: 1,
                    history: TrainHistory::default(),
                })
            } else {
                Ok(fake_rollout(4.0, false))
            }
        })
        .unwrap();
        assert_eq!(s.entries.len(), 3);
        let d = &s.entries[1];
        assert!(d.diverged);
        assert_eq!(d.vpt_lyapunov, 0.0);
        // Median/mean over the two completed runs only.
        assert_eq!(s.median, 4.0);
        assert_eq!(s.mean, 4.0);
    }

    #[test]
    fn sweep_parallel_matches_serial() {
        let value = |s: u64| (s as f64).sqrt();
        let serial = seed_sweep(&[1, 2, 3, 4, 5], 1, |s| Ok(fake_rollout(value(s), false))).unwrap();
        let parallel =
            seed_sweep(&[1, 2, 3, 4, 5], 3, |s| Ok(fake_rollout(value(s), false))).unwrap();
        assert_eq!(serial, parallel);
    }
}
