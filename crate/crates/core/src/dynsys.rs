//! Lorenz trajectory generation: classical RK4 at a fine step, transient
//! discard, and subsampling to the observation interval.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// State vector `[x, y, z]`.
pub type State = [f64; 3];

/// Parameters of the Lorenz system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LorenzParams {
    pub sigma: f64,
    pub rho: f64,
    pub beta: f64,
}

impl Default for LorenzParams {
    fn default() -> Self {
        LorenzParams {
            sigma: 10.0,
            rho: 28.0,
            beta: 8.0 / 3.0,
        }
    }
}

impl LorenzParams {
    pub fn validate(&self) -> Result<()> {
        if ![self.sigma, self.rho, self.beta].iter().all(|v| v.is_finite()) {
            return Err(Error::argument("Lorenz parameters must be finite"));
        }
        Ok(())
    }
}

/// Uniformly sampled trajectory: state `i` sits at time `t0 + i * dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub t0: f64,
    pub dt: f64,
    pub states: Vec<State>,
}

impl Trajectory {
    pub fn new(t0: f64, dt: f64, states: Vec<State>) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::argument(format!("dt must be positive, got {dt}")));
        }
        if states.is_empty() {
            return Err(Error::argument("trajectory must hold at least one state"));
        }
        Ok(Trajectory { t0, dt, states })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn time_at(&self, idx: usize) -> f64 {
        self.t0 + idx as f64 * self.dt
    }
}

/// Data-generation protocol: fine integration step, observation stride and
/// count, and how long to integrate before recording anything.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataProtocol {
    /// Fine integration step `h`.
    pub h: f64,
    /// Observations keep one fine state per `sampling_stride` steps.
    pub sampling_stride: usize,
    /// Number of observation points the protocol yields.
    pub n_samples: usize,
    /// Time units integrated and discarded before recording starts.
    pub transient_discard_time: f64,
    /// Explicit initial state; when absent one is drawn uniformly from
    /// [-10, 10]^3 using the data seed.
    pub init_state: Option<State>,
}

impl Default for DataProtocol {
    fn default() -> Self {
        DataProtocol {
            h: 1e-3,
            sampling_stride: 60,
            n_samples: 5000,
            transient_discard_time: 100.0,
            init_state: None,
        }
    }
}

impl DataProtocol {
    /// Observation interval `delta = stride * h`.
    pub fn delta(&self) -> f64 {
        self.sampling_stride as f64 * self.h
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.h > 0.0) || !self.h.is_finite() {
            return Err(Error::argument(format!("h must be positive, got {}", self.h)));
        }
        if self.sampling_stride < 1 {
            return Err(Error::argument("sampling_stride must be >= 1"));
        }
        if self.n_samples < 1 {
            return Err(Error::argument("n_samples must be >= 1"));
        }
        if !(self.transient_discard_time >= 0.0) {
            return Err(Error::argument("transient_discard_time must be >= 0"));
        }
        if let Some(s) = self.init_state {
            if !s.iter().all(|v| v.is_finite()) {
                return Err(Error::argument("init_state must be finite"));
            }
        }
        Ok(())
    }
}

/// Right-hand side of the Lorenz equations.
pub fn lorenz_deriv(state: State, params: &LorenzParams) -> Result<State> {
    if !state.iter().all(|v| v.is_finite()) {
        return Err(Error::argument(format!("non-finite state {state:?}")));
    }
    let [x, y, z] = state;
    Ok([
        params.sigma * (y - x),
        x * (params.rho - z) - y,
        x * y - params.beta * z,
    ])
}

/// One classical RK4 update under an arbitrary autonomous vector field.
pub fn rk4_step_with<F>(field: F, state: State, h: f64) -> State
where
    F: Fn(State) -> State,
{
    let ax = |s: State, k: State, c: f64| [s[0] + c * k[0], s[1] + c * k[1], s[2] + c * k[2]];
    let k1 = field(state);
    let k2 = field(ax(state, k1, h / 2.0));
    let k3 = field(ax(state, k2, h / 2.0));
    let k4 = field(ax(state, k3, h));
    let mut out = state;
    for i in 0..3 {
        out[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    out
}

/// One RK4 step of the Lorenz field. Finiteness is checked by the caller
/// (the integrator knows the step index).
pub fn rk4_step(state: State, h: f64, params: &LorenzParams) -> State {
    let p = *params;
    rk4_step_with(
        move |s| {
            let [x, y, z] = s;
            [p.sigma * (y - x), x * (p.rho - z) - y, x * y - p.beta * z]
        },
        state,
        h,
    )
}

/// Integrate the protocol: settle the transient, then record
/// `n_samples * stride + 1` fine-step states. The recorded span ends at
/// t = 0, so `t0 = -(n_samples * stride) * h`.
pub fn integrate(protocol: &DataProtocol, params: &LorenzParams, seed: u64) -> Result<Trajectory> {
    protocol.validate()?;
    params.validate()?;

    let mut state = match protocol.init_state {
        Some(s) => s,
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            [
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
            ]
        }
    };

    let n_transient = (protocol.transient_discard_time / protocol.h).round() as usize;
    for step in 0..n_transient {
        state = rk4_step(state, protocol.h, params);
        if !state.iter().all(|v| v.is_finite()) {
            return Err(Error::Integration { step });
        }
    }

    let n_record = protocol.n_samples * protocol.sampling_stride + 1;
    let mut states = Vec::with_capacity(n_record);
    states.push(state);
    for step in 1..n_record {
        state = rk4_step(state, protocol.h, params);
        if !state.iter().all(|v| v.is_finite()) {
            return Err(Error::Integration {
                step: n_transient + step,
            });
        }
        states.push(state);
    }

    let t0 = -((n_record - 1) as f64) * protocol.h;
    Trajectory::new(t0, protocol.h, states)
}

/// Keep every `stride`-th state (1-based: positions stride, 2*stride, ...),
/// so the default protocol's 300001 fine states become exactly 5000
/// observations at `delta = stride * h`.
pub fn subsample(traj: &Trajectory, stride: usize) -> Result<Trajectory> {
    if stride < 1 {
        return Err(Error::argument("stride must be >= 1"));
    }
    if stride > traj.len() {
        return Err(Error::argument(format!(
            "stride {} exceeds trajectory length {}",
            stride,
            traj.len()
        )));
    }
    let kept: Vec<State> = traj
        .states
        .iter()
        .skip(stride - 1)
        .step_by(stride)
        .copied()
        .collect();
    Trajectory::new(
        traj.t0 + (stride - 1) as f64 * traj.dt,
        stride as f64 * traj.dt,
        kept,
    )
}

/// Convenience pipeline: integrate the protocol and subsample to the
/// observation series (`n_samples` points at `delta`).
pub fn generate_observations(
    protocol: &DataProtocol,
    params: &LorenzParams,
    seed: u64,
) -> Result<Trajectory> {
    let fine = integrate(protocol, params, seed)?;
    let mut obs = subsample(&fine, protocol.sampling_stride)?;
    // A stride of 1 keeps the final recorded state as well; trim so the
    // series is always exactly n_samples points ending one fine step before
    // t = 0, as for every other stride.
    obs.states.truncate(protocol.n_samples);
    debug_assert_eq!(obs.len(), protocol.n_samples);
    Ok(obs)
}
