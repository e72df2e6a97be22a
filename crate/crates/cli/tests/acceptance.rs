//! Acceptance suite: eight end-to-end criteria, each printing one pass/fail
//! line. The training-heavy criteria memoize per-run result summaries under
//! `target/tmp/`, keyed by the full resolved run configuration, so reruns
//! replay instantly; set CHAOSCAST_ACCEPT_NOCACHE=1 to force recomputation.
//! Every run is bit-deterministic in its configuration and master seed, so
//! replaying a summary is equivalent to recomputing it.

// Same rationale as in the core crate: `!(x > 1.0)` keeps NaN on the failing side.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use chaoscast_core::autodiff::check::{run_op_checks, CHECK_EPS};
use chaoscast_core::dynsys::{integrate, rk4_step, DataProtocol, LorenzParams, State, Trajectory};
use chaoscast_core::eval::{cum_mean, nrmse, rmse_series, vpt, Vpt, LLE};
use chaoscast_core::model::{grad_check_tiny, Arch};
use chaoscast_core::train::{split_and_window, window_count, NormStats, SplitSizes, Var};
use chaoscast_core::Error;

use chaoscast_cli::config::{RunConfig, Task};
use chaoscast_cli::runner::{infer_run, rollout_run, train_run};

// ---- reporting ----

/// The harness captures print macros; a locked stdout write is not, so the
/// one-line verdicts always reach the console.
fn emit(line: &str) {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{line}").ok();
}

fn report(n: u32, pass: bool, detail: &str) {
    emit(&format!(
        "criterion {n}: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    ));
}

fn progress(msg: &str) {
    emit(&format!("    [run] {msg}"));
}

// ---- per-run summary cache ----

/// Bump to invalidate summaries after any change that affects run results.
const CACHE_VERSION: u32 = 1;

fn cache_dir() -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance-cache");
    fs::create_dir_all(&dir).expect("create cache dir");
    dir
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

fn cached<T, F>(tag: &str, cfg: &RunConfig, compute: F) -> T
where
    T: Serialize + DeserializeOwned,
    F: FnOnce() -> T,
{
    let key = format!(
        "{CACHE_VERSION}|{tag}|{}",
        serde_json::to_string(cfg).expect("config serializes")
    );
    let path = cache_dir().join(format!("{tag}-{:016x}.json", fnv1a(key.as_bytes())));
    if std::env::var("CHAOSCAST_ACCEPT_NOCACHE").is_err() {
        if let Ok(text) = fs::read_to_string(&path) {
            if let Ok(v) = serde_json::from_str(&text) {
                return v;
            }
        }
    }
    let v = compute();
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, serde_json::to_vec(&v).expect("summary serializes")).expect("write cache");
    fs::rename(&tmp, &path).expect("publish cache");
    v
}

// ---- full-scale run helpers ----

#[derive(Clone, Serialize, Deserialize)]
struct RolloutSummary {
    vpt_lyapunov: f64,
    vpt_steps: usize,
    censored: bool,
    train_diverged: bool,
    epochs_run: usize,
    nrmse: Vec<f64>,
    wall_s: f64,
}

#[derive(Clone, Serialize, Deserialize)]
struct InferSummary {
    final_cum_rmse: f64,
    cum_rmse: Vec<f64>,
    train_diverged: bool,
    epochs_run: usize,
    wall_s: f64,
}

/// Reference-scale configuration: the resolved defaults, untouched. The 200
/// epoch cap matters: at 100 the recurrent models stop mid-improvement while
/// the transformer has already converged, which skews cross-arch comparisons.
fn reference_scale(arch: Arch, seed: u64) -> RunConfig {
    let cfg = RunConfig {
        arch,
        seed,
        ..RunConfig::default()
    };
    cfg.resolve().expect("reference config resolves")
}

fn infer_scale(arch: Arch, seed: u64, observed: Vec<Var>, target: Vec<Var>) -> RunConfig {
    let cfg = RunConfig {
        task: Task::Infer,
        arch,
        seed,
        observed_vars: observed,
        target_vars: target,
        ..RunConfig::default()
    };
    cfg.resolve().expect("inference config resolves")
}

fn rollout_summary(arch: Arch, seed: u64) -> RolloutSummary {
    let cfg = reference_scale(arch, seed);
    cached("rollout", &cfg, || {
        let t0 = Instant::now();
        match train_run(&cfg, cfg.seed) {
            Ok(tr) => {
                let r = rollout_run(&cfg, &tr).expect("rollout after training");
                let s = RolloutSummary {
                    vpt_lyapunov: r.vpt.lyapunov,
                    vpt_steps: r.vpt.steps,
                    censored: r.vpt.censored,
                    train_diverged: false,
                    epochs_run: tr.history.epochs.len(),
                    nrmse: r.nrmse,
                    wall_s: t0.elapsed().as_secs_f64(),
                };
                progress(&format!(
                    "rollout {arch} seed {seed}: vpt {:.2} LT, {} epochs, {:.0}s",
                    s.vpt_lyapunov, s.epochs_run, s.wall_s
                ));
                s
            }
            Err(Error::Diverged { epoch, .. }) => {
                progress(&format!(
                    "rollout {arch} seed {seed}: training diverged at epoch {epoch}"
                ));
                RolloutSummary {
                    vpt_lyapunov: 0.0,
                    vpt_steps: 0,
                    censored: false,
                    train_diverged: true,
                    epochs_run: epoch,
                    nrmse: Vec::new(),
                    wall_s: t0.elapsed().as_secs_f64(),
                }
            }
            Err(e) => panic!("rollout {arch} seed {seed}: {e}"),
        }
    })
}

fn infer_summary(observed: Var, target: &[Var], arch: Arch, seed: u64) -> InferSummary {
    let cfg = infer_scale(arch, seed, vec![observed], target.to_vec());
    cached("infer", &cfg, || {
        let t0 = Instant::now();
        match train_run(&cfg, cfg.seed) {
            Ok(tr) => {
                let r = infer_run(&cfg, &tr).expect("inference after training");
                let s = InferSummary {
                    final_cum_rmse: *r.cum_rmse.last().expect("nonempty test split"),
                    cum_rmse: r.cum_rmse,
                    train_diverged: false,
                    epochs_run: tr.history.epochs.len(),
                    wall_s: t0.elapsed().as_secs_f64(),
                };
                progress(&format!(
                    "infer {observed} {arch} seed {seed}: final cum_rmse {:.3}, {} epochs, {:.0}s",
                    s.final_cum_rmse, s.epochs_run, s.wall_s
                ));
                s
            }
            Err(Error::Diverged { epoch, .. }) => {
                progress(&format!(
                    "infer {observed} {arch} seed {seed}: training diverged at epoch {epoch}"
                ));
                InferSummary {
                    final_cum_rmse: f64::INFINITY,
                    cum_rmse: Vec::new(),
                    train_diverged: true,
                    epochs_run: epoch,
                    wall_s: t0.elapsed().as_secs_f64(),
                }
            }
            Err(e) => panic!("infer {observed} {arch} seed {seed}: {e}"),
        }
    })
}

fn median(mut xs: Vec<f64>) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.sort_by(|a, b| a.partial_cmp(b).expect("no NaN"));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

// ---- criterion 1 ----

#[test]
fn criterion_1_gradient_checks() {
    let t0 = Instant::now();
    let mut worst: f64 = 0.0;
    let mut at = String::new();
    for seed in 0..5u64 {
        for r in run_op_checks(seed, CHECK_EPS).expect("op suite runs") {
            if r.max_rel_err > worst {
                worst = r.max_rel_err;
                at = format!("{} seed {seed}", r.name);
            }
        }
        let m = grad_check_tiny(seed).expect("model check runs");
        if m > worst {
            worst = m;
            at = format!("model seed {seed}");
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = worst < 1e-4 && secs < 60.0;
    report(
        1,
        pass,
        &format!("worst rel err {worst:.2e} at {at}, 5 seeds, {secs:.1}s"),
    );
    assert!(pass, "worst {worst:.3e} at {at}, {secs:.1}s");
}

// ---- criterion 2 ----

fn steps_from(s0: State, h: f64, n: usize) -> State {
    let p = LorenzParams::default();
    let mut s = s0;
    for _ in 0..n {
        s = rk4_step(s, h, &p);
    }
    s
}

fn euclid(a: State, b: State) -> f64 {
    (0..3).map(|k| (a[k] - b[k]) * (a[k] - b[k])).sum::<f64>().sqrt()
}

#[test]
fn criterion_2_integrator_convergence() {
    let t0 = Instant::now();
    // An on-attractor start: the first recorded state of the default
    // protocol (post-transient).
    let fine = integrate(&DataProtocol::default(), &LorenzParams::default(), 42)
        .expect("default protocol integrates");
    let s0 = fine.states[0];

    // Endpoint error over 1 time unit against a much finer reference, for h
    // and h/2; fourth order means the ratio sits near 16.
    let reference = steps_from(s0, 2e-5, 50_000);
    let e_coarse = euclid(steps_from(s0, 2e-3, 500), reference);
    let e_fine = euclid(steps_from(s0, 1e-3, 1_000), reference);
    let ratio = e_coarse / e_fine;
    let ratio_ok = (12.0..=20.0).contains(&ratio);

    // The default-protocol trajectory itself against a 10x-finer reference
    // at t = 1: states are recorded every fine step, so index 1000 is one
    // time unit in.
    let got = fine.states[1000];
    let want = steps_from(s0, 1e-4, 10_000);
    let comp_err = (0..3).map(|k| (got[k] - want[k]).abs()).fold(0.0, f64::max);
    let traj_ok = comp_err < 1e-6;

    let secs = t0.elapsed().as_secs_f64();
    let pass = ratio_ok && traj_ok && secs < 60.0;
    report(
        2,
        pass,
        &format!("halving ratio {ratio:.2}, trajectory error {comp_err:.2e} at t=1, {secs:.1}s"),
    );
    assert!(pass, "ratio {ratio:.3}, component error {comp_err:.3e}");
}

// ---- criterion 3 ----

fn ref_row_norm(pred: &[f64], truth: &[f64], d: usize, j: usize) -> f64 {
    let mut s = 0.0;
    for k in 0..d {
        let e = pred[j * d + k] - truth[j * d + k];
        s += e * e;
    }
    s.sqrt()
}

fn ref_nrmse(pred: &[f64], truth: &[f64], d: usize) -> Vec<f64> {
    let n = truth.len() / d;
    (0..n)
        .map(|j| {
            let mut denom = 0.0;
            for i in 0..=j {
                for k in 0..d {
                    denom += truth[i * d + k] * truth[i * d + k];
                }
            }
            ref_row_norm(pred, truth, d, j) / (denom / (j + 1) as f64).sqrt()
        })
        .collect()
}

fn ref_rmse(pred: &[f64], truth: &[f64], d: usize) -> Vec<f64> {
    let n = truth.len() / d;
    (0..n).map(|j| ref_row_norm(pred, truth, d, j)).collect()
}

fn ref_cum(series: &[f64]) -> Vec<f64> {
    (0..series.len())
        .map(|j| series[..=j].iter().sum::<f64>() / (j + 1) as f64)
        .collect()
}

fn ref_vpt(e: &[f64], delta: f64) -> Vpt {
    for (j, &v) in e.iter().enumerate() {
        if v > 0.9 {
            return Vpt {
                steps: j + 1,
                lyapunov: (j + 1) as f64 * delta * LLE,
                censored: false,
            };
        }
    }
    Vpt {
        steps: e.len(),
        lyapunov: e.len() as f64 * delta * LLE,
        censored: true,
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * b.abs().max(1.0)
}

#[test]
fn criterion_3_metric_oracles() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1234);
    let mut worst = 0.0f64;
    let mut mismatches = 0usize;
    for _ in 0..100 {
        let n = rng.gen_range(1..=40);
        let d = rng.gen_range(1..=4);
        let pred: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let truth: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let delta = rng.gen_range(0.01..0.1);

        let got_e = nrmse(&pred, &truth, d).expect("nrmse");
        let want_e = ref_nrmse(&pred, &truth, d);
        let got_r = rmse_series(&pred, &truth, d).expect("rmse");
        let want_r = ref_rmse(&pred, &truth, d);
        let got_c = cum_mean(&got_r);
        let want_c = ref_cum(&got_r);
        for (a, b) in got_e
            .iter()
            .zip(&want_e)
            .chain(got_r.iter().zip(&want_r))
            .chain(got_c.iter().zip(&want_c))
        {
            worst = worst.max((a - b).abs() / b.abs().max(1.0));
            if !close(*a, *b) {
                mismatches += 1;
            }
        }
        let got_v = vpt(&got_e, delta, LLE, 0.9).expect("vpt");
        let want_v = ref_vpt(&got_e, delta);
        if got_v.steps != want_v.steps
            || got_v.censored != want_v.censored
            || !close(got_v.lyapunov, want_v.lyapunov)
        {
            mismatches += 1;
        }
    }

    // Sitting exactly on the threshold never triggers; the first strictly
    // greater value does.
    let flat = vpt(&[0.9; 7], 0.06, LLE, 0.9).expect("vpt");
    let boundary_ok = flat.censored && flat.steps == 7;
    let nudged = vpt(&[0.9, 0.9 + 1e-12, 0.1], 0.06, LLE, 0.9).expect("vpt");
    let nudge_ok = !nudged.censored && nudged.steps == 2;

    let secs = t0.elapsed().as_secs_f64();
    let pass = worst <= 1e-12 && mismatches == 0 && boundary_ok && nudge_ok && secs < 60.0;
    report(
        3,
        pass,
        &format!("100 random cases, worst rel dev {worst:.2e}, boundary exact, {secs:.1}s"),
    );
    assert!(pass, "worst {worst:.3e}, mismatches {mismatches}");
}

// ---- criterion 4 ----

#[test]
fn criterion_4_vpt_ordering() {
    let t0 = Instant::now();
    let archs = [Arch::Hybrid, Arch::Bilstm, Arch::Transformer];
    let mut runs: Vec<Vec<RolloutSummary>> = vec![Vec::new(); 3];
    // Seed-major so a cold cache yields one triple per ~half hour.
    for seed in 0..10u64 {
        for (i, &arch) in archs.iter().enumerate() {
            runs[i].push(rollout_summary(arch, seed));
        }
    }
    let med: Vec<f64> = runs
        .iter()
        .map(|rs| {
            median(
                rs.iter()
                    .filter(|r| !r.train_diverged)
                    .map(|r| r.vpt_lyapunov)
                    .collect(),
            )
        })
        .collect();
    let diverged: usize = runs
        .iter()
        .flatten()
        .filter(|r| r.train_diverged)
        .count();
    let (h, b, t) = (med[0], med[1], med[2]);
    let pass = h >= b && b >= t && h >= 3.0 && h >= 1.5 * t;
    let secs = t0.elapsed().as_secs_f64();
    report(
        4,
        pass,
        &format!(
            "median VPT over 10 seeds (LT): hybrid {h:.2} >= bilstm {b:.2} >= transformer {t:.2}, ratio {:.2}x, {diverged} diverged, {secs:.0}s",
            h / t
        ),
    );
    assert!(pass, "medians hybrid {h:.3} bilstm {b:.3} transformer {t:.3}");
}

// ---- criterion 5 ----

/// Spread of the running mean across its final quarter, relative to its
/// final value.
fn quarter_variation(s: &InferSummary) -> f64 {
    if s.cum_rmse.is_empty() {
        return f64::INFINITY;
    }
    let tail = &s.cum_rmse[s.cum_rmse.len() - s.cum_rmse.len() / 4..];
    let mn = tail.iter().copied().fold(f64::INFINITY, f64::min);
    let mx = tail.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (mx - mn) / s.final_cum_rmse
}

#[test]
fn criterion_5_inference_convergence() {
    let t0 = Instant::now();
    let archs = [Arch::Hybrid, Arch::Bilstm, Arch::Transformer];
    let cases = [
        (Var::X, [Var::Y, Var::Z]),
        (Var::Y, [Var::X, Var::Z]),
    ];
    let mut pass = true;
    let mut details = Vec::new();
    for (obs, target) in cases {
        let mut runs: Vec<Vec<InferSummary>> = vec![Vec::new(); 3];
        for seed in 0..10u64 {
            for (i, &arch) in archs.iter().enumerate() {
                runs[i].push(infer_summary(obs, &target, arch, seed));
            }
        }
        let hybrid = &runs[0];
        let med_final = median(hybrid.iter().map(|s| s.final_cum_rmse).collect());
        let med_var = median(hybrid.iter().map(quarter_variation).collect());
        let mut ordered = 0;
        for ((h, b), t) in runs[0].iter().zip(runs[1].iter()).zip(runs[2].iter()) {
            if h.final_cum_rmse <= b.final_cum_rmse && b.final_cum_rmse <= t.final_cum_rmse {
                ordered += 1;
            }
        }
        let case_ok = med_final <= 1.0 && med_var < 0.10 && ordered >= 7;
        pass &= case_ok;
        details.push(format!(
            "observe {obs}: hybrid median final {med_final:.3}, quarter spread {:.1}%, ordering {ordered}/10",
            100.0 * med_var
        ));
    }
    let secs = t0.elapsed().as_secs_f64();
    report(5, pass, &format!("{}, {secs:.0}s", details.join("; ")));
    assert!(pass, "{}", details.join("; "));
}

// ---- criterion 6 ----

#[test]
fn criterion_6_sign_symmetry() {
    let t0 = Instant::now();
    let seed = 1;
    let archs = [Arch::Hybrid, Arch::Bilstm, Arch::Transformer];
    let signed: Vec<f64> = archs
        .iter()
        .map(|&a| infer_summary(Var::Z, &[Var::X, Var::Y], a, seed).final_cum_rmse)
        .collect();
    let signed_fail = signed.iter().all(|&v| v > 3.0);
    let abs = infer_summary(Var::Z, &[Var::AbsX, Var::AbsY], Arch::Hybrid, seed);
    let abs_ok = abs.final_cum_rmse <= 1.0;
    let secs = t0.elapsed().as_secs_f64();
    let pass = signed_fail && abs_ok;
    report(
        6,
        pass,
        &format!(
            "signed (x,y) final cum_rmse hybrid {:.2}, bilstm {:.2}, transformer {:.2} (all > 3); |x|,|y| hybrid {:.3} (<= 1), {secs:.0}s",
            signed[0], signed[1], signed[2], abs.final_cum_rmse
        ),
    );
    assert!(pass, "signed {signed:?}, abs {:.3}", abs.final_cum_rmse);
}

// ---- criterion 7 ----

const TINY_AUTONOMOUS: &str = r#"{
  "task": "autonomous",
  "arch": "hybrid",
  "data": { "n_samples": 170 },
  "splits": { "train": 100, "val": 30, "test": 30 },
  "model": { "i_w": 4, "hidden_dim": 8, "d_m": 8, "n_layers": 1, "n_heads": 2, "ffn_dim": 16 },
  "train": { "max_epochs": 3 },
  "horizon": 10,
  "seed": 11
}"#;

const TINY_INFER: &str = r#"{
  "task": "infer",
  "arch": "hybrid",
  "observed_vars": ["z"],
  "target_vars": ["|x|", "|y|"],
  "data": { "n_samples": 170 },
  "splits": { "train": 100, "val": 30, "test": 30 },
  "model": { "i_w": 4, "hidden_dim": 8, "d_m": 8, "n_layers": 1, "n_heads": 2, "ffn_dim": 16 },
  "train": { "max_epochs": 3 },
  "seed": 11
}"#;

fn run_bin(args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_chaoscast"));
    cmd.args(args);
    cmd.env_remove("CHAOSCAST_OUT_DIR");
    cmd.output().expect("spawn chaoscast")
}

fn repeat_identical(dir: &Path, cfg_text: &str, mode: &[&str], files: &[&str]) -> bool {
    let cfg_path = dir.join("cfg.json");
    fs::write(&cfg_path, cfg_text).expect("write config");
    let mut same = true;
    let out_a = dir.join("a");
    let out_b = dir.join("b");
    for out in [&out_a, &out_b] {
        let mut args: Vec<String> = mode.iter().map(|s| s.to_string()).collect();
        args.push("--config".into());
        args.push(cfg_path.display().to_string());
        args.push("--out".into());
        args.push(out.display().to_string());
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        let r = run_bin(&refs);
        assert_eq!(
            r.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&r.stderr)
        );
    }
    for f in files {
        same &= fs::read(out_a.join(f)).expect(f) == fs::read(out_b.join(f)).expect(f);
    }
    same
}

#[test]
fn criterion_7_byte_reproducibility() {
    let t0 = Instant::now();
    let tmp = tempfile::tempdir().expect("tempdir");
    let auto_ok = repeat_identical(
        &{
            let d = tmp.path().join("auto");
            fs::create_dir_all(&d).unwrap();
            d
        },
        TINY_AUTONOMOUS,
        &["run"],
        &["data.csv", "history.csv", "rollout.csv", "model.ckpt"],
    );
    let infer_ok = repeat_identical(
        &{
            let d = tmp.path().join("infer");
            fs::create_dir_all(&d).unwrap();
            d
        },
        TINY_INFER,
        &["run"],
        &["data.csv", "history.csv", "infer.csv", "model.ckpt"],
    );
    let sweep_ok = repeat_identical(
        &{
            let d = tmp.path().join("sweep");
            fs::create_dir_all(&d).unwrap();
            d
        },
        TINY_AUTONOMOUS,
        &["sweep", "--n-seeds", "2"],
        &["sweep.csv"],
    );
    let secs = t0.elapsed().as_secs_f64();
    let pass = auto_ok && infer_ok && sweep_ok;
    report(
        7,
        pass,
        &format!(
            "repeated runs byte-identical: autonomous {auto_ok}, infer {infer_ok}, sweep {sweep_ok}, {secs:.1}s"
        ),
    );
    assert!(pass);
}

// ---- criterion 8 ----

#[test]
fn criterion_8_normalization_windowing() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let mut fails: Vec<String> = Vec::new();

    // Endpoint mapping is exact: the fitted minimum lands on -1 and the
    // maximum on +1 with no rounding slack.
    for _ in 0..20 {
        let n = rng.gen_range(2..50);
        let states: Vec<State> = (0..n)
            .map(|_| {
                [
                    rng.gen_range(-20.0..20.0),
                    rng.gen_range(-20.0..20.0),
                    rng.gen_range(0.0..50.0),
                ]
            })
            .collect();
        let norm = NormStats::fit(&states, &Var::ALL).expect("fit");
        for v in Var::ALL {
            let vals: Vec<f64> = states.iter().map(|s| v.extract(s)).collect();
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if norm.normalize_scalar(v, lo).unwrap() != -1.0 {
                fails.push(format!("min of {v} not exactly -1"));
            }
            if norm.normalize_scalar(v, hi).unwrap() != 1.0 {
                fails.push(format!("max of {v} not exactly +1"));
            }
            // Round trip within 1e-12 relative, inside and outside the range.
            for _ in 0..10 {
                let x = rng.gen_range(lo - 5.0..hi + 5.0);
                let back = norm
                    .denormalize_scalar(v, norm.normalize_scalar(v, x).unwrap())
                    .unwrap();
                if (back - x).abs() > 1e-12 * x.abs().max(1.0) {
                    fails.push(format!("round trip of {v} off by {:.2e}", (back - x).abs()));
                }
            }
        }
    }

    // Window counting matches brute force.
    for _ in 0..200 {
        let len = rng.gen_range(0..60);
        let i_w = rng.gen_range(1..8);
        let o_w = rng.gen_range(1..4);
        let brute = (0..len)
            .filter(|t| t + i_w + o_w <= len)
            .count();
        if window_count(len, i_w, o_w) != brute {
            fails.push(format!("window_count({len},{i_w},{o_w})"));
        }
    }

    // Normalization never sees the val/test splits: growing ramp data puts
    // the extremes in the test split, which then maps beyond +1.
    let states: Vec<State> = (0..60).map(|i| [i as f64, 2.0 * i as f64, -(i as f64)]).collect();
    let traj = Trajectory::new(0.0, 0.1, states.clone()).expect("trajectory");
    let splits = SplitSizes {
        train: 30,
        val: 15,
        test: 15,
    };
    let vars = [Var::X, Var::Y, Var::Z];
    let (ds_train, _, ds_test) =
        split_and_window(&traj, &vars, &vars, 3, 1, &splits).expect("split");
    let only_train = NormStats::fit(&states[..30], &vars).expect("fit train");
    for v in vars {
        for probe in [-3.0, 0.0, 17.5, 40.0] {
            let a = ds_train.norm.normalize_scalar(v, probe).unwrap();
            let b = only_train.normalize_scalar(v, probe).unwrap();
            if a.to_bits() != b.to_bits() {
                fails.push(format!("split norm differs from train-only fit for {v}"));
            }
        }
    }
    if !(ds_test.norm.normalize_scalar(Var::X, 59.0).unwrap() > 1.0) {
        fails.push("test extremes do not exceed +1 under train stats".into());
    }
    let n_expected = window_count(30, 3, 1);
    if ds_train.n != n_expected {
        fails.push(format!("train windows {} != {n_expected}", ds_train.n));
    }

    let secs = t0.elapsed().as_secs_f64();
    let pass = fails.is_empty();
    report(
        8,
        pass,
        &format!(
            "endpoints exact, round trip <= 1e-12, window arithmetic, no leakage, {secs:.1}s{}",
            if pass { String::new() } else { format!("; fails: {}", fails.join(", ")) }
        ),
    );
    assert!(pass, "{}", fails.join("; "));
}
