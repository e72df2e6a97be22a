//! Central-finite-difference gradient verification, plus the named suite
//! behind the `gradcheck` CLI subcommand.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::tape::Tape;
use super::tensor::Tensor;

/// Checks below pass when the worst relative error stays under this.
pub const CHECK_TOLERANCE: f64 = 1e-4;

/// Default perturbation for central differences.
pub const CHECK_EPS: f64 = 1e-5;

/// Compares analytic gradients of a scalar objective against central finite
/// differences, element by element over every input. Returns the worst
/// relative error, |num - ana| / (max(|num|, |ana|) + 1e-8).
///
/// The objective must be a deterministic function of its inputs (reseed any
/// internal RNG per call).
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&Tape, &[Tensor]) -> Result<Tensor>,
{
    let tape = Tape::new();
    let leaves: Vec<Tensor> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let loss = f(&tape, &leaves)?;
    if loss.len() != 1 {
        return Err(Error::argument(format!(
            "grad_check: objective must be scalar, got shape {:?}",
            loss.shape()
        )));
    }
    let grads = tape.backward(&loss)?;
    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let ana = grads.wrt(&leaves[i])?;
        for e in 0..input.len() {
            let fp = eval_perturbed(&f, inputs, i, e, eps)?;
            let fm = eval_perturbed(&f, inputs, i, e, -eps)?;
            let num = (fp - fm) / (2.0 * eps);
            let a = ana.data()[e];
            let rel = (num - a).abs() / (num.abs().max(a.abs()) + 1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

fn eval_perturbed<F>(f: &F, inputs: &[Tensor], which: usize, elem: usize, delta: f64) -> Result<f64>
where
    F: Fn(&Tape, &[Tensor]) -> Result<Tensor>,
{
    let mut vals = inputs[which].to_vec();
    vals[elem] += delta;
    let mut moved = inputs.to_vec();
    moved[which] = Tensor::new(inputs[which].shape(), vals)?;
    // Untracked pass: values only, nothing recorded.
    let tape = Tape::new();
    f(&tape, &moved)?.item()
}

pub struct CheckResult {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub pass: bool,
}

type Objective = Box<dyn Fn(&Tape, &[Tensor]) -> Result<Tensor>>;

struct NamedCheck {
    name: &'static str,
    inputs: Vec<Tensor>,
    f: Objective,
}

/// Objective: sum(R .* y), a random fixed weighting so every output element
/// influences the scalar (plain sums hide transposition and softmax bugs).
fn weighted(tape: &Tape, y: &Tensor, r: &Tensor) -> Result<Tensor> {
    tape.sum_all(&tape.mul(y, r)?)
}

fn op_suite(seed: u64) -> Vec<NamedCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rnd = |shape: &[usize]| Tensor::rand_uniform(shape, -1.0, 1.0, &mut rng);
    let mut checks: Vec<NamedCheck> = Vec::new();
    {
        let (a, b, r) = (rnd(&[3, 4]), rnd(&[4, 2]), rnd(&[3, 2]));
        checks.push(NamedCheck {
            name: "matmul",
            inputs: vec![a, b],
            f: Box::new(move |t, xs| weighted(t, &t.matmul(&xs[0], &xs[1])?, &r)),
        });
    }
    {
        let (a, w, r) = (rnd(&[3, 4]), rnd(&[2, 4]), rnd(&[3, 2]));
        checks.push(NamedCheck {
            name: "matmul_nt",
            inputs: vec![a, w],
            f: Box::new(move |t, xs| weighted(t, &t.matmul_nt(&xs[0], &xs[1])?, &r)),
        });
    }
    {
        let (a, b, r) = (rnd(&[2, 3, 4]), rnd(&[2, 4, 2]), rnd(&[2, 3, 2]));
        checks.push(NamedCheck {
            name: "bmm",
            inputs: vec![a, b],
            f: Box::new(move |t, xs| weighted(t, &t.bmm(&xs[0], &xs[1])?, &r)),
        });
    }
    {
        let (a, b, r) = (rnd(&[2, 3, 4]), rnd(&[2, 5, 4]), rnd(&[2, 3, 5]));
        checks.push(NamedCheck {
            name: "bmm_nt",
            inputs: vec![a, b],
            f: Box::new(move |t, xs| weighted(t, &t.bmm_nt(&xs[0], &xs[1])?, &r)),
        });
    }
    {
        let (a, b, r) = (rnd(&[2, 3, 4]), rnd(&[2, 3, 4]), rnd(&[2, 3, 4]));
        checks.push(NamedCheck {
            name: "add",
            inputs: vec![a, b],
            f: Box::new(move |t, xs| weighted(t, &t.add(&xs[0], &xs[1])?, &r)),
        });
    }
    {
        let (a, b, r) = (rnd(&[2, 3, 4]), rnd(&[3, 4]), rnd(&[2, 3, 4]));
        checks.push(NamedCheck {
            name: "add_broadcast",
            inputs: vec![a, b],
            f: Box::new(move |t, xs| weighted(t, &t.add(&xs[0], &xs[1])?, &r)),
        });
    }
    {
        let (a, b, r) = (rnd(&[3, 4]), rnd(&[3, 4]), rnd(&[3, 4]));
        checks.push(NamedCheck {
            name: "sub",
            inputs: vec![a, b],
            f: Box::new(move |t, xs| weighted(t, &t.sub(&xs[0], &xs[1])?, &r)),
        });
    }
    {
        let (a, b, r) = (rnd(&[3, 4]), rnd(&[3, 4]), rnd(&[3, 4]));
        checks.push(NamedCheck {
            name: "mul",
            inputs: vec![a, b],
            f: Box::new(move |t, xs| weighted(t, &t.mul(&xs[0], &xs[1])?, &r)),
        });
    }
    {
        let (a, r) = (rnd(&[3, 4]), rnd(&[3, 4]));
        checks.push(NamedCheck {
            name: "scale",
            inputs: vec![a],
            f: Box::new(move |t, xs| weighted(t, &t.scale(&xs[0], -1.7)?, &r)),
        });
    }
    {
        let (a, b, r) = (rnd(&[2, 3]), rnd(&[2, 2]), rnd(&[2, 3]));
        checks.push(NamedCheck {
            name: "concat_slice",
            inputs: vec![a, b],
            f: Box::new(move |t, xs| {
                let cat = t.concat(&[&xs[0], &xs[1]], 1)?;
                weighted(t, &t.slice(&cat, 1, 1, 3)?, &r)
            }),
        });
    }
    {
        let (a, r) = (rnd(&[2, 3, 4]), rnd(&[4, 2, 3]));
        checks.push(NamedCheck {
            name: "permute",
            inputs: vec![a],
            f: Box::new(move |t, xs| weighted(t, &t.permute(&xs[0], &[2, 0, 1])?, &r)),
        });
    }
    {
        let (a, r) = (rnd(&[3, 4]), rnd(&[2, 6]));
        checks.push(NamedCheck {
            name: "reshape",
            inputs: vec![a],
            f: Box::new(move |t, xs| weighted(t, &t.reshape(&xs[0], &[2, 6])?, &r)),
        });
    }
    {
        let (a, r) = (rnd(&[3, 4, 2]), rnd(&[3, 2]));
        checks.push(NamedCheck {
            name: "sum_axis",
            inputs: vec![a],
            f: Box::new(move |t, xs| weighted(t, &t.sum_axis(&xs[0], 1)?, &r)),
        });
    }
    {
        let (a, r) = (rnd(&[3, 4, 2]), rnd(&[3, 4]));
        checks.push(NamedCheck {
            name: "mean_axis",
            inputs: vec![a],
            f: Box::new(move |t, xs| weighted(t, &t.mean_axis(&xs[0], 2)?, &r)),
        });
    }
    {
        let a = rnd(&[3, 4]);
        checks.push(NamedCheck {
            name: "mean_all",
            inputs: vec![a],
            f: Box::new(move |t, xs| t.mean_all(&xs[0])),
        });
    }
    {
        let (a, r) = (rnd(&[3, 5]), rnd(&[3, 5]));
        checks.push(NamedCheck {
            name: "tanh",
            inputs: vec![a],
            f: Box::new(move |t, xs| weighted(t, &t.tanh(&xs[0])?, &r)),
        });
    }
    {
        let (a, r) = (rnd(&[3, 5]), rnd(&[3, 5]));
        checks.push(NamedCheck {
            name: "sigmoid",
            inputs: vec![a],
            f: Box::new(move |t, xs| weighted(t, &t.sigmoid(&xs[0])?, &r)),
        });
    }
    {
        // Keep inputs away from the kink at 0 so central differences are valid.
        let mut a = rnd(&[3, 5]).to_vec();
        for v in &mut a {
            if v.abs() < 1e-3 {
                *v += 0.5;
            }
        }
        let a = Tensor::new(&[3, 5], a).unwrap();
        let r = rnd(&[3, 5]);
        checks.push(NamedCheck {
            name: "relu",
            inputs: vec![a],
            f: Box::new(move |t, xs| weighted(t, &t.relu(&xs[0])?, &r)),
        });
    }
    {
        let (a, r) = (rnd(&[4, 5]), rnd(&[4, 5]));
        checks.push(NamedCheck {
            name: "softmax",
            inputs: vec![a],
            f: Box::new(move |t, xs| {
                let scaled = t.scale(&xs[0], 3.0)?;
                weighted(t, &t.softmax(&scaled)?, &r)
            }),
        });
    }
    {
        let (x, gain, bias, r) = (rnd(&[4, 6]), rnd(&[6]), rnd(&[6]), rnd(&[4, 6]));
        checks.push(NamedCheck {
            name: "layer_norm",
            inputs: vec![x, gain, bias],
            f: Box::new(move |t, xs| {
                weighted(t, &t.layer_norm(&xs[0], &xs[1], &xs[2], 1e-5)?, &r)
            }),
        });
    }
    {
        let (x, r) = (rnd(&[4, 5]), rnd(&[4, 5]));
        checks.push(NamedCheck {
            name: "dropout",
            inputs: vec![x],
            f: Box::new(move |t, xs| {
                // Fixed mask per call keeps the objective deterministic.
                let mut mask_rng = ChaCha8Rng::seed_from_u64(77);
                weighted(t, &t.dropout(&xs[0], 0.3, true, &mut mask_rng)?, &r)
            }),
        });
    }
    checks
}

/// Runs the finite-difference suite over every primitive op at one seed.
pub fn run_op_checks(seed: u64, eps: f64) -> Result<Vec<CheckResult>> {
    op_suite(seed)
        .into_iter()
        .map(|c| {
            let err = grad_check(c.f, &c.inputs, eps)?;
            Ok(CheckResult {
                name: c.name,
                max_rel_err: err,
                pass: err < CHECK_TOLERANCE,
            })
        })
        .collect()
}
