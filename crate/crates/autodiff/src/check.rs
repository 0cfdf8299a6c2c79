//! Randomized finite-difference verification of every registered op.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::grad_check;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Names of the ops covered by [`check_op`].
pub const OPS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "add_scalar",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "slice",
    "gather_rows",
    "sum",
    "sum_axis",
    "mean",
    "exp",
    "log",
    "tanh",
    "relu",
    "sigmoid",
    "softplus",
    "square",
    "softmax",
    "log_softmax",
    "logsumexp",
    "l2_normalize",
    "broadcast_to",
    "affine",
    "broadcast_add",
];

#[derive(Debug, Clone)]
pub struct CheckCase {
    pub name: String,
    pub seed: u64,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, Default)]
pub struct SuiteReport {
    pub cases: Vec<CheckCase>,
}

impl SuiteReport {
    pub fn max_error(&self) -> f64 {
        self.cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&CheckCase> {
        self.cases
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

fn random_shape(rng: &mut ChaCha8Rng, rank: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.random_range(1..=4)).collect()
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(lo..hi);
        // keep relu/abs kinks out of the finite-difference stencil
        if v.abs() < 1e-2 {
            v + 0.05
        } else {
            v
        }
    })
}

/// Reduces `out` to a scalar with fixed random weights so every output
/// coordinate contributes a distinct sensitivity.
fn weighted_sum(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

/// Finite-difference check of one op with random shapes drawn from `seed`.
pub fn check_op(name: &str, seed: u64, eps: f64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rank = rng.random_range(1..=3);
    let shape = random_shape(&mut rng, rank);
    let axis = rng.random_range(0..rank);
    let x = if name == "log" {
        random_tensor(&mut rng, &shape, 0.2, 3.0)
    } else {
        random_tensor(&mut rng, &shape, -2.0, 2.0)
    };
    let other = random_tensor(&mut rng, &shape, -2.0, 2.0);
    let positive = random_tensor(&mut rng, &shape, 0.5, 2.0);
    let c: f64 = rng.random_range(-2.0..2.0);

    // Output shape of each op is needed for the weight tensor, so each arm
    // builds the op and then reduces with weights drawn from a second stream.
    let weight_seed = rng.random::<u64>();
    let reduce = move |tape: &mut Tape, out: Var| -> Result<Var> {
        let mut wrng = ChaCha8Rng::seed_from_u64(weight_seed);
        let shape = tape.shape(out).to_vec();
        let w = random_tensor(&mut wrng, &shape, -1.0, 1.0);
        weighted_sum(tape, out, &w)
    };

    let n = shape.iter().product::<usize>();
    let f = |tape: &mut Tape, v: Var| -> Result<Var> {
        let out = match name {
            "add" => {
                let o = tape.constant(other.clone());
                tape.add(v, o)?
            }
            "sub" => {
                let o = tape.constant(other.clone());
                let a = tape.sub(v, o)?;
                tape.sub(o, a)?
            }
            "mul" => tape.mul(v, v)?,
            "div" => {
                let p = tape.constant(positive.clone());
                let a = tape.div(v, p)?;
                let e = tape.exp(v)?;
                tape.div(a, e)?
            }
            "scale" => tape.scale(v, c)?,
            "add_scalar" => {
                let a = tape.add_scalar(v, c)?;
                tape.square(a)?
            }
            "matmul" => {
                let flat = tape.reshape(v, &[n / shape[rank - 1], shape[rank - 1]])?;
                let t = tape.transpose(flat)?;
                let a = tape.matmul(flat, t)?;
                tape.matmul(a, flat)?
            }
            "transpose" => {
                let flat = tape.reshape(v, &[shape[0], n / shape[0]])?;
                let t = tape.transpose(flat)?;
                tape.square(t)?
            }
            "reshape" => {
                let flat = tape.reshape(v, &[n])?;
                tape.tanh(flat)?
            }
            "concat" => {
                let s = tape.square(v)?;
                tape.concat(&[v, s, v], axis)?
            }
            "slice" => {
                let ext = shape[axis];
                let start = if ext > 1 { 1 } else { 0 };
                let s = tape.slice(v, axis, start, ext)?;
                tape.exp(s)?
            }
            "gather_rows" => {
                let rows = shape[0];
                let idx: Vec<usize> = (0..rows + 2).map(|i| (i * 7 + 3) % rows).collect();
                tape.gather_rows(v, &idx)?
            }
            "sum" => {
                let s = tape.square(v)?;
                tape.sum(s)?
            }
            "sum_axis" => {
                let s = tape.sum_axis(v, axis)?;
                tape.square(s)?
            }
            "mean" => {
                let s = tape.exp(v)?;
                tape.mean(s)?
            }
            "exp" => tape.exp(v)?,
            "log" => tape.log(v)?,
            "tanh" => tape.tanh(v)?,
            "relu" => tape.relu(v)?,
            "sigmoid" => tape.sigmoid(v)?,
            "softplus" => tape.softplus(v)?,
            "square" => tape.square(v)?,
            "softmax" => tape.softmax(v, axis)?,
            "log_softmax" => tape.log_softmax(v, axis)?,
            "logsumexp" => tape.logsumexp(v, axis)?,
            "l2_normalize" => tape.l2_normalize(v, axis)?,
            "broadcast_to" => {
                let mut target = vec![2];
                target.extend(shape.iter().copied());
                let b = tape.broadcast_to(v, &target)?;
                tape.tanh(b)?
            }
            "affine" => {
                let cols = shape[rank - 1];
                let flat = tape.reshape(v, &[n / cols, cols])?;
                let w = tape.transpose(flat)?;
                let b = tape.sum_axis(flat, 1)?;
                tape.affine(flat, w, b)?
            }
            "broadcast_add" => {
                let mut target = vec![2];
                target.extend(shape.iter().copied());
                let s = tape.sum_axis(v, axis)?;
                let s = tape.reshape(s, &{
                    let mut k = shape.clone();
                    k[axis] = 1;
                    k
                })?;
                let t = tape.broadcast_add(v, s, &target)?;
                tape.tanh(t)?
            }
            unknown => {
                return Err(crate::AutodiffError::InvalidArgument {
                    op: "check_op",
                    reason: format!("unknown op {unknown}"),
                })
            }
        };
        if tape.shape(out).is_empty() {
            Ok(out)
        } else {
            reduce(tape, out)
        }
    };
    grad_check(f, &x, eps)
}

/// A random composite graph mixing five ops, built from `seed`.
pub fn check_composite(seed: u64, eps: f64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = rng.random_range(1..=4);
    let cols = rng.random_range(2..=4);
    let x = random_tensor(&mut rng, &[rows, cols], -1.5, 1.5);
    let w = random_tensor(&mut rng, &[cols, 3], -1.0, 1.0);
    let b = random_tensor(&mut rng, &[3], -0.5, 0.5);
    let choices: Vec<u32> = (0..5).map(|_| rng.random_range(0..6)).collect();
    let f = |tape: &mut Tape, v: Var| -> Result<Var> {
        let wv = tape.constant(w.clone());
        let bv = tape.constant(b.clone());
        let mut h = tape.affine(v, wv, bv)?;
        for &c in &choices {
            h = match c {
                0 => tape.tanh(h)?,
                1 => tape.sigmoid(h)?,
                2 => tape.softmax(h, 1)?,
                3 => tape.l2_normalize(h, 1)?,
                4 => {
                    let s = tape.square(h)?;
                    tape.add(h, s)?
                }
                _ => tape.softplus(h)?,
            };
        }
        let lse = tape.logsumexp(h, 1)?;
        tape.sum(lse)
    };
    grad_check(f, &x, eps)
}

/// Runs every op and a composite graph for `cases` seeds starting at `seed`.
pub fn run_suite(cases: usize, seed: u64, eps: f64) -> Result<SuiteReport> {
    let mut report = SuiteReport::default();
    for i in 0..cases as u64 {
        let s = seed.wrapping_add(i);
        for &op in OPS {
            report.cases.push(CheckCase {
                name: op.to_string(),
                seed: s,
                max_rel_error: check_op(op, s, eps)?,
            });
        }
        report.cases.push(CheckCase {
            name: "composite".into(),
            seed: s,
            max_rel_error: check_composite(s, eps)?,
        });
    }
    Ok(report)
}
