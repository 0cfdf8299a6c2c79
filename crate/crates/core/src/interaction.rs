//! Latent interaction model: pairwise collision and charge forces, the
//! dynamics update and the context transition, unrolled over time.

use std::path::Path;

use autodiff::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, CoreError, Result};
use crate::latent::{self, ObjectLatent, CTX, CTX_DIM, DYN, DYN_DIM, LATENT_DIM};
use crate::params::{Interaction, Linear, Map, ModelParams};

/// Multipliers on the two force families. A gate of 0 removes the family.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gates {
    pub collision: f64,
    pub charge: f64,
}

impl Gates {
    pub const OPEN: Gates = Gates {
        collision: 1.0,
        charge: 1.0,
    };
    pub const CLOSED: Gates = Gates {
        collision: 0.0,
        charge: 0.0,
    };
}

/// Ordered pairs `(i, j)`, `i != j`, and the `K x Q` matrix that sums pair
/// rows into their first member.
#[derive(Clone, Debug)]
pub struct PairIndex {
    pub k: usize,
    pub pairs: Vec<(usize, usize)>,
    first: Vec<usize>,
    second: Vec<usize>,
    gather: Tensor,
}

impl PairIndex {
    pub fn new(k: usize) -> Self {
        let pairs: Vec<(usize, usize)> = (0..k)
            .flat_map(|i| (0..k).filter(move |&j| j != i).map(move |j| (i, j)))
            .collect();
        let q = pairs.len();
        let mut g = vec![0.0; k * q.max(1)];
        for (n, &(i, _)) in pairs.iter().enumerate() {
            g[i * q + n] = 1.0;
        }
        Self {
            k,
            first: pairs.iter().map(|p| p.0).collect(),
            second: pairs.iter().map(|p| p.1).collect(),
            gather: Tensor::new(vec![k, q.max(1)], g).expect("gather shape"),
            pairs,
        }
    }
}

fn linear_fwd(tape: &mut Tape, l: &Linear<Var>, x: Var) -> Result<Var> {
    Ok(tape.affine(x, l.w, l.b)?)
}

fn map_fwd(tape: &mut Tape, m: &Map<Var>, x: Var) -> Result<Var> {
    let x = match &m.hidden {
        Some(h) => {
            let a = linear_fwd(tape, h, x)?;
            tape.tanh(a)?
        }
        None => x,
    };
    linear_fwd(tape, &m.out, x)
}

/// Force quantities of one step on a tape.
#[derive(Clone, Copy, Debug)]
pub struct ForceVars {
    /// `[K, 2]`, gate applied.
    pub collision: Var,
    /// `[K, 2]`, gate applied.
    pub charge: Var,
    /// `[Q, 1]`, `[Q, 2]`, `[Q, 1]`; absent when `K = 1`.
    pub pair: Option<(Var, Var, Var)>,
}

/// Collision and charge forces for slots `ctx: [K,12]`, `dyn: [K,2]`,
/// `m: [K,1]`, `c: [K,1]`.
#[allow(clippy::too_many_arguments)]
pub fn force_vars(
    tape: &mut Tape,
    p: &Interaction<Var>,
    idx: &PairIndex,
    ctx: Var,
    dyn_: Var,
    m: Var,
    c: Var,
    gates: Gates,
    literal_product: bool,
) -> Result<ForceVars> {
    let k = idx.k;
    if idx.pairs.is_empty() {
        let z = tape.constant(Tensor::zeros(&[k, DYN_DIM]));
        return Ok(ForceVars {
            collision: z,
            charge: z,
            pair: None,
        });
    }
    let q = idx.pairs.len();
    let ctx_i = tape.gather_rows(ctx, &idx.first)?;
    let ctx_j = tape.gather_rows(ctx, &idx.second)?;
    let dyn_i = tape.gather_rows(dyn_, &idx.first)?;
    let dyn_j = tape.gather_rows(dyn_, &idx.second)?;
    let m_i = tape.gather_rows(m, &idx.first)?;
    let m_j = tape.gather_rows(m, &idx.second)?;
    let c_i = tape.gather_rows(c, &idx.first)?;
    let c_j = tape.gather_rows(c, &idx.second)?;
    let gather = tape.constant(idx.gather.clone());

    let pair_in = tape.concat(&[ctx_i, dyn_i, ctx_j, dyn_j], 1)?;
    let attn_raw = map_fwd(tape, &p.attn, pair_in)?;
    let attn = tape.sigmoid(attn_raw)?;
    let dir_raw = map_fwd(tape, &p.dir, pair_in)?;
    let f_d = tape.l2_normalize(dir_raw, 1)?;
    let mass_in = tape.concat(&[m_i, dyn_i, m_j, dyn_j], 1)?;
    let f_i = map_fwd(tape, &p.intensity, mass_in)?;
    let gated = tape.mul(attn, f_i)?;
    let collision = if literal_product {
        // (sum_j f_d) * (sum_j attn f_i)
        let dirs = tape.matmul(gather, f_d)?;
        let mag = tape.matmul(gather, gated)?;
        let mag = tape.broadcast_to(mag, &[k, DYN_DIM])?;
        tape.mul(dirs, mag)?
    } else {
        let gated = tape.broadcast_to(gated, &[q, DYN_DIM])?;
        let per_pair = tape.mul(f_d, gated)?;
        tape.matmul(gather, per_pair)?
    };

    let ctx_pair = tape.concat(&[ctx_i, ctx_j], 1)?;
    let chg = map_fwd(tape, &p.charge, ctx_pair)?;
    let prod = tape.mul(c_i, c_j)?;
    let prod = tape.broadcast_to(prod, &[q, DYN_DIM])?;
    let chg = tape.mul(chg, prod)?;
    let charge = tape.matmul(gather, chg)?;

    let collision = gate(tape, collision, gates.collision)?;
    let charge = gate(tape, charge, gates.charge)?;
    Ok(ForceVars {
        collision,
        charge,
        pair: Some((attn, f_d, f_i)),
    })
}

fn gate(tape: &mut Tape, v: Var, g: f64) -> Result<Var> {
    if g == 1.0 {
        Ok(v)
    } else {
        Ok(tape.scale(v, g)?)
    }
}

/// `dyn + F_collision + F_charge`.
pub fn apply_force_vars(tape: &mut Tape, dyn_: Var, f: &ForceVars) -> Result<Var> {
    let a = tape.add(dyn_, f.collision)?;
    Ok(tape.add(a, f.charge)?)
}

/// `ctx + W_trans dyn + b`.
pub fn transition_vars(tape: &mut Tape, p: &Interaction<Var>, ctx: Var, dyn_: Var) -> Result<Var> {
    let d = tape.affine(dyn_, p.trans.w, p.trans.b)?;
    Ok(tape.add(ctx, d)?)
}

/// Rolled-out latents on a tape; index `t` holds step `t`, `0..=N`.
#[derive(Clone, Debug)]
pub struct RolloutVars {
    pub ctx: Vec<Var>,
    pub dyn_: Vec<Var>,
    pub m: Var,
    pub c: Var,
    pub forces: Vec<ForceVars>,
}

/// Unrolls `steps` latent steps from `z0: [K, 16]`.
pub fn rollout_vars(
    tape: &mut Tape,
    p: &Interaction<Var>,
    z0: Var,
    steps: usize,
    gates: Gates,
    literal_product: bool,
) -> Result<RolloutVars> {
    let shape = tape.shape(z0).to_vec();
    if shape.len() != 2 || shape[1] != LATENT_DIM {
        return Err(CoreError::LatentDim {
            expected: LATENT_DIM,
            got: shape.last().copied().unwrap_or(0),
        });
    }
    let idx = PairIndex::new(shape[0]);
    let mut ctx = vec![tape.slice(z0, 1, CTX.start, CTX.end)?];
    let mut dyn_ = vec![tape.slice(z0, 1, DYN.start, DYN.end)?];
    let m = tape.slice(z0, 1, latent::MASS, latent::MASS + 1)?;
    let c = tape.slice(z0, 1, latent::CHARGE, latent::CHARGE + 1)?;
    let mut forces = Vec::with_capacity(steps);
    for t in 0..steps {
        let f = force_vars(tape, p, &idx, ctx[t], dyn_[t], m, c, gates, literal_product)?;
        let d = apply_force_vars(tape, dyn_[t], &f)?;
        let x = transition_vars(tape, p, ctx[t], d)?;
        if !tape.value(d).is_finite() || !tape.value(x).is_finite() {
            return Err(CoreError::NonFinite {
                context: "rollout",
                step: t + 1,
            });
        }
        forces.push(f);
        dyn_.push(d);
        ctx.push(x);
    }
    Ok(RolloutVars {
        ctx,
        dyn_,
        m,
        c,
        forces,
    })
}

/// One ordered pair's collision quantities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairForce {
    pub i: usize,
    pub j: usize,
    pub attn: f64,
    pub f_d: [f64; 2],
    pub f_i: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForceBreakdown {
    pub pairs: Vec<PairForce>,
    pub collision: Vec<[f64; 2]>,
    pub charge: Vec<[f64; 2]>,
}

fn rows2(t: &Tensor) -> Vec<[f64; 2]> {
    t.data().chunks(2).map(|r| [r[0], r[1]]).collect()
}

fn breakdown(tape: &Tape, idx: &PairIndex, f: &ForceVars) -> ForceBreakdown {
    let pairs = match f.pair {
        Some((a, d, i)) => idx
            .pairs
            .iter()
            .enumerate()
            .map(|(n, &(pi, pj))| PairForce {
                i: pi,
                j: pj,
                attn: tape.value(a).data()[n],
                f_d: [tape.value(d).data()[2 * n], tape.value(d).data()[2 * n + 1]],
                f_i: tape.value(i).data()[n],
            })
            .collect(),
        None => Vec::new(),
    };
    ForceBreakdown {
        pairs,
        collision: rows2(tape.value(f.collision)),
        charge: rows2(tape.value(f.charge)),
    }
}

fn bound_interaction(tape: &mut Tape, params: &ModelParams) -> Interaction<Var> {
    params.bind(tape, false).interaction
}

fn latent_vars(tape: &mut Tape, latents: &[ObjectLatent]) -> (Var, Var, Var, Var) {
    let z = latent::stack(latents);
    let k = latents.len();
    let pick = |r: std::ops::Range<usize>| {
        Tensor::from_fn(&[k, r.len()], |n| z.data()[(n / r.len()) * LATENT_DIM + r.start + n % r.len()])
    };
    (
        tape.constant(pick(CTX)),
        tape.constant(pick(DYN)),
        tape.constant(pick(latent::MASS..latent::MASS + 1)),
        tape.constant(pick(latent::CHARGE..latent::CHARGE + 1)),
    )
}

/// `ctx + W_trans dyn + b` for one slot.
pub fn transition(ctx: &[f64; CTX_DIM], dyn_: &[f64; DYN_DIM], params: &ModelParams) -> [f64; CTX_DIM] {
    let t = &params.interaction.trans;
    let mut out = *ctx;
    for (o, v) in out.iter_mut().enumerate() {
        *v += t.b.data()[o];
        for (d, &x) in dyn_.iter().enumerate() {
            *v += x * t.w.data()[d * CTX_DIM + o];
        }
    }
    out
}

/// Per-slot collision forces (gate open) with the pair breakdown.
pub fn collision_forces(latents: &[ObjectLatent], params: &ModelParams, literal_product: bool) -> Result<(Vec<[f64; 2]>, ForceBreakdown)> {
    let mut tape = Tape::new();
    let p = bound_interaction(&mut tape, params);
    let idx = PairIndex::new(latents.len());
    let (x, d, m, c) = latent_vars(&mut tape, latents);
    let gates = Gates {
        collision: 1.0,
        charge: 0.0,
    };
    let f = force_vars(&mut tape, &p, &idx, x, d, m, c, gates, literal_product)?;
    let b = breakdown(&tape, &idx, &f);
    Ok((b.collision.clone(), b))
}

/// Per-slot charge forces (gate open).
pub fn charge_forces(latents: &[ObjectLatent], params: &ModelParams) -> Result<Vec<[f64; 2]>> {
    let mut tape = Tape::new();
    let p = bound_interaction(&mut tape, params);
    let idx = PairIndex::new(latents.len());
    let (x, d, m, c) = latent_vars(&mut tape, latents);
    let gates = Gates {
        collision: 0.0,
        charge: 1.0,
    };
    let f = force_vars(&mut tape, &p, &idx, x, d, m, c, gates, false)?;
    Ok(rows2(tape.value(f.charge)))
}

pub fn apply_forces(dyn_: [f64; 2], collision: [f64; 2], charge: [f64; 2]) -> [f64; 2] {
    [
        dyn_[0] + collision[0] + charge[0],
        dyn_[1] + collision[1] + charge[1],
    ]
}

/// Value-level rollout: latents per step `0..=N` and the force breakdown
/// computed at each of the `N` steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub latents: Vec<Vec<ObjectLatent>>,
    pub forces: Vec<ForceBreakdown>,
}

impl Rollout {
    pub fn steps(&self) -> usize {
        self.forces.len()
    }

    /// `[K, 12]` contexts at step `t`.
    pub fn ctx_tensor(&self, t: usize) -> Tensor {
        let l = &self.latents[t];
        Tensor::new(
            vec![l.len(), CTX_DIM],
            l.iter().flat_map(|o| o.ctx).collect(),
        )
        .expect("ctx shape")
    }
}

pub fn rollout(latents0: &[ObjectLatent], steps: usize, params: &ModelParams, gates: Gates, literal_product: bool) -> Result<Rollout> {
    let mut tape = Tape::new();
    let p = bound_interaction(&mut tape, params);
    let z0 = tape.constant(latent::stack(latents0));
    let r = rollout_vars(&mut tape, &p, z0, steps, gates, literal_product)?;
    let idx = PairIndex::new(latents0.len());
    let mut out = Vec::with_capacity(steps + 1);
    for t in 0..=steps {
        let ctx = tape.value(r.ctx[t]).data();
        let dyn_ = tape.value(r.dyn_[t]).data();
        out.push(
            latents0
                .iter()
                .enumerate()
                .map(|(k, l0)| {
                    let mut l = l0.clone();
                    l.ctx.copy_from_slice(&ctx[k * CTX_DIM..(k + 1) * CTX_DIM]);
                    l.dyn_.copy_from_slice(&dyn_[k * DYN_DIM..(k + 1) * DYN_DIM]);
                    l
                })
                .collect(),
        );
    }
    let forces = r.forces.iter().map(|f| breakdown(&tape, &idx, f)).collect();
    Ok(Rollout {
        latents: out,
        forces,
    })
}

/// Writes one CSV row per (step, ordered pair): the pair gate, direction,
/// intensity, and the first member's dynamics and mass at that step.
pub fn write_breakdown_csv(r: &Rollout, path: &Path) -> Result<usize> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record([
        "frame", "i", "j", "attn", "f_d_x", "f_d_y", "f_i", "dyn_i_x", "dyn_i_y", "m_i",
    ])
    .map_err(|e| csv_err(path, e))?;
    let mut rows = 0;
    for (t, f) in r.forces.iter().enumerate() {
        for p in &f.pairs {
            let l = &r.latents[t][p.i];
            w.write_record(&[
                t.to_string(),
                p.i.to_string(),
                p.j.to_string(),
                p.attn.to_string(),
                p.f_d[0].to_string(),
                p.f_d[1].to_string(),
                p.f_i.to_string(),
                l.dyn_[0].to_string(),
                l.dyn_[1].to_string(),
                l.m.to_string(),
            ])
            .map_err(|e| csv_err(path, e))?;
            rows += 1;
        }
    }
    w.flush().map_err(io_err(path))?;
    Ok(rows)
}

fn csv_err(path: &Path, e: csv::Error) -> CoreError {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => CoreError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => CoreError::Format {
            path: path.to_path_buf(),
            reason: format!("{other:?}"),
        },
    }
}
