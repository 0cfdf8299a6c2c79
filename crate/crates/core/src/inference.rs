//! Diagonal-Gaussian posterior over slot latents, the negative ELBO, and
//! staged gradient refinement of the posterior parameters.

use std::io::Write;
use std::path::Path;

use autodiff::{Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::decoder::{coord_grid, decode_vars, mixture_ll_vars};
use crate::error::{io_err, CoreError, Result};
use crate::interaction::{rollout_vars, Gates};
use crate::latent::{self, Block, ObjectLatent, CTX_DIM, LATENT_DIM};
use crate::model::{Clip, SceneModel};
use crate::optim::Adam;
use crate::params::ModelParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    /// Number of slots `K`.
    pub slots: usize,
    /// Outer refinement iterations per phase; one report each.
    pub refine_steps: usize,
    /// Gradient steps inside each outer iteration.
    pub inner_steps: usize,
    pub step_size: f64,
    pub beta: f64,
    pub mc_samples: usize,
    /// Draw the noise once per refinement run instead of per evaluation.
    pub fixed_eps: bool,
    pub gates: Gates,
    /// Joint refinement of every entry after the staged phases.
    pub polish: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            slots: 8,
            refine_steps: 5,
            inner_steps: 4,
            step_size: 0.05,
            beta: 100.0,
            mc_samples: 1,
            fixed_eps: false,
            gates: Gates::OPEN,
            polish: true,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.slots == 0 || self.mc_samples == 0 || self.inner_steps == 0 {
            return Err(CoreError::InvalidArgument(
                "slots, mc_samples and inner_steps must be positive".into(),
            ));
        }
        if !(self.step_size >= 0.0) || !(self.beta >= 0.0) {
            return Err(CoreError::InvalidArgument(
                "step size and beta must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Per-slot mean and log-variance, each `[K, 16]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Posterior {
    pub mean: Tensor,
    pub log_var: Tensor,
}

impl Posterior {
    pub fn slots(&self) -> usize {
        self.mean.shape()[0]
    }

    pub fn mean_latents(&self) -> Vec<ObjectLatent> {
        latent::unstack(&self.mean).expect("posterior layout")
    }

    fn flat(&self) -> Vec<f64> {
        let mut v = self.mean.data().to_vec();
        v.extend_from_slice(self.log_var.data());
        v
    }

    fn set_flat(&mut self, v: &[f64]) {
        let n = self.mean.numel();
        self.mean.data_mut().copy_from_slice(&v[..n]);
        self.log_var.data_mut().copy_from_slice(&v[n..]);
    }
}

/// Entries drawn i.i.d. from `U(-0.5, 0.5)`.
pub fn init_posterior(k: usize, rng: &mut ChaCha8Rng) -> Posterior {
    let mut draw = || Tensor::from_fn(&[k, LATENT_DIM], |_| rng.random_range(-0.5..=0.5));
    let mean = draw();
    let log_var = draw();
    Posterior { mean, log_var }
}

/// Standard-normal noise shaped like a posterior.
pub fn draw_eps(k: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(&[k, LATENT_DIM], |_| rng.sample(StandardNormal))
}

/// `mean + exp(log_var / 2) * eps`, split into slot latents.
pub fn sample_with(post: &Posterior, eps: &Tensor) -> Vec<ObjectLatent> {
    let data: Vec<f64> = post
        .mean
        .data()
        .iter()
        .zip(post.log_var.data())
        .zip(eps.data())
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect();
    let t = Tensor::new(post.mean.shape().to_vec(), data).expect("posterior layout");
    latent::unstack(&t).expect("posterior layout")
}

pub fn sample(post: &Posterior, rng: &mut ChaCha8Rng) -> Vec<ObjectLatent> {
    let eps = draw_eps(post.slots(), rng);
    sample_with(post, &eps)
}

/// `sum 0.5 (exp(lv) + mean^2 - 1 - lv)` over every entry.
pub fn kl_to_standard_normal(post: &Posterior) -> f64 {
    post.mean
        .data()
        .iter()
        .zip(post.log_var.data())
        .map(|(m, lv)| 0.5 * (lv.exp() + m * m - 1.0 - lv))
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboReport {
    pub total: f64,
    /// Negative log-likelihood per frame.
    pub nll: Vec<f64>,
    pub kl: f64,
    pub beta: f64,
}

pub(crate) struct Evaluation {
    pub report: ElboReport,
    pub grad_lambda: Option<Vec<f64>>,
    pub grad_params: Option<Vec<f64>>,
}

/// Negative ELBO of `post` on the first `frames.shape()[0]` frames, with one
/// rollout per noise draw in `eps`. A noise tensor of zeros evaluates at the
/// posterior mean.
pub(crate) fn evaluate(
    model: &SceneModel,
    frames: &Tensor,
    post: &Posterior,
    eps: &[Tensor],
    beta: f64,
    gates: Gates,
    lambda_grad: bool,
    param_grad: bool,
) -> Result<Evaluation> {
    let f = frames.shape()[0];
    let p = frames.shape()[1];
    let cfg = &model.config;
    if p != cfg.pixels() {
        return Err(CoreError::FrameMismatch {
            expected: (cfg.height, cfg.width),
            got: (p, 1),
        });
    }
    let k = post.slots();
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape, param_grad);
    let (mean, log_var) = if lambda_grad {
        (tape.leaf(post.mean.clone()), tape.leaf(post.log_var.clone()))
    } else {
        (
            tape.constant(post.mean.clone()),
            tape.constant(post.log_var.clone()),
        )
    };
    let coords = tape.constant(coord_grid(cfg.height, cfg.width));
    let half = tape.scale(log_var, 0.5)?;
    let std = tape.exp(half)?;
    let mut nll_terms: Vec<Var> = Vec::with_capacity(eps.len());
    let mut nll_frames = vec![0.0; f];
    for e in eps {
        let ev = tape.constant(e.clone());
        let noise = tape.mul(std, ev)?;
        let z = tape.add(mean, noise)?;
        let roll = rollout_vars(
            &mut tape,
            &bound.interaction,
            z,
            f - 1,
            gates,
            cfg.literal_force_product,
        )?;
        let ctx_all = tape.concat(&roll.ctx, 0)?;
        let dec = decode_vars(&mut tape, &bound.decoder, ctx_all, coords)?;
        let means = tape.reshape(dec.means, &[f, k, p, 3])?;
        let logits = tape.reshape(dec.logits, &[f, k, p])?;
        let ll = mixture_ll_vars(&mut tape, frames, means, logits, cfg.sigma)?;
        for (acc, v) in nll_frames.iter_mut().zip(tape.value(ll).data()) {
            *acc -= v / eps.len() as f64;
        }
        let s = tape.sum(ll)?;
        nll_terms.push(s);
    }
    let nll_sum = match nll_terms.len() {
        1 => nll_terms[0],
        _ => {
            let stacked = tape.concat(&nll_terms, 0)?;
            tape.sum(stacked)?
        }
    };
    let nll = tape.scale(nll_sum, -1.0 / eps.len() as f64)?;
    let e_lv = tape.exp(log_var)?;
    let m2 = tape.square(mean)?;
    let a = tape.add(e_lv, m2)?;
    let a = tape.sub(a, log_var)?;
    let a = tape.add_scalar(a, -1.0)?;
    let kl_sum = tape.sum(a)?;
    let kl = tape.scale(kl_sum, 0.5)?;
    let weighted = tape.scale(kl, beta)?;
    let loss = tape.add(nll, weighted)?;
    let kl_v = tape.value(kl).item()?;
    let report = ElboReport {
        total: tape.value(nll).item()? + beta * kl_v,
        nll: nll_frames,
        kl: kl_v,
        beta,
    };
    let (grad_lambda, grad_params) = if lambda_grad || param_grad {
        let g = tape.backward(loss)?;
        let gl = lambda_grad.then(|| {
            let mut v = g.wrt(mean).into_data();
            v.extend(g.wrt(log_var).into_data());
            v
        });
        let gp = param_grad.then(|| ModelParams::flat_grads(&bound, &g));
        (gl, gp)
    } else {
        (None, None)
    };
    Ok(Evaluation {
        report,
        grad_lambda,
        grad_params,
    })
}

/// Negative ELBO of `post` on every frame of `clip`, averaged over
/// `cfg.mc_samples` noise draws.
pub fn elbo_loss(clip: &Clip, post: &Posterior, model: &SceneModel, cfg: &InferenceConfig, rng: &mut ChaCha8Rng) -> Result<ElboReport> {
    clip.check_size(&model.config)?;
    let eps: Vec<Tensor> = (0..cfg.mc_samples)
        .map(|_| draw_eps(post.slots(), rng))
        .collect();
    let ev = evaluate(
        model,
        &clip.head(clip.frames),
        post,
        &eps,
        cfg.beta,
        cfg.gates,
        false,
        false,
    )?;
    Ok(ev.report)
}

/// Which latent blocks a refinement phase may change.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockMask(Vec<Block>);

impl BlockMask {
    pub fn new(blocks: &[Block]) -> Self {
        Self(blocks.to_vec())
    }

    pub fn all() -> Self {
        Self(vec![Block::Ctx, Block::Dyn, Block::Mass, Block::Charge])
    }

    /// Mask over the flattened `(mean, log_var)` parameters of `k` slots.
    fn expand(&self, k: usize) -> Vec<bool> {
        let mut row = [false; LATENT_DIM];
        for b in &self.0 {
            for i in b.range() {
                row[i] = true;
            }
        }
        (0..2 * k).flat_map(|_| row).collect()
    }
}

/// Parameter gradient averaged over the last refinement evaluations.
pub(crate) struct UnrollGrad {
    pub grad: Vec<f64>,
    pub loss: f64,
    pub report: ElboReport,
}

#[allow(clippy::too_many_arguments)]
fn refine_impl(
    post: &Posterior,
    frames: &Tensor,
    model: &SceneModel,
    cfg: &InferenceConfig,
    mask: &BlockMask,
    rng: &mut ChaCha8Rng,
    unroll: usize,
) -> Result<(Posterior, Vec<ElboReport>, Option<UnrollGrad>)> {
    let k = post.slots();
    let mask = mask.expand(k);
    let mut post = post.clone();
    let mut lambda = post.flat();
    let mut adam = Adam::with_lr(lambda.len(), cfg.step_size);
    let fixed: Vec<Tensor> = (0..cfg.mc_samples).map(|_| draw_eps(k, rng)).collect();
    let total_evals = cfg.refine_steps * cfg.inner_steps + 1;
    let mut reports = Vec::with_capacity(cfg.refine_steps + 1);
    let mut acc: Option<UnrollGrad> = None;
    for e in 0..total_evals {
        let eps = if cfg.fixed_eps {
            fixed.clone()
        } else {
            (0..cfg.mc_samples).map(|_| draw_eps(k, rng)).collect()
        };
        let last = e + 1 == total_evals;
        let train = e + unroll >= total_evals;
        let ev = evaluate(
            model,
            frames,
            &post,
            &eps,
            cfg.beta,
            cfg.gates,
            !last,
            train,
        )?;
        if !ev.report.total.is_finite() {
            return Err(CoreError::NonFinite {
                context: "refine",
                step: e / cfg.inner_steps,
            });
        }
        if e % cfg.inner_steps == 0 {
            reports.push(ev.report.clone());
        }
        if let Some(g) = ev.grad_params {
            let w = 1.0 / unroll as f64;
            let slot = acc.get_or_insert_with(|| UnrollGrad {
                grad: vec![0.0; g.len()],
                loss: 0.0,
                report: ev.report.clone(),
            });
            for (a, b) in slot.grad.iter_mut().zip(&g) {
                *a += w * b;
            }
            slot.loss += w * ev.report.total;
            slot.report = ev.report.clone();
        }
        if let Some(g) = ev.grad_lambda {
            adam.step(&mut lambda, &g, Some(&mask));
            post.set_flat(&lambda);
        }
    }
    Ok((post, reports, acc))
}

/// `refine_steps` outer iterations of Adam-preconditioned gradient descent on
/// the posterior parameters, with frozen blocks masked out. Returns the
/// refined posterior and one report per outer iteration plus a final one.
pub fn refine(post: &Posterior, frames: &Tensor, model: &SceneModel, cfg: &InferenceConfig, mask: &BlockMask, rng: &mut ChaCha8Rng) -> Result<(Posterior, Vec<ElboReport>)> {
    if cfg.refine_steps == 0 {
        return Err(CoreError::InvalidArgument("refine needs R >= 1".into()));
    }
    cfg.validate()?;
    let (p, r, _) = refine_impl(post, frames, model, cfg, mask, rng, 0)?;
    Ok((p, r))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Context,
    Dynamics,
    Intrinsic,
    Polish,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagRecord {
    pub phase: Phase,
    pub iteration: usize,
    pub nll: Vec<f64>,
    pub kl: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult {
    pub posterior: Posterior,
    /// Posterior means.
    pub latents: Vec<ObjectLatent>,
    pub diagnostics: Vec<DiagRecord>,
    /// Whole-clip loss at the posterior mean after each phase.
    pub phase_losses: Vec<(Phase, f64)>,
}

pub(crate) fn phases(cfg: &InferenceConfig, frames: usize) -> Vec<(Phase, BlockMask, usize)> {
    let mut v = vec![
        (Phase::Context, BlockMask::new(&[Block::Ctx]), 1),
        (Phase::Dynamics, BlockMask::new(&[Block::Dyn]), 2),
        (
            Phase::Intrinsic,
            BlockMask::new(&[Block::Mass, Block::Charge]),
            frames,
        ),
    ];
    if cfg.polish {
        v.push((Phase::Polish, BlockMask::all(), frames));
    }
    v
}

/// Loss of the posterior mean on the whole clip.
pub fn mean_loss(clip: &Clip, post: &Posterior, model: &SceneModel, cfg: &InferenceConfig) -> Result<f64> {
    let zero = Tensor::zeros(&[post.slots(), LATENT_DIM]);
    let ev = evaluate(
        model,
        &clip.head(clip.frames),
        post,
        &[zero],
        cfg.beta,
        cfg.gates,
        false,
        false,
    )?;
    Ok(ev.report.total)
}

pub(crate) fn infer_impl(
    clip: &Clip,
    model: &SceneModel,
    cfg: &InferenceConfig,
    rng: &mut ChaCha8Rng,
    start: Option<Posterior>,
    unroll: usize,
    diagnose: bool,
) -> Result<(InferenceResult, Option<UnrollGrad>)> {
    cfg.validate()?;
    clip.check_size(&model.config)?;
    if clip.frames < 2 {
        return Err(CoreError::TooFewFrames {
            need: 2,
            got: clip.frames,
        });
    }
    if cfg.refine_steps == 0 {
        return Err(CoreError::InvalidArgument("refine needs R >= 1".into()));
    }
    let mut post = start.unwrap_or_else(|| init_posterior(cfg.slots, rng));
    let mut diagnostics = Vec::new();
    let mut phase_losses = Vec::new();
    let plan = phases(cfg, clip.frames);
    let n_phases = plan.len();
    let mut grad = None;
    for (n, (phase, mask, frames)) in plan.into_iter().enumerate() {
        let u = if n + 1 == n_phases { unroll } else { 0 };
        let (next, reports, g) = refine_impl(&post, &clip.head(frames), model, cfg, &mask, rng, u)?;
        post = next;
        grad = g.or(grad);
        diagnostics.extend(reports.into_iter().enumerate().map(|(i, r)| DiagRecord {
            phase,
            iteration: i,
            nll: r.nll,
            kl: r.kl,
            total: r.total,
        }));
        if diagnose {
            phase_losses.push((phase, mean_loss(clip, &post, model, cfg)?));
        }
    }
    let latents = post.mean_latents();
    Ok((
        InferenceResult {
            posterior: post,
            latents,
            diagnostics,
            phase_losses,
        },
        grad,
    ))
}

/// Staged refinement from a fresh posterior: contexts against frame 0,
/// then dynamics against frames 0..2, then mass and charge against the
/// whole clip, then (optionally) every entry jointly.
pub fn infer(clip: &Clip, model: &SceneModel, cfg: &InferenceConfig, rng: &mut ChaCha8Rng) -> Result<InferenceResult> {
    Ok(infer_impl(clip, model, cfg, rng, None, 0, true)?.0)
}

/// Refines only the context block against frame 0 of `clip`.
pub fn infer_context(clip: &Clip, model: &SceneModel, cfg: &InferenceConfig, rng: &mut ChaCha8Rng) -> Result<Posterior> {
    cfg.validate()?;
    clip.check_size(&model.config)?;
    let post = init_posterior(cfg.slots, rng);
    let (p, _, _) = refine_impl(
        &post,
        &clip.head(1),
        model,
        cfg,
        &BlockMask::new(&[Block::Ctx]),
        rng,
        0,
    )?;
    Ok(p)
}

pub fn write_diagnostics_jsonl(records: &[DiagRecord], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err(path))?);
    for r in records {
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(f, "{line}").map_err(io_err(path))?;
    }
    f.flush().map_err(io_err(path))
}

/// Contexts of every slot at step 0, `[K, 12]`.
pub fn ctx_of(latents: &[ObjectLatent]) -> Tensor {
    Tensor::new(
        vec![latents.len(), CTX_DIM],
        latents.iter().flat_map(|l| l.ctx).collect(),
    )
    .expect("ctx layout")
}
