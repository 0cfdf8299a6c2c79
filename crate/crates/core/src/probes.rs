//! Evaluation: regeneration and prediction, oracle latents, counterfactual
//! edits, concept probes for charge and mass, and ablation tables.

use std::path::Path;

use autodiff::{Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sim::{Episode, SceneConfig};

use crate::decoder::{coord_grid, decode, decode_vars, SlotDecodeOutput};
use crate::error::{CoreError, Result};
use crate::inference::{infer, infer_context, ctx_of, InferenceConfig, InferenceResult};
use crate::interaction::{rollout, write_breakdown_csv, Gates, Rollout};
use crate::latent::{ObjectLatent, CTX_DIM, DYN_DIM};
use crate::model::{Clip, SceneModel};

// ---------------------------------------------------------------- decoding

/// Decodes every step of a rollout.
pub fn decode_rollout(model: &SceneModel, r: &Rollout) -> Result<Vec<SlotDecodeOutput>> {
    let (h, w) = (model.config.height, model.config.width);
    (0..r.latents.len())
        .map(|t| decode(&r.ctx_tensor(t), h, w, &model.params))
        .collect()
}

pub fn mse(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.numel() as f64;
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n
}

/// Peak signal-to-noise ratio for images in `[0, 1]`.
pub fn psnr(mse: f64) -> f64 {
    10.0 * (1.0 / mse.max(1e-12)).log10()
}

/// Soft centroid `(x, y)` in pixel units of one `H*W` mask.
pub fn soft_centroid(mask: &[f64], height: usize, width: usize) -> [f64; 2] {
    let (mut sx, mut sy, mut s) = (0.0, 0.0, 0.0);
    for y in 0..height {
        for x in 0..width {
            let m = mask[y * width + x];
            sx += m * (x as f64 + 0.5);
            sy += m * (y as f64 + 0.5);
            s += m;
        }
    }
    if s <= 0.0 {
        return [width as f64 / 2.0, height as f64 / 2.0];
    }
    [sx / s, sy / s]
}

fn slot_centroids(out: &SlotDecodeOutput) -> Vec<[f64; 2]> {
    let s = out.masks.shape();
    let (h, w) = (s[1], s[2]);
    let p = h * w;
    (0..s[0])
        .map(|k| soft_centroid(&out.masks.data()[k * p..(k + 1) * p], h, w))
        .collect()
}

// ---------------------------------------------------------------- binding

/// Assignment of ground-truth objects to slots by mask IoU at one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Binding {
    /// `slot_of_object[o]` is the slot bound to object `o`.
    pub slot_of_object: Vec<usize>,
    pub iou: Vec<f64>,
}

impl Binding {
    pub fn object_of_slot(&self, slot: usize) -> Option<usize> {
        self.slot_of_object.iter().position(|&s| s == slot)
    }

    pub fn bound_slots(&self) -> Vec<usize> {
        self.slot_of_object.clone()
    }
}

fn iou(a: &[bool], b: &[u8]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        let y = y != 0;
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Binds objects to distinct slots maximizing total IoU between hard slot
/// masks (per-pixel argmax) and instance masks of frame `t`.
pub fn bind_slots(masks: &Tensor, ep: &Episode, t: usize) -> Result<Binding> {
    let s = masks.shape();
    let (k, h, w) = (s[0], s[1], s[2]);
    if (h, w) != (ep.height, ep.width) {
        return Err(CoreError::FrameMismatch {
            expected: (h, w),
            got: (ep.height, ep.width),
        });
    }
    let n = ep.num_objects();
    if n > k {
        return Err(CoreError::InvalidArgument(format!(
            "{n} objects cannot bind to {k} slots"
        )));
    }
    let p = h * w;
    let mut hard = vec![vec![false; p]; k];
    for px in 0..p {
        let mut best = 0;
        for slot in 1..k {
            if masks.data()[slot * p + px] > masks.data()[best * p + px] {
                best = slot;
            }
        }
        hard[best][px] = true;
    }
    let table: Vec<Vec<f64>> = (0..n)
        .map(|o| (0..k).map(|slot| iou(&hard[slot], ep.mask(t, o))).collect())
        .collect();
    // exhaustive search over injective maps; K and the object count are small
    let mut best: (f64, Vec<usize>) = (-1.0, Vec::new());
    let mut current = Vec::with_capacity(n);
    fn search(table: &[Vec<f64>], k: usize, cur: &mut Vec<usize>, score: f64, best: &mut (f64, Vec<usize>)) {
        if cur.len() == table.len() {
            if score > best.0 {
                *best = (score, cur.clone());
            }
            return;
        }
        let o = cur.len();
        for slot in 0..k {
            if !cur.contains(&slot) {
                cur.push(slot);
                search(table, k, cur, score + table[o][slot], best);
                cur.pop();
            }
        }
    }
    search(&table, k, &mut current, 0.0, &mut best);
    let iou = best.1.iter().enumerate().map(|(o, &s)| table[o][s]).collect();
    Ok(Binding {
        slot_of_object: best.1,
        iou,
    })
}

/// Full inference on the first `frames` frames, then binding at frame 0.
pub fn infer_bound(
    ep: &Episode,
    frames: usize,
    model: &SceneModel,
    cfg: &InferenceConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(InferenceResult, Binding)> {
    let clip = Clip::from_episode(ep, 0, frames)?;
    let res = infer(&clip, model, cfg, rng)?;
    let out = decode(&ctx_of(&res.latents), model.config.height, model.config.width, &model.params)?;
    let binding = bind_slots(&out.masks, ep, 0)?;
    Ok((res, binding))
}

// ---------------------------------------------------------------- oracle

/// Monotone maps from ground truth to the mass and charge latents:
/// `z_m = mass_scale * ln(mass) + mass_offset`,
/// `z_c = charge_scale * q / charge_unit + charge_offset`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub mass_scale: f64,
    pub mass_offset: f64,
    pub charge_scale: f64,
    pub charge_offset: f64,
    pub charge_unit: f64,
}

impl Default for Calibration {
    fn default() -> Self {
        Self {
            mass_scale: 1.0,
            mass_offset: 0.0,
            charge_scale: 1.0,
            charge_offset: 0.0,
            charge_unit: 1.0,
        }
    }
}

/// Least-squares line through `(x, y)`; a flat or empty fit keeps slope 1.
fn fit_line(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return (1.0, 0.0);
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx <= 1e-12 || sxy.abs() <= 1e-12 {
        return (1.0, 0.0);
    }
    let a = sxy / sxx;
    (a, my - a * mx)
}

impl Calibration {
    pub fn mass_latent(&self, mass: f64) -> f64 {
        self.mass_scale * mass.ln() + self.mass_offset
    }

    pub fn charge_latent(&self, q: f64) -> f64 {
        self.charge_scale * q / self.charge_unit + self.charge_offset
    }

    /// Fits both maps to inferred latents of bound objects:
    /// `(z_m, mass, z_c, charge)` per object.
    pub fn fit(objects: &[(f64, f64, f64, f64)], charge_unit: f64) -> Self {
        let lm: Vec<f64> = objects.iter().map(|o| o.1.ln()).collect();
        let zm: Vec<f64> = objects.iter().map(|o| o.0).collect();
        let qc: Vec<f64> = objects.iter().map(|o| o.3 / charge_unit).collect();
        let zc: Vec<f64> = objects.iter().map(|o| o.2).collect();
        let (mass_scale, mass_offset) = fit_line(&lm, &zm);
        let (charge_scale, charge_offset) = fit_line(&qc, &zc);
        Self {
            mass_scale,
            mass_offset,
            charge_scale,
            charge_offset,
            charge_unit,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleLatents {
    pub latents: Vec<ObjectLatent>,
    pub binding: Binding,
    /// Frame-0 reconstruction MSE of the injected contexts.
    pub frame0_mse: f64,
}

/// Jacobian of slot `k`'s soft mask centroid (pixels) with respect to its
/// context, as two rows of 12.
pub fn centroid_jacobian(model: &SceneModel, ctx: &Tensor, k: usize) -> Result<[[f64; CTX_DIM]; 2]> {
    let (h, w) = (model.config.height, model.config.width);
    let p = h * w;
    let grid = coord_grid(h, w);
    // pixel-unit coordinates of every pixel center
    let px = Tensor::from_fn(&[p, 2], |n| {
        let (pix, c) = (n / 2, n % 2);
        if c == 0 {
            (pix % w) as f64 + 0.5
        } else {
            (pix / w) as f64 + 0.5
        }
    });
    let mut rows = [[0.0; CTX_DIM]; 2];
    for (c, row) in rows.iter_mut().enumerate() {
        let mut tape = Tape::new();
        let dec = model.params.bind(&mut tape, false).decoder;
        let z = tape.leaf(ctx.clone());
        let coords = tape.constant(grid.clone());
        let out = decode_vars(&mut tape, &dec, z, coords)?;
        let masks = tape.softmax(out.logits, 0)?;
        let mk = tape.slice(masks, 0, k, k + 1)?;
        let pxv = tape.constant(px.clone());
        let num = tape.matmul(mk, pxv)?;
        let num = tape.slice(num, 1, c, c + 1)?;
        let num = tape.sum(num)?;
        let den = tape.sum(mk)?;
        let cen = tape.div(num, den)?;
        let g = tape.backward(cen)?;
        let gz = g.wrt(z);
        row.copy_from_slice(&gz.data()[k * CTX_DIM..(k + 1) * CTX_DIM]);
    }
    Ok(rows)
}

/// Solves `A dyn = rhs` for the 2x2 system that maps slot dynamics to a
/// one-step centroid displacement.
fn solve2(a: [[f64; 2]; 2], rhs: [f64; 2], what: &str) -> Result<[f64; 2]> {
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    let scale = a.iter().flatten().map(|v| v.abs()).fold(0.0, f64::max);
    if !det.is_finite() || det.abs() <= 1e-10 * scale.max(1e-300) * scale.max(1e-300) || scale == 0.0 {
        return Err(CoreError::Singular(format!("{what}: determinant {det:e}")));
    }
    Ok([
        (rhs[0] * a[1][1] - rhs[1] * a[0][1]) / det,
        (a[0][0] * rhs[1] - a[1][0] * rhs[0]) / det,
    ])
}

/// Dynamics that make the transition hold the context still in the least
/// squares sense, for slots without an object.
fn resting_dyn(model: &SceneModel) -> [f64; DYN_DIM] {
    let t = &model.params.interaction.trans;
    let (w, b) = (t.w.data(), t.b.data());
    // normal equations of min |W^T d + b|
    let mut g = [[0.0; 2]; 2];
    let mut r = [0.0; 2];
    for i in 0..2 {
        for j in 0..2 {
            g[i][j] = (0..CTX_DIM).map(|o| w[i * CTX_DIM + o] * w[j * CTX_DIM + o]).sum();
        }
        r[i] = -(0..CTX_DIM).map(|o| w[i * CTX_DIM + o] * b[o]).sum::<f64>();
    }
    solve2(g, r, "resting dynamics").unwrap_or([0.0; 2])
}

/// Latents built from an episode's ground truth: contexts from a
/// context-only refinement of frame 0, dynamics solved from the true
/// velocities through the decoder's centroid Jacobian and the transition,
/// mass and charge from the calibration maps. Slots without an object get
/// resting dynamics and zero mass and charge latents.
pub fn inject_oracle(
    ep: &Episode,
    scene: &SceneConfig,
    model: &SceneModel,
    cfg: &InferenceConfig,
    calib: &Calibration,
    rng: &mut ChaCha8Rng,
) -> Result<OracleLatents> {
    let clip = Clip::from_episode(ep, 0, 1)?;
    let post = infer_context(&clip, model, cfg, rng)?;
    let mut latents = post.mean_latents();
    let ctx = ctx_of(&latents);
    let (h, w) = (model.config.height, model.config.width);
    let out = decode(&ctx, h, w, &model.params)?;
    let binding = bind_slots(&out.masks, ep, 0)?;
    let frame0_mse = mse(&out.composite(), &clip.frame(0));
    let b = ep.states[0].bounds;
    let ppu = (w as f64 / b.width(), h as f64 / b.height());
    let trans = &model.params.interaction.trans;
    let rest = resting_dyn(model);
    for (slot, l) in latents.iter_mut().enumerate() {
        let Some(o) = binding.object_of_slot(slot) else {
            l.dyn_ = rest;
            l.m = 0.0;
            l.c = 0.0;
            continue;
        };
        let obj = &ep.states[0].objects[o];
        let v_px = [
            obj.velocity.x * scene.physics.dt * ppu.0,
            obj.velocity.y * scene.physics.dt * ppu.1,
        ];
        let jac = centroid_jacobian(model, &ctx, slot)?;
        let (tw, tb) = (trans.w.data(), trans.b.data());
        let mut a = [[0.0; 2]; 2];
        let mut rhs = v_px;
        for r in 0..2 {
            for d in 0..2 {
                a[r][d] = (0..CTX_DIM).map(|c| jac[r][c] * tw[d * CTX_DIM + c]).sum();
            }
            rhs[r] -= (0..CTX_DIM).map(|c| jac[r][c] * tb[c]).sum::<f64>();
        }
        l.dyn_ = solve2(a, rhs, &format!("dynamics of slot {slot}"))?;
        l.m = calib.mass_latent(obj.mass);
        l.c = calib.charge_latent(obj.charge);
    }
    Ok(OracleLatents {
        latents,
        binding,
        frame0_mse,
    })
}

// ---------------------------------------------------------------- regenerate / predict

#[derive(Clone, Debug, PartialEq)]
pub struct Regeneration {
    /// Composite frames `[H, W, 3]`, one per clip frame.
    pub frames: Vec<Tensor>,
    pub mse: Vec<f64>,
    pub psnr: Vec<f64>,
    pub inference: InferenceResult,
}

/// Composite frames of a rollout from `latents` over `steps` steps.
pub fn render_latents(model: &SceneModel, latents: &[ObjectLatent], steps: usize, gates: Gates) -> Result<(Rollout, Vec<Tensor>)> {
    let r = rollout(latents, steps, &model.params, gates, model.config.literal_force_product)?;
    let frames = decode_rollout(model, &r)?.iter().map(SlotDecodeOutput::composite).collect();
    Ok((r, frames))
}

/// Infers the clip, rolls out over its length and compares each decoded
/// frame with the input.
pub fn regenerate(clip: &Clip, model: &SceneModel, cfg: &InferenceConfig, rng: &mut ChaCha8Rng) -> Result<Regeneration> {
    let inference = infer(clip, model, cfg, rng)?;
    let (_, frames) = render_latents(model, &inference.latents, clip.frames - 1, cfg.gates)?;
    let mse: Vec<f64> = frames.iter().enumerate().map(|(t, f)| mse(f, &clip.frame(t))).collect();
    Ok(Regeneration {
        psnr: mse.iter().map(|&m| psnr(m)).collect(),
        frames,
        mse,
        inference,
    })
}

/// Frames `N+1..=T` from latents inferred on an `N+1`-frame clip.
pub fn predict_from_latents(model: &SceneModel, latents: &[ObjectLatent], n: usize, t: usize, gates: Gates) -> Result<Vec<Tensor>> {
    if t < n {
        return Err(CoreError::InvalidArgument(format!(
            "prediction horizon {t} is before the observed horizon {n}"
        )));
    }
    if t == n {
        return Ok(Vec::new());
    }
    let (_, frames) = render_latents(model, latents, t, gates)?;
    Ok(frames[n + 1..].to_vec())
}

/// Infers on `clip` (`N+1` frames) and continues the rollout to step `t`.
pub fn predict_future(clip: &Clip, t: usize, model: &SceneModel, cfg: &InferenceConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Tensor>> {
    let n = clip.frames - 1;
    if t < n {
        return Err(CoreError::InvalidArgument(format!(
            "prediction horizon {t} is before the observed horizon {n}"
        )));
    }
    if t == n {
        return Ok(Vec::new());
    }
    let inference = infer(clip, model, cfg, rng)?;
    predict_from_latents(model, &inference.latents, n, t, cfg.gates)
}

/// Per-offset MSE of predictions for frames `N+1..=T` of `ep`, observing
/// frames `0..=N`.
pub fn prediction_mse(ep: &Episode, n: usize, t: usize, model: &SceneModel, cfg: &InferenceConfig, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let full = Clip::from_episode(ep, 0, t + 1)?;
    let clip = Clip::from_episode(ep, 0, n + 1)?;
    let pred = predict_future(&clip, t, model, cfg, rng)?;
    Ok(pred
        .iter()
        .enumerate()
        .map(|(i, f)| mse(f, &full.frame(n + 1 + i)))
        .collect())
}

// ---------------------------------------------------------------- interventions

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Intervention {
    Identity,
    FlipCharge { slot: usize },
    SetCharge { slot: usize, value: f64 },
    ScaleMassLatent { slot: usize, factor: f64 },
    SetDynComponent { slot: usize, dim: usize, value: f64 },
}

impl Intervention {
    pub fn slot(&self) -> Option<usize> {
        match *self {
            Intervention::Identity => None,
            Intervention::FlipCharge { slot }
            | Intervention::SetCharge { slot, .. }
            | Intervention::ScaleMassLatent { slot, .. }
            | Intervention::SetDynComponent { slot, .. } => Some(slot),
        }
    }

    /// Edits a copy of the step-0 latents.
    pub fn apply(&self, latents: &[ObjectLatent]) -> Result<Vec<ObjectLatent>> {
        let mut out = latents.to_vec();
        if let Some(slot) = self.slot() {
            if slot >= out.len() {
                return Err(CoreError::UnboundSlot(slot));
            }
        }
        match *self {
            Intervention::Identity => {}
            Intervention::FlipCharge { slot } => out[slot].c = -out[slot].c,
            Intervention::SetCharge { slot, value } => out[slot].c = value,
            Intervention::ScaleMassLatent { slot, factor } => out[slot].m *= factor,
            Intervention::SetDynComponent { slot, dim, value } => {
                if dim >= DYN_DIM {
                    return Err(CoreError::InvalidArgument(format!("dyn has no component {dim}")));
                }
                out[slot].dyn_[dim] = value;
            }
        }
        Ok(out)
    }

    /// Parses `identity`, `charge:slot=2:flip`, `charge:slot=2:set=-1`,
    /// `mass:slot=1:scale=0.5` or `dyn:slot=0:dim=0:set=1.5`.
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || CoreError::InvalidArgument(format!("cannot parse edit {s:?}"));
        let parts: Vec<&str> = s.trim().split(':').collect();
        let kv = |p: &str, key: &str| -> Option<String> {
            p.strip_prefix(key).and_then(|r| r.strip_prefix('=')).map(str::to_string)
        };
        let num = |v: Option<String>| v.and_then(|v| v.parse::<f64>().ok()).filter(|v| v.is_finite());
        let idx = |v: Option<String>| v.and_then(|v| v.parse::<usize>().ok());
        match parts.as_slice() {
            ["identity"] => Ok(Intervention::Identity),
            ["charge", slot, "flip"] => Ok(Intervention::FlipCharge {
                slot: idx(kv(slot, "slot")).ok_or_else(bad)?,
            }),
            ["charge", slot, set] => Ok(Intervention::SetCharge {
                slot: idx(kv(slot, "slot")).ok_or_else(bad)?,
                value: num(kv(set, "set")).ok_or_else(bad)?,
            }),
            ["mass", slot, scale] => Ok(Intervention::ScaleMassLatent {
                slot: idx(kv(slot, "slot")).ok_or_else(bad)?,
                factor: num(kv(scale, "scale")).ok_or_else(bad)?,
            }),
            ["dyn", slot, dim, set] => Ok(Intervention::SetDynComponent {
                slot: idx(kv(slot, "slot")).ok_or_else(bad)?,
                dim: idx(kv(dim, "dim")).ok_or_else(bad)?,
                value: num(kv(set, "set")).ok_or_else(bad)?,
            }),
            _ => Err(bad()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameEvent {
    pub frame: usize,
    /// Any pair involving the target slot with collision gate above 0.5.
    pub collision: bool,
    /// Centroid distance from the target slot to its partner.
    pub distance: Option<f64>,
    /// Whether that distance shrank since the previous frame.
    pub approach: Option<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Counterfactual {
    pub baseline: Rollout,
    pub edited: Rollout,
    pub baseline_frames: Vec<Tensor>,
    pub edited_frames: Vec<Tensor>,
    /// Per-slot soft centroids per frame.
    pub baseline_centroids: Vec<Vec<[f64; 2]>>,
    pub edited_centroids: Vec<Vec<[f64; 2]>>,
    /// L2 distance between the two latent stacks per frame.
    pub latent_divergence: Vec<f64>,
    /// MSE between the two composite frames per frame.
    pub pixel_divergence: Vec<f64>,
    pub events: Vec<FrameEvent>,
    pub partner: Option<usize>,
}

fn latent_distance(a: &[ObjectLatent], b: &[ObjectLatent]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.to_vec().into_iter().zip(y.to_vec()).map(|(u, v)| (u - v) * (u - v)))
        .sum::<f64>()
        .sqrt()
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Rolls out `latents` unedited and edited for `steps` steps. `bound` lists
/// the slots bound to objects; the edit target must be one of them. The
/// partner for event annotations is the nearest other bound slot at frame 0.
pub fn counterfactual(
    model: &SceneModel,
    latents: &[ObjectLatent],
    edit: &Intervention,
    steps: usize,
    gates: Gates,
    bound: &[usize],
) -> Result<Counterfactual> {
    if let Some(slot) = edit.slot() {
        if !bound.contains(&slot) {
            return Err(CoreError::UnboundSlot(slot));
        }
    }
    let edited_latents = edit.apply(latents)?;
    let literal = model.config.literal_force_product;
    let baseline = rollout(latents, steps, &model.params, gates, literal)?;
    let edited = rollout(&edited_latents, steps, &model.params, gates, literal)?;
    let dec_b = decode_rollout(model, &baseline)?;
    let dec_e = decode_rollout(model, &edited)?;
    let baseline_frames: Vec<Tensor> = dec_b.iter().map(SlotDecodeOutput::composite).collect();
    let edited_frames: Vec<Tensor> = dec_e.iter().map(SlotDecodeOutput::composite).collect();
    let baseline_centroids: Vec<Vec<[f64; 2]>> = dec_b.iter().map(slot_centroids).collect();
    let edited_centroids: Vec<Vec<[f64; 2]>> = dec_e.iter().map(slot_centroids).collect();
    let target = edit.slot();
    let partner = target.and_then(|t| {
        bound
            .iter()
            .copied()
            .filter(|&s| s != t)
            .min_by(|&a, &b| {
                let c = &baseline_centroids[0];
                dist(c[t], c[a]).total_cmp(&dist(c[t], c[b]))
            })
    });
    let mut events = Vec::with_capacity(steps + 1);
    let mut prev: Option<f64> = None;
    for f in 0..=steps {
        let collision = match (target, f) {
            (Some(t), f) if f < steps => edited.forces[f]
                .pairs
                .iter()
                .any(|p| (p.i == t || p.j == t) && p.attn > 0.5),
            _ => false,
        };
        let distance = target.zip(partner).map(|(t, p)| dist(edited_centroids[f][t], edited_centroids[f][p]));
        let approach = distance.zip(prev).map(|(d, p)| d < p);
        prev = distance;
        events.push(FrameEvent {
            frame: f,
            collision,
            distance,
            approach,
        });
    }
    Ok(Counterfactual {
        latent_divergence: baseline
            .latents
            .iter()
            .zip(&edited.latents)
            .map(|(a, b)| latent_distance(a, b))
            .collect(),
        pixel_divergence: baseline_frames.iter().zip(&edited_frames).map(|(a, b)| mse(a, b)).collect(),
        baseline,
        edited,
        baseline_frames,
        edited_frames,
        baseline_centroids,
        edited_centroids,
        events,
        partner,
    })
}

/// Least-squares slope of `ys` against their indices; 0 for fewer than two.
pub fn slope(ys: &[f64]) -> f64 {
    let n = ys.len();
    if n < 2 {
        return 0.0;
    }
    let xs: Vec<f64> = (0..n).map(|i| i as f64).collect();
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Trend of the pairwise radial velocity: the slope over time of the
/// per-frame change in distance between two centroid tracks. Positive
/// means the pair increasingly retreats, negative increasingly approaches.
pub fn radial_trend(centroids: &[Vec<[f64; 2]>], a: usize, b: usize) -> f64 {
    let d: Vec<f64> = centroids.iter().map(|c| dist(c[a], c[b])).collect();
    let dd: Vec<f64> = d.windows(2).map(|w| w[1] - w[0]).collect();
    slope(&dd)
}

// ---------------------------------------------------------------- reports

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub metric: String,
    pub value: f64,
    /// Number of scored items (pairs or objects).
    pub n: usize,
    pub episodes: usize,
    /// Per-item values the aggregate is computed from.
    pub values: Vec<f64>,
    /// Ground truth paired with `values`, for correlation metrics.
    pub targets: Vec<f64>,
    /// Episode index of each item.
    pub items: Vec<usize>,
    pub seed: u64,
    /// Sign applied to the latent, fixed on the calibration split.
    pub sign: f64,
    pub threshold: Option<f64>,
    /// Rows are truth, columns prediction, in `[attract, repel, none]`.
    pub confusion: Option<[[usize; 3]; 3]>,
    /// Permutation estimate of chance level.
    pub chance: Option<f64>,
}

impl ProbeReport {
    /// Recomputes the aggregate from the stored per-item values.
    pub fn recompute(&self) -> f64 {
        match self.metric.as_str() {
            "mass_spearman" => spearman(&self.values, &self.targets),
            _ => self.values.iter().sum::<f64>() / self.values.len().max(1) as f64,
        }
    }
}

/// Average ranks, 1-based, ties sharing the mean of their positions.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with tied ranks averaged; 0 if either side
/// is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    if a.len() < 2 {
        return 0.0;
    }
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma) * (x - ma)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb) * (y - mb)).sum();
    if va <= 0.0 || vb <= 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

// ---------------------------------------------------------------- charge probe

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairLabel {
    Attract,
    Repel,
    None,
}

impl PairLabel {
    pub fn from_charges(qi: f64, qj: f64) -> Self {
        let p = qi * qj;
        if p > 0.0 {
            PairLabel::Repel
        } else if p < 0.0 {
            PairLabel::Attract
        } else {
            PairLabel::None
        }
    }

    fn index(self) -> usize {
        match self {
            PairLabel::Attract => 0,
            PairLabel::Repel => 1,
            PairLabel::None => 2,
        }
    }
}

/// One object pair: the product of the two charge latents and the truth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChargeSample {
    pub episode: usize,
    pub score: f64,
    pub truth: PairLabel,
}

/// Charge samples for every object pair of an episode.
pub fn charge_samples(episode: usize, latents: &[ObjectLatent], binding: &Binding, ep: &Episode) -> Vec<ChargeSample> {
    let objs = &ep.states[0].objects;
    let mut out = Vec::new();
    for i in 0..objs.len() {
        for j in i + 1..objs.len() {
            let (si, sj) = (binding.slot_of_object[i], binding.slot_of_object[j]);
            out.push(ChargeSample {
                episode,
                score: latents[si].c * latents[sj].c,
                truth: PairLabel::from_charges(objs[i].charge, objs[j].charge),
            });
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChargeRule {
    pub sign: f64,
    pub threshold: f64,
}

impl ChargeRule {
    pub fn predict(&self, score: f64) -> PairLabel {
        if score.abs() < self.threshold {
            PairLabel::None
        } else if self.sign * score > 0.0 {
            PairLabel::Repel
        } else {
            PairLabel::Attract
        }
    }

    fn accuracy(&self, s: &[ChargeSample]) -> f64 {
        s.iter().filter(|x| self.predict(x.score) == x.truth).count() as f64 / s.len() as f64
    }
}

/// Sign convention and "none" threshold maximizing 3-class accuracy.
pub fn calibrate_charge(calib: &[ChargeSample]) -> Result<ChargeRule> {
    if calib.is_empty() {
        return Err(CoreError::EmptySplit("charge calibration"));
    }
    let mut mags: Vec<f64> = calib.iter().map(|s| s.score.abs()).collect();
    mags.sort_by(f64::total_cmp);
    mags.dedup();
    let mut thresholds = vec![0.0];
    thresholds.extend(mags.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    thresholds.push(mags.last().copied().unwrap_or(0.0) + 1.0);
    let mut best = (ChargeRule { sign: 1.0, threshold: 0.0 }, -1.0);
    for sign in [1.0, -1.0] {
        for &threshold in &thresholds {
            let rule = ChargeRule { sign, threshold };
            let acc = rule.accuracy(calib);
            if acc > best.1 {
                best = (rule, acc);
            }
        }
    }
    Ok(best.0)
}

/// Calibrates on `calib`, scores `eval`: per-pair correctness, confusion
/// and a permutation chance level.
pub fn probe_charge(calib: &[ChargeSample], eval: &[ChargeSample], seed: u64) -> Result<ProbeReport> {
    if eval.is_empty() {
        return Err(CoreError::EmptySplit("charge evaluation"));
    }
    let rule = calibrate_charge(calib)?;
    let mut confusion = [[0usize; 3]; 3];
    let preds: Vec<PairLabel> = eval.iter().map(|s| rule.predict(s.score)).collect();
    for (s, p) in eval.iter().zip(&preds) {
        confusion[s.truth.index()][p.index()] += 1;
    }
    let values: Vec<f64> = eval.iter().zip(&preds).map(|(s, p)| f64::from(u8::from(*p == s.truth))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled = preds.clone();
    let rounds = 200;
    let mut chance = 0.0;
    for _ in 0..rounds {
        shuffled.shuffle(&mut rng);
        chance += eval.iter().zip(&shuffled).filter(|(s, p)| **p == s.truth).count() as f64 / eval.len() as f64;
    }
    let mut eps: Vec<usize> = eval.iter().map(|s| s.episode).collect();
    let items = eps.clone();
    eps.sort_unstable();
    eps.dedup();
    Ok(ProbeReport {
        metric: "charge_accuracy".into(),
        value: values.iter().sum::<f64>() / values.len() as f64,
        n: values.len(),
        episodes: eps.len(),
        targets: eval.iter().map(|s| s.truth.index() as f64).collect(),
        values,
        items,
        seed,
        sign: rule.sign,
        threshold: Some(rule.threshold),
        confusion: Some(confusion),
        chance: Some(chance / rounds as f64),
    })
}

// ---------------------------------------------------------------- mass probe

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MassSample {
    pub episode: usize,
    pub z_m: f64,
    pub mass: f64,
}

pub fn mass_samples(episode: usize, latents: &[ObjectLatent], binding: &Binding, ep: &Episode) -> Vec<MassSample> {
    ep.states[0]
        .objects
        .iter()
        .zip(&binding.slot_of_object)
        .map(|(o, &s)| MassSample {
            episode,
            z_m: latents[s].m,
            mass: o.mass,
        })
        .collect()
}

pub const MIN_MASS_EPISODES: usize = 5;

/// Spearman correlation between `sign * z_m` and true mass on `eval`, with
/// the sign fixed by the correlation on `calib`.
pub fn probe_mass(calib: &[MassSample], eval: &[MassSample], seed: u64) -> Result<ProbeReport> {
    if calib.is_empty() {
        return Err(CoreError::EmptySplit("mass calibration"));
    }
    let mut eps: Vec<usize> = eval.iter().map(|s| s.episode).collect();
    eps.sort_unstable();
    eps.dedup();
    if eps.len() < MIN_MASS_EPISODES {
        return Err(CoreError::TooFewEpisodes {
            need: MIN_MASS_EPISODES,
            got: eps.len(),
        });
    }
    let cz: Vec<f64> = calib.iter().map(|s| s.z_m).collect();
    let cm: Vec<f64> = calib.iter().map(|s| s.mass).collect();
    let sign = if spearman(&cz, &cm) < 0.0 { -1.0 } else { 1.0 };
    let values: Vec<f64> = eval.iter().map(|s| sign * s.z_m).collect();
    let targets: Vec<f64> = eval.iter().map(|s| s.mass).collect();
    Ok(ProbeReport {
        metric: "mass_spearman".into(),
        value: spearman(&values, &targets),
        n: values.len(),
        episodes: eps.len(),
        items: eval.iter().map(|s| s.episode).collect(),
        values,
        targets,
        seed,
        sign,
        threshold: None,
        confusion: None,
        chance: None,
    })
}

// ---------------------------------------------------------------- dumps and ablations

/// Rolls out `latents` and writes the per-pair force breakdown as CSV.
pub fn dump_intermediates(model: &SceneModel, latents: &[ObjectLatent], steps: usize, gates: Gates, path: &Path) -> Result<usize> {
    let r = rollout(latents, steps, &model.params, gates, model.config.literal_force_product)?;
    write_breakdown_csv(&r, path)
}

/// One trained arm of an ablation table.
pub struct Arm<'a> {
    pub name: String,
    pub model: Option<&'a SceneModel>,
    pub gates: Gates,
}

/// Episodes the ablation metrics run on.
pub struct AblationData<'a> {
    pub collision: Vec<&'a Episode>,
    pub charge_calib: Vec<&'a Episode>,
    pub charge_eval: Vec<&'a Episode>,
    pub mass_calib: Vec<&'a Episode>,
    pub mass_eval: Vec<&'a Episode>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: String,
    pub metric: String,
    pub value: f64,
    pub n: usize,
}

pub struct AblationSettings {
    pub inference: InferenceConfig,
    /// Observed horizon `N`; clips hold `N + 1` frames.
    pub horizon: usize,
    /// Last predicted step.
    pub predict_to: usize,
    pub seeds: Vec<u64>,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Mean prediction MSE over frames `N+1..=T` and episodes, for one seed.
pub fn mean_prediction_mse(episodes: &[&Episode], model: &SceneModel, s: &AblationSettings, gates: Gates, seed: u64) -> Result<f64> {
    let cfg = InferenceConfig {
        gates,
        ..s.inference.clone()
    };
    let mut total = 0.0;
    let mut count = 0;
    for (i, ep) in episodes.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let errs = prediction_mse(ep, s.horizon, s.predict_to, model, &cfg, &mut rng)?;
        total += errs.iter().sum::<f64>();
        count += errs.len();
    }
    Ok(total / count.max(1) as f64)
}

/// Runs inference on each episode and collects charge or mass samples.
fn probe_samples<T>(
    episodes: &[&Episode],
    model: &SceneModel,
    cfg: &InferenceConfig,
    frames: usize,
    seed: u64,
    offset: usize,
    f: impl Fn(usize, &[ObjectLatent], &Binding, &Episode) -> Vec<T>,
) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, ep) in episodes.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add((offset + i) as u64));
        let (res, binding) = infer_bound(ep, frames, model, cfg, &mut rng)?;
        out.extend(f(offset + i, &res.latents, &binding, ep));
    }
    Ok(out)
}

pub fn charge_report(data: &AblationData, model: &SceneModel, cfg: &InferenceConfig, frames: usize, seed: u64) -> Result<ProbeReport> {
    let calib = probe_samples(&data.charge_calib, model, cfg, frames, seed, 0, charge_samples)?;
    let eval = probe_samples(&data.charge_eval, model, cfg, frames, seed, data.charge_calib.len(), charge_samples)?;
    probe_charge(&calib, &eval, seed)
}

pub fn mass_report(data: &AblationData, model: &SceneModel, cfg: &InferenceConfig, frames: usize, seed: u64) -> Result<ProbeReport> {
    let calib = probe_samples(&data.mass_calib, model, cfg, frames, seed, 0, mass_samples)?;
    let eval = probe_samples(&data.mass_eval, model, cfg, frames, seed, data.mass_calib.len(), mass_samples)?;
    probe_mass(&calib, &eval, seed)
}

/// The same regeneration, prediction and probe metrics for every arm.
/// Prediction MSE is the median over `settings.seeds`.
pub fn ablation_suite(arms: &[Arm], data: &AblationData, settings: &AblationSettings) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    let frames = settings.horizon + 1;
    let seed0 = settings.seeds.first().copied().unwrap_or(0);
    for arm in arms {
        let model = arm.model.ok_or_else(|| CoreError::MissingCheckpoint(arm.name.clone()))?;
        let cfg = InferenceConfig {
            gates: arm.gates,
            ..settings.inference.clone()
        };
        let mut regen = Vec::new();
        for (i, ep) in data.collision.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed0.wrapping_add(i as u64));
            let clip = Clip::from_episode(ep, 0, frames)?;
            let r = regenerate(&clip, model, &cfg, &mut rng)?;
            regen.push(r.mse.iter().sum::<f64>() / r.mse.len() as f64);
        }
        rows.push(AblationRow {
            arm: arm.name.clone(),
            metric: "regeneration_mse".into(),
            value: regen.iter().sum::<f64>() / regen.len().max(1) as f64,
            n: regen.len(),
        });
        let mut per_seed = settings
            .seeds
            .iter()
            .map(|&s| mean_prediction_mse(&data.collision, model, settings, arm.gates, s))
            .collect::<Result<Vec<f64>>>()?;
        rows.push(AblationRow {
            arm: arm.name.clone(),
            metric: "prediction_mse".into(),
            value: median(&mut per_seed),
            n: data.collision.len(),
        });
        if !data.charge_eval.is_empty() {
            let r = charge_report(data, model, &cfg, frames, seed0)?;
            rows.push(AblationRow {
                arm: arm.name.clone(),
                metric: "charge_accuracy".into(),
                value: r.value,
                n: r.n,
            });
        }
        if !data.mass_eval.is_empty() {
            let r = mass_report(data, model, &cfg, frames, seed0)?;
            rows.push(AblationRow {
                arm: arm.name.clone(),
                metric: "mass_spearman".into(),
                value: r.value,
                n: r.n,
            });
        }
    }
    Ok(rows)
}

pub fn write_rows_csv(rows: &[AblationRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CoreError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    })?;
    for r in rows {
        w.serialize(r).map_err(|e| CoreError::Io {
            path: path.to_path_buf(),
            source: e.into(),
        })?;
    }
    w.flush().map_err(crate::error::io_err(path))
}
