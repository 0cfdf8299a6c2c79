//! Spatial-broadcast decoder and the per-pixel Gaussian mixture likelihood.

use autodiff::{Tape, Tensor, Var};

use crate::error::{CoreError, Result};
use crate::latent::CTX_DIM;
use crate::params::{Decoder, ModelParams};

/// Pixel-center coordinates in `[-1, 1]`, `[H*W, 2]` as `(x, y)` rows.
pub fn coord_grid(height: usize, width: usize) -> Tensor {
    let mut data = Vec::with_capacity(height * width * 2);
    for y in 0..height {
        for x in 0..width {
            data.push(2.0 * (x as f64 + 0.5) / width as f64 - 1.0);
            data.push(2.0 * (y as f64 + 0.5) / height as f64 - 1.0);
        }
    }
    Tensor::new(vec![height * width, 2], data).expect("grid shape")
}

/// Decoder outputs on a tape for `B` latents over `P` pixels.
#[derive(Clone, Copy, Debug)]
pub struct DecodeVars {
    /// `[B, P, 3]` in `(0, 1)`.
    pub means: Var,
    /// `[B, P]`.
    pub logits: Var,
}

/// Decodes every row of `z_ctx: [B, 12]` over the grid `coords: [P, 2]`.
pub fn decode_vars(tape: &mut Tape, dec: &Decoder<Var>, z_ctx: Var, coords: Var) -> Result<DecodeVars> {
    let zs = tape.shape(z_ctx).to_vec();
    if zs.len() != 2 || zs[1] != CTX_DIM {
        return Err(CoreError::LatentDim {
            expected: CTX_DIM,
            got: zs.last().copied().unwrap_or(0),
        });
    }
    let b = zs[0];
    let p = tape.shape(coords)[0];
    let h0 = tape.shape(dec.in_b)[0];
    let zpart = tape.matmul(z_ctx, dec.in_z)?;
    let zpart = tape.reshape(zpart, &[b, 1, h0])?;
    let xy = tape.affine(coords, dec.in_xy, dec.in_b)?;
    let pre = tape.broadcast_add(zpart, xy, &[b, p, h0])?;
    let pre = tape.reshape(pre, &[b * p, h0])?;
    let mut h = tape.relu(pre)?;
    for layer in &dec.hidden {
        let a = tape.affine(h, layer.w, layer.b)?;
        h = tape.relu(a)?;
    }
    let out = tape.affine(h, dec.out.w, dec.out.b)?;
    let out = tape.reshape(out, &[b, p, 4])?;
    let raw_means = tape.slice(out, 2, 0, 3)?;
    let means = tape.sigmoid(raw_means)?;
    let logits = tape.slice(out, 2, 3, 4)?;
    let logits = tape.reshape(logits, &[b, p])?;
    Ok(DecodeVars { means, logits })
}

/// Log-normalizer of the isotropic three-channel Gaussian.
pub fn gaussian_log_norm(sigma: f64) -> f64 {
    -1.5 * (2.0 * std::f64::consts::PI * sigma * sigma).ln()
}

/// Per-frame mixture log-likelihood on a tape.
///
/// `x: [F, P, 3]`, `means: [F, K, P, 3]`, `logits: [F, K, P]`; returns `[F]`.
pub fn mixture_ll_vars(tape: &mut Tape, x: &Tensor, means: Var, logits: Var, sigma: f64) -> Result<Var> {
    if !(sigma > 0.0) {
        return Err(CoreError::InvalidArgument(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    let ms = tape.shape(means).to_vec();
    let (f, k, p) = (ms[0], ms[1], ms[2]);
    if x.shape() != [f, p, 3] {
        return Err(CoreError::InvalidArgument(format!(
            "frames shaped {:?} do not match decoder output {:?}",
            x.shape(),
            ms
        )));
    }
    let xv = tape.constant(x.clone().reshape(&[f, 1, p, 3])?);
    let neg = tape.neg(means)?;
    let diff = tape.broadcast_add(xv, neg, &[f, k, p, 3])?;
    let sq = tape.square(diff)?;
    let sq = tape.sum_axis(sq, 3)?;
    let log_n = tape.scale(sq, -0.5 / (sigma * sigma))?;
    let log_n = tape.add_scalar(log_n, gaussian_log_norm(sigma))?;
    let log_m = tape.log_softmax(logits, 1)?;
    let joint = tape.add(log_n, log_m)?;
    let per_pixel = tape.logsumexp(joint, 1)?;
    Ok(tape.sum_axis(per_pixel, 1)?)
}

/// Value-level decoder output for `K` slots.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotDecodeOutput {
    /// `[K, H, W, 3]`
    pub means: Tensor,
    /// `[K, H, W]`
    pub mask_logits: Tensor,
    /// `[K, H, W]`, softmax of the logits over slots.
    pub masks: Tensor,
}

impl SlotDecodeOutput {
    pub fn slots(&self) -> usize {
        self.means.shape()[0]
    }

    /// Mixture mean image `sum_k m_k mu_k`, `[H, W, 3]`.
    pub fn composite(&self) -> Tensor {
        let s = self.means.shape();
        let (k, h, w) = (s[0], s[1], s[2]);
        let p = h * w;
        let mut out = vec![0.0; p * 3];
        for slot in 0..k {
            for px in 0..p {
                let m = self.masks.data()[slot * p + px];
                for c in 0..3 {
                    out[px * 3 + c] += m * self.means.data()[(slot * p + px) * 3 + c];
                }
            }
        }
        Tensor::new(vec![h, w, 3], out).expect("composite shape")
    }
}

/// Decodes `z_ctx: [K, 12]` onto an `height x width` grid.
pub fn decode(z_ctx: &Tensor, height: usize, width: usize, params: &ModelParams) -> Result<SlotDecodeOutput> {
    if z_ctx.rank() != 2 || z_ctx.shape()[1] != CTX_DIM {
        return Err(CoreError::LatentDim {
            expected: CTX_DIM,
            got: z_ctx.shape().last().copied().unwrap_or(0),
        });
    }
    let k = z_ctx.shape()[0];
    let mut tape = Tape::new();
    let dec = params.bind(&mut tape, false).decoder;
    let z = tape.constant(z_ctx.clone());
    let coords = tape.constant(coord_grid(height, width));
    let out = decode_vars(&mut tape, &dec, z, coords)?;
    let masks = tape.softmax(out.logits, 0)?;
    Ok(SlotDecodeOutput {
        means: tape.value(out.means).clone().reshape(&[k, height, width, 3])?,
        mask_logits: tape.value(out.logits).clone().reshape(&[k, height, width])?,
        masks: tape.value(masks).clone().reshape(&[k, height, width])?,
    })
}

/// `sum_i log sum_k m_ik N(x_i; mu_ik, sigma^2 I)` for one frame `x: [H, W, 3]`.
pub fn mixture_log_likelihood(x: &Tensor, out: &SlotDecodeOutput, sigma: f64) -> Result<f64> {
    let s = out.means.shape();
    let (k, h, w) = (s[0], s[1], s[2]);
    if x.shape() != [h, w, 3] {
        return Err(CoreError::FrameMismatch {
            expected: (h, w),
            got: (x.shape()[0], x.shape().get(1).copied().unwrap_or(0)),
        });
    }
    let mut tape = Tape::new();
    let means = tape.constant(out.means.clone().reshape(&[1, k, h * w, 3])?);
    let logits = tape.constant(out.mask_logits.clone().reshape(&[1, k, h * w])?);
    let xf = x.clone().reshape(&[1, h * w, 3])?;
    let ll = mixture_ll_vars(&mut tape, &xf, means, logits, sigma)?;
    Ok(tape.value(ll).data()[0])
}
