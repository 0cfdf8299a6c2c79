//! Per-slot latent layout: `[ctx 0..12 | dyn 12..14 | m 14 | c 15]`.

use autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub const CTX_DIM: usize = 12;
pub const DYN_DIM: usize = 2;
pub const LATENT_DIM: usize = CTX_DIM + DYN_DIM + 2;

pub const CTX: std::ops::Range<usize> = 0..CTX_DIM;
pub const DYN: std::ops::Range<usize> = CTX_DIM..CTX_DIM + DYN_DIM;
pub const MASS: usize = CTX_DIM + DYN_DIM;
pub const CHARGE: usize = MASS + 1;

/// Groups of latent entries, used to freeze parts of the posterior.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Block {
    Ctx,
    Dyn,
    Mass,
    Charge,
}

impl Block {
    pub fn range(self) -> std::ops::Range<usize> {
        match self {
            Block::Ctx => CTX,
            Block::Dyn => DYN,
            Block::Mass => MASS..MASS + 1,
            Block::Charge => CHARGE..CHARGE + 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectLatent {
    pub ctx: [f64; CTX_DIM],
    pub dyn_: [f64; DYN_DIM],
    pub m: f64,
    pub c: f64,
}

impl Default for ObjectLatent {
    fn default() -> Self {
        Self {
            ctx: [0.0; CTX_DIM],
            dyn_: [0.0; DYN_DIM],
            m: 0.0,
            c: 0.0,
        }
    }
}

impl ObjectLatent {
    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != LATENT_DIM {
            return Err(CoreError::LatentDim {
                expected: LATENT_DIM,
                got: v.len(),
            });
        }
        let mut out = Self::default();
        out.ctx.copy_from_slice(&v[CTX]);
        out.dyn_.copy_from_slice(&v[DYN]);
        out.m = v[MASS];
        out.c = v[CHARGE];
        Ok(out)
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(LATENT_DIM);
        v.extend_from_slice(&self.ctx);
        v.extend_from_slice(&self.dyn_);
        v.push(self.m);
        v.push(self.c);
        v
    }
}

/// Stacks slot latents into a `K x 16` tensor.
pub fn stack(latents: &[ObjectLatent]) -> Tensor {
    let data = latents.iter().flat_map(|l| l.to_vec()).collect();
    Tensor::new(vec![latents.len(), LATENT_DIM], data).expect("row-major stack")
}

/// Splits a `K x 16` tensor into slot latents.
pub fn unstack(t: &Tensor) -> Result<Vec<ObjectLatent>> {
    if t.rank() != 2 || t.shape()[1] != LATENT_DIM {
        return Err(CoreError::LatentDim {
            expected: LATENT_DIM,
            got: t.shape().last().copied().unwrap_or(0),
        });
    }
    t.data().chunks(LATENT_DIM).map(ObjectLatent::from_slice).collect()
}
