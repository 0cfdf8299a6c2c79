//! Model parameters. Every container is generic over its leaf type so the
//! same layout serves stored tensors (`Tensor`) and tape handles (`Var`).

use autodiff::{Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::latent::{CTX_DIM, DYN_DIM};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub decoder_hidden: Vec<usize>,
    /// Optional tanh hidden layer inside every interaction map.
    pub interaction_hidden: Option<usize>,
    /// Standard deviation of the per-channel pixel likelihood.
    pub sigma: f64,
    /// Use the product of the two partner sums instead of a per-pair sum.
    pub literal_force_product: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 48,
            decoder_hidden: vec![32, 32],
            interaction_hidden: None,
            sigma: 0.3,
            literal_force_product: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(CoreError::InvalidArgument("empty decoder grid".into()));
        }
        if self.decoder_hidden.is_empty() || self.decoder_hidden.contains(&0) {
            return Err(CoreError::InvalidArgument(
                "decoder needs at least one non-empty hidden layer".into(),
            ));
        }
        if !(self.sigma > 0.0) {
            return Err(CoreError::InvalidArgument(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    /// `[in, out]`
    pub w: T,
    /// `[out]`
    pub b: T,
}

/// A linear map, optionally preceded by one tanh hidden layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Map<T> {
    pub hidden: Option<Linear<T>>,
    pub out: Linear<T>,
}

/// Per-pixel MLP. The first layer is split into a slot part and a
/// coordinate part so the slot part is computed once per slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder<T> {
    pub in_z: T,
    pub in_xy: T,
    pub in_b: T,
    pub hidden: Vec<Linear<T>>,
    /// Three mean channels then one mask logit.
    pub out: Linear<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Interaction<T> {
    /// Pair gate from `[ctx_i; dyn_i; ctx_j; dyn_j]`.
    pub attn: Map<T>,
    /// Force direction from the same pair input.
    pub dir: Map<T>,
    /// Force intensity from `[m_i; dyn_i; m_j; dyn_j]`.
    pub intensity: Map<T>,
    /// Charge force from `[ctx_i; ctx_j]`.
    pub charge: Map<T>,
    /// Context displacement produced by the dynamics.
    pub trans: Linear<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub decoder: Decoder<T>,
    pub interaction: Interaction<T>,
}

pub type ModelParams = Model<Tensor>;
pub type BoundModel = Model<Var>;

pub const PAIR_DYN_IN: usize = 2 * (CTX_DIM + DYN_DIM);
pub const PAIR_MASS_IN: usize = 2 * (1 + DYN_DIM);
pub const PAIR_CTX_IN: usize = 2 * CTX_DIM;

impl<T> Linear<T> {
    fn map<U>(&self, name: &str, f: &mut impl FnMut(&str, &T) -> U) -> Linear<U> {
        Linear {
            w: f(&format!("{name}.w"), &self.w),
            b: f(&format!("{name}.b"), &self.b),
        }
    }
}

impl<T> Map<T> {
    fn map<U>(&self, name: &str, f: &mut impl FnMut(&str, &T) -> U) -> Map<U> {
        Map {
            hidden: self.hidden.as_ref().map(|h| h.map(&format!("{name}.hidden"), f)),
            out: self.out.map(&format!("{name}.out"), f),
        }
    }
}

impl<T> Model<T> {
    /// Rebuilds the model leaf by leaf, visiting leaves in a fixed order
    /// with dotted names.
    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> Model<U> {
        let d = &self.decoder;
        let i = &self.interaction;
        Model {
            decoder: Decoder {
                in_z: f("decoder.in_z", &d.in_z),
                in_xy: f("decoder.in_xy", &d.in_xy),
                in_b: f("decoder.in_b", &d.in_b),
                hidden: d
                    .hidden
                    .iter()
                    .enumerate()
                    .map(|(k, l)| l.map(&format!("decoder.hidden{k}"), &mut f))
                    .collect(),
                out: d.out.map("decoder.out", &mut f),
            },
            interaction: Interaction {
                attn: i.attn.map("interaction.attn", &mut f),
                dir: i.dir.map("interaction.dir", &mut f),
                intensity: i.intensity.map("interaction.intensity", &mut f),
                charge: i.charge.map("interaction.charge", &mut f),
                trans: i.trans.map("interaction.trans", &mut f),
            },
        }
    }

    /// Leaves in visiting order.
    pub fn leaves(&self) -> Vec<(String, &T)> {
        let mut names = Vec::new();
        self.map(|n, _| names.push(n.to_string()));
        let mut refs: Vec<&T> = Vec::new();
        collect_refs(self, &mut refs);
        names.into_iter().zip(refs).collect()
    }
}

fn collect_refs<'a, T>(m: &'a Model<T>, out: &mut Vec<&'a T>) {
    let lin = |l: &'a Linear<T>, out: &mut Vec<&'a T>| {
        out.push(&l.w);
        out.push(&l.b);
    };
    let map = |m: &'a Map<T>, out: &mut Vec<&'a T>| {
        if let Some(h) = &m.hidden {
            lin(h, out);
        }
        lin(&m.out, out);
    };
    let d = &m.decoder;
    out.push(&d.in_z);
    out.push(&d.in_xy);
    out.push(&d.in_b);
    for l in &d.hidden {
        lin(l, out);
    }
    lin(&d.out, out);
    let i = &m.interaction;
    map(&i.attn, out);
    map(&i.dir, out);
    map(&i.intensity, out);
    map(&i.charge, out);
    lin(&i.trans, out);
}

fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(&[fan_in, fan_out], |_| rng.random_range(-a..a))
}

fn linear(rng: &mut ChaCha8Rng, i: usize, o: usize) -> Linear<Tensor> {
    Linear {
        w: glorot(rng, i, o),
        b: Tensor::zeros(&[o]),
    }
}

fn map_init(rng: &mut ChaCha8Rng, i: usize, o: usize, hidden: Option<usize>) -> Map<Tensor> {
    match hidden {
        Some(h) => Map {
            hidden: Some(linear(rng, i, h)),
            out: linear(rng, h, o),
        },
        None => Map {
            hidden: None,
            out: linear(rng, i, o),
        },
    }
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let h0 = cfg.decoder_hidden[0];
        let a = (6.0 / (CTX_DIM + 2 + h0) as f64).sqrt();
        let in_z = Tensor::from_fn(&[CTX_DIM, h0], |_| rng.random_range(-a..a));
        let in_xy = Tensor::from_fn(&[2, h0], |_| rng.random_range(-a..a));
        let hidden = cfg
            .decoder_hidden
            .windows(2)
            .map(|w| linear(rng, w[0], w[1]))
            .collect();
        let out = linear(rng, *cfg.decoder_hidden.last().unwrap(), 4);
        let ih = cfg.interaction_hidden;
        Ok(Model {
            decoder: Decoder {
                in_z,
                in_xy,
                in_b: Tensor::zeros(&[h0]),
                hidden,
                out,
            },
            interaction: Interaction {
                attn: map_init(rng, PAIR_DYN_IN, 1, ih),
                dir: map_init(rng, PAIR_DYN_IN, 2, ih),
                intensity: map_init(rng, PAIR_MASS_IN, 1, ih),
                charge: map_init(rng, PAIR_CTX_IN, 2, ih),
                trans: linear(rng, DYN_DIM, CTX_DIM),
            },
        })
    }

    /// Puts every tensor on the tape, as leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundModel {
        self.map(|_, t| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
    }

    pub fn num_scalars(&self) -> usize {
        self.leaves().iter().map(|(_, t)| t.numel()).sum()
    }

    /// All parameters concatenated in visiting order.
    pub fn flatten(&self) -> Vec<f64> {
        self.leaves()
            .iter()
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect()
    }

    /// Inverse of [`ModelParams::flatten`].
    pub fn assign(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(CoreError::InvalidArgument(format!(
                "expected {} parameters, got {}",
                self.num_scalars(),
                flat.len()
            )));
        }
        let mut off = 0;
        *self = self.map(|_, t| {
            let n = t.numel();
            let out = Tensor::new(t.shape().to_vec(), flat[off..off + n].to_vec())
                .expect("shape preserved");
            off += n;
            out
        });
        Ok(())
    }

    /// Gradient of `bound` leaves as a flat vector aligned with
    /// [`ModelParams::flatten`]; unreachable leaves contribute zeros.
    pub fn flat_grads(bound: &BoundModel, grads: &autodiff::Gradients) -> Vec<f64> {
        bound
            .leaves()
            .iter()
            .flat_map(|(_, v)| grads.wrt(**v).into_data())
            .collect()
    }

    /// Named tensors, for serialization.
    pub fn named(&self) -> Vec<(String, Tensor)> {
        self.leaves()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect()
    }

    /// Replaces tensors by name; every leaf must be present with its shape.
    pub fn load_named(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        let lookup: std::collections::HashMap<&str, &Tensor> =
            named.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut missing = None;
        let next = self.map(|n, t| match lookup.get(n) {
            Some(src) if src.shape() == t.shape() => (*src).clone(),
            _ => {
                missing.get_or_insert_with(|| n.to_string());
                t.clone()
            }
        });
        if let Some(n) = missing {
            return Err(CoreError::InvalidArgument(format!(
                "tensor {n} missing or misshapen"
            )));
        }
        *self = next;
        Ok(())
    }
}
