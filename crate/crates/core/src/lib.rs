//! Object-centric latent physics: a spatial-broadcast mixture decoder, a
//! pairwise interaction model over slot latents, refinement inference of
//! the slot posterior, three-stage curriculum training and behavioral probes.

pub mod decoder;
pub mod error;
pub mod image;
pub mod inference;
pub mod interaction;
pub mod latent;
pub mod model;
pub mod optim;
pub mod params;
pub mod probes;
pub mod trainer;

pub use error::{CoreError, Result};
pub use model::{Clip, SceneModel};
