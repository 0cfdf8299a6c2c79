use autodiff::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sim::Episode;

use crate::error::{CoreError, Result};
use crate::params::{ModelConfig, ModelParams};

/// Configuration plus parameters: everything needed to decode and roll out.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneModel {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl SceneModel {
    pub fn init(config: ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let params = ModelParams::init(&config, rng)?;
        Ok(Self { config, params })
    }
}

/// A clip of consecutive frames as `[F, H*W, 3]` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Clip {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub data: Vec<f64>,
}

impl Clip {
    /// Frames `start..start + count` of an episode.
    pub fn from_episode(ep: &Episode, start: usize, count: usize) -> Result<Self> {
        if count == 0 || start + count > ep.num_frames() {
            return Err(CoreError::TooFewFrames {
                need: start + count.max(1),
                got: ep.num_frames(),
            });
        }
        let data = (start..start + count)
            .flat_map(|t| ep.frame(t).iter().map(|&v| f64::from(v)))
            .collect();
        Ok(Self {
            height: ep.height,
            width: ep.width,
            frames: count,
            data,
        })
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// The first `count` frames as a `[count, P, 3]` tensor.
    pub fn head(&self, count: usize) -> Tensor {
        let n = self.pixels() * 3;
        Tensor::new(vec![count, self.pixels(), 3], self.data[..count * n].to_vec())
            .expect("clip layout")
    }

    /// Frame `t` as `[H, W, 3]`.
    pub fn frame(&self, t: usize) -> Tensor {
        let n = self.pixels() * 3;
        Tensor::new(
            vec![self.height, self.width, 3],
            self.data[t * n..(t + 1) * n].to_vec(),
        )
        .expect("frame layout")
    }

    pub fn check_size(&self, config: &ModelConfig) -> Result<()> {
        if (self.height, self.width) != (config.height, config.width) {
            return Err(CoreError::FrameMismatch {
                expected: (config.height, config.width),
                got: (self.height, self.width),
            });
        }
        Ok(())
    }
}
