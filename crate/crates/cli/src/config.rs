//! Run configuration: a TOML file with one section per module, merged with
//! the environment and command-line flags.

use std::path::Path;

use physcon::inference::InferenceConfig;
use physcon::params::ModelConfig;
use physcon::trainer::{Ablation, StageConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use sim::SceneConfig;

use crate::error::{io_err, CliError, Result};

pub const SEED_ENV: &str = "PHYCINE_SEED";
pub const VERSION: &str = concat!("physcon ", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub checkpoint_every: usize,
    pub unroll: usize,
    pub ablation: Ablation,
    pub stages: Vec<StageConfig>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            checkpoint_every: t.checkpoint_every,
            unroll: t.unroll,
            ablation: t.ablation,
            stages: t.stages,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Observed rollout horizon; inference sees `observe + 1` frames.
    pub observe: usize,
    /// Last frame index predicted by rollouts and prediction probes.
    pub predict_to: usize,
    /// Seeds over which prediction errors are aggregated.
    pub seeds: Vec<u64>,
    /// Leading fraction of eligible episodes used to calibrate probes.
    pub calib_fraction: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            observe: 6,
            predict_to: 10,
            seeds: (0..5).collect(),
            calib_fraction: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,
    pub scene: SceneConfig,
    pub model: ModelConfig,
    pub inference: InferenceConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 1,
            scene: SceneConfig::default(),
            model: ModelConfig::default(),
            inference: TrainConfig::default().inference,
            train: TrainSection::default(),
            eval: EvalSection::default(),
        }
    }
}

/// Overrides that sit above the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(CliError::Usage(format!("{SEED_ENV}: {e}"))),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        toml::from_str(&text).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    /// Starting point taken from a checkpoint's training configuration.
    pub fn from_train(t: &TrainConfig) -> Self {
        Self {
            seed: t.seed,
            threads: t.threads,
            scene: SceneConfig {
                height: t.model.height,
                width: t.model.width,
                ..SceneConfig::default()
            },
            model: t.model.clone(),
            inference: t.inference.clone(),
            train: TrainSection {
                lr: t.lr,
                beta1: t.beta1,
                beta2: t.beta2,
                checkpoint_every: t.checkpoint_every,
                unroll: t.unroll,
                ablation: t.ablation,
                stages: t.stages.clone(),
            },
            eval: EvalSection::default(),
        }
    }

    /// Precedence, lowest first: file (or `base`), `PHYCINE_SEED`, flags.
    /// The decoder grid always follows the scene resolution.
    pub fn resolve(file: Option<&Path>, base: Option<RunConfig>, o: &Overrides) -> Result<Self> {
        let mut c = match file {
            Some(p) => Self::load(p)?,
            None => base.unwrap_or_default(),
        };
        if let Some(s) = env_seed()? {
            c.seed = s;
        }
        if let Some(s) = o.seed {
            c.seed = s;
        }
        if let Some(t) = o.threads {
            c.threads = t;
        }
        c.model.height = c.scene.height;
        c.model.width = c.scene.width;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.model.validate()?;
        self.inference.validate()?;
        if self.threads == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        let e = &self.eval;
        if e.predict_to < e.observe || !(0.0..1.0).contains(&e.calib_fraction) || e.seeds.is_empty() {
            return Err(CliError::Usage(
                "eval needs predict_to >= observe, calib_fraction in [0, 1) and at least one seed".into(),
            ));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        let base = TrainConfig {
            model: self.model.clone(),
            inference: self.inference.clone(),
            stages: t.stages.clone(),
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            seed: self.seed,
            checkpoint_every: t.checkpoint_every,
            unroll: t.unroll,
            threads: self.threads,
            ablation: Ablation::Full,
        };
        base.with_ablation(t.ablation)
    }
}

/// Resolved configuration plus the code version, written next to outputs.
#[derive(Serialize)]
pub struct Provenance<'a> {
    pub version: &'a str,
    pub command: &'a str,
    pub config: &'a RunConfig,
}

impl Provenance<'_> {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes as TOML")
    }
}
