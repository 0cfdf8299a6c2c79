//! Three-stage curriculum training by backpropagation through refinement
//! and rollout, checkpoints, and the metrics log.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use autodiff::Tensor;
use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sim::{Category, Dataset, Episode};

use crate::error::{io_err, CoreError, Result};
use crate::inference::{infer_impl, InferenceConfig};
use crate::interaction::Gates;
use crate::model::{Clip, SceneModel};
use crate::optim::Adam;
use crate::params::{ModelConfig, ModelParams};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PHYC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    /// Stage id, 1 to 3.
    pub stage: u8,
    pub categories: Vec<Category>,
    /// Rollout horizon `N`; clips hold `N + 1` frames.
    pub horizon: usize,
    /// Per-clip probability that the collision force is switched on.
    pub collision_prob: f64,
    pub charge_enabled: bool,
    pub iterations: usize,
    pub batch_size: usize,
}

impl StageConfig {
    pub fn default_for(stage: u8) -> Self {
        let (categories, horizon, collision_prob, charge_enabled) = match stage {
            1 => (vec![Category::One], 3, 0.5, false),
            2 => (vec![Category::One, Category::Two], 6, 1.0, false),
            _ => (Category::ALL.to_vec(), 6, 1.0, true),
        };
        Self {
            stage,
            categories,
            horizon,
            collision_prob,
            charge_enabled,
            iterations: 200,
            batch_size: 8,
        }
    }

    /// Categories a stage may draw from at most.
    pub fn allowed(stage: u8) -> &'static [Category] {
        match stage {
            1 => &[Category::One],
            2 => &[Category::One, Category::Two],
            _ => &Category::ALL,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    Full,
    /// A single stage with stage-3 settings for the same total iterations.
    #[serde(rename = "no-b2u")]
    NoBottomUp,
    /// Both force families off: rollouts use the transition only.
    NoInteraction,
}

impl Ablation {
    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoBottomUp => "no-b2u",
            Ablation::NoInteraction => "no-interaction",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Ablation::Full),
            "no-b2u" | "no-bottom-up" => Ok(Ablation::NoBottomUp),
            "no-interaction" => Ok(Ablation::NoInteraction),
            other => Err(CoreError::InvalidArgument(format!("unknown ablation {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub inference: InferenceConfig,
    pub stages: Vec<StageConfig>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    /// Write a checkpoint every this many iterations; 0 writes only at
    /// stage ends.
    pub checkpoint_every: usize,
    /// Refinement evaluations that contribute parameter gradients.
    pub unroll: usize,
    /// Worker threads for the per-clip gradients.
    pub threads: usize,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            inference: InferenceConfig {
                slots: 4,
                ..InferenceConfig::default()
            },
            stages: (1..=3).map(StageConfig::default_for).collect(),
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            seed: 0,
            checkpoint_every: 0,
            unroll: 2,
            threads: 1,
            ablation: Ablation::Full,
        }
    }
}

impl TrainConfig {
    /// Schedule rewritten for an ablation arm.
    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        if ablation == Ablation::NoBottomUp && self.ablation != Ablation::NoBottomUp {
            let total = self.stages.iter().map(|s| s.iterations).sum();
            let mut last = self
                .stages
                .iter()
                .find(|s| s.stage == 3)
                .cloned()
                .unwrap_or_else(|| StageConfig::default_for(3));
            last.iterations = total;
            if let Some(first) = self.stages.first() {
                last.batch_size = first.batch_size;
            }
            self.stages = vec![last];
        }
        self.ablation = ablation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.inference.validate()?;
        if self.stages.is_empty() {
            return Err(CoreError::InvalidArgument("empty stage schedule".into()));
        }
        let mut prev_horizon = 0;
        let mut prev_stage = 0;
        for s in &self.stages {
            if !(1..=3).contains(&s.stage) || s.stage <= prev_stage {
                return Err(CoreError::InvalidArgument(format!(
                    "stage ids must increase within 1..=3, got {}",
                    s.stage
                )));
            }
            if let Some(c) = s.categories.iter().find(|c| !StageConfig::allowed(s.stage).contains(c)) {
                return Err(CoreError::StageMismatch {
                    stage: s.stage,
                    category: u8::from(*c),
                });
            }
            if s.categories.is_empty() || s.horizon == 0 || s.batch_size == 0 {
                return Err(CoreError::InvalidArgument(format!(
                    "stage {} needs categories, a horizon and a batch",
                    s.stage
                )));
            }
            if s.horizon < prev_horizon {
                return Err(CoreError::InvalidArgument(format!(
                    "stage {} horizon {} is shorter than the previous stage",
                    s.stage, s.horizon
                )));
            }
            if !(0.0..=1.0).contains(&s.collision_prob) {
                return Err(CoreError::InvalidArgument(format!(
                    "collision probability {} outside [0, 1]",
                    s.collision_prob
                )));
            }
            prev_horizon = s.horizon;
            prev_stage = s.stage;
        }
        if self.unroll == 0 || self.unroll > self.inference.refine_steps * self.inference.inner_steps + 1 {
            return Err(CoreError::InvalidArgument(format!(
                "unroll {} must be between 1 and the number of refinement evaluations",
                self.unroll
            )));
        }
        if !(self.lr > 0.0) || self.threads == 0 {
            return Err(CoreError::InvalidArgument(
                "learning rate and thread count must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_json().as_bytes()).into()
    }

    fn stage_index(&self, stage: u8) -> Option<usize> {
        self.stages.iter().position(|s| s.stage == stage)
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub stage: u8,
    /// Iteration within the stage, from 0.
    pub iteration: usize,
    pub global_iteration: usize,
    pub horizon: usize,
    pub loss: f64,
    pub nll: f64,
    pub kl: f64,
    /// Fraction of clips in the batch with the collision force on.
    pub collision_on: f64,
    pub charge_on: bool,
    pub grad_norm: f64,
    pub wall_time: f64,
}

/// One clip of a batch: which episode, which gates, which noise stream.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchItem {
    pub episode: usize,
    pub gates: Gates,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Everything needed to continue a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub stage: u8,
    /// Completed iterations of `stage`.
    pub iteration: u64,
    pub config_hash: [u8; 32],
    pub config_json: String,
    pub rng: RngState,
    pub params: Vec<(String, Tensor)>,
    pub adam: Adam,
}

impl Checkpoint {
    pub fn config(&self) -> Result<TrainConfig> {
        serde_json::from_str(&self.config_json).map_err(|e| CoreError::InvalidArgument(format!("checkpoint config: {e}")))
    }

    pub fn model(&self) -> Result<SceneModel> {
        let cfg = self.config()?;
        let mut params = ModelParams::init(&cfg.model, &mut ChaCha8Rng::seed_from_u64(0))?;
        params.load_named(&self.params)?;
        Ok(SceneModel {
            config: cfg.model,
            params,
        })
    }
}

pub fn params_hash(params: &ModelParams) -> [u8; 32] {
    let mut h = Sha256::new();
    for (name, t) in params.named() {
        h.update(name.as_bytes());
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().into()
}

fn encode_checkpoint(c: &Checkpoint) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(CHECKPOINT_MAGIC);
    // writes into a Vec never fail
    b.write_u32::<LE>(c.version).unwrap();
    b.write_u8(c.stage).unwrap();
    b.write_u64::<LE>(c.iteration).unwrap();
    b.extend_from_slice(&c.config_hash);
    b.write_u32::<LE>(c.config_json.len() as u32).unwrap();
    b.extend_from_slice(c.config_json.as_bytes());
    b.extend_from_slice(&c.rng.seed);
    b.write_u64::<LE>(c.rng.stream).unwrap();
    b.write_u128::<LE>(c.rng.word_pos).unwrap();
    b.write_u32::<LE>(c.params.len() as u32).unwrap();
    for (name, t) in &c.params {
        b.write_u32::<LE>(name.len() as u32).unwrap();
        b.extend_from_slice(name.as_bytes());
        b.write_u32::<LE>(t.rank() as u32).unwrap();
        for &d in t.shape() {
            b.write_u64::<LE>(d as u64).unwrap();
        }
        for &v in t.data() {
            b.write_f64::<LE>(v).unwrap();
        }
    }
    let a = &c.adam;
    for v in [a.lr, a.beta1, a.beta2, a.eps] {
        b.write_f64::<LE>(v).unwrap();
    }
    b.write_u64::<LE>(a.t).unwrap();
    b.write_u64::<LE>(a.m.len() as u64).unwrap();
    for &v in a.m.iter().chain(&a.v) {
        b.write_f64::<LE>(v).unwrap();
    }
    b
}

pub fn save_checkpoint(c: &Checkpoint, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    w.write_all(&encode_checkpoint(c)).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

struct Reader<'a> {
    buf: &'a [u8],
    path: &'a Path,
}

impl Reader<'_> {
    fn fail(&self, reason: impl Into<String>) -> CoreError {
        CoreError::Format {
            path: self.path.to_path_buf(),
            reason: reason.into(),
        }
    }
    fn bytes(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() < n {
            return Err(self.fail("truncated"));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(self.bytes(4)?.read_u32::<LE>().expect("length checked"))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(self.bytes(8)?.read_u64::<LE>().expect("length checked"))
    }
    fn u128(&mut self) -> Result<u128> {
        Ok(self.bytes(16)?.read_u128::<LE>().expect("length checked"))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(self.bytes(8)?.read_f64::<LE>().expect("length checked"))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        if n > self.buf.len() / 8 {
            return Err(self.fail("truncated"));
        }
        (0..n).map(|_| self.f64()).collect()
    }
    fn array32(&mut self) -> Result<[u8; 32]> {
        Ok(self.bytes(32)?.try_into().expect("length checked"))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(io_err(path))?;
    let mut r = Reader { buf: &raw, path };
    if raw.get(..4) != Some(&CHECKPOINT_MAGIC[..]) {
        return Err(r.fail("bad magic, expected PHYC"));
    }
    r.bytes(4)?;
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CoreError::Version {
            path: path.to_path_buf(),
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let stage = r.u8()?;
    let iteration = r.u64()?;
    let config_hash = r.array32()?;
    let n = r.u32()? as usize;
    let config_json = String::from_utf8(r.bytes(n)?.to_vec()).map_err(|_| r.fail("config is not UTF-8"))?;
    if <[u8; 32]>::from(Sha256::digest(config_json.as_bytes())) != config_hash {
        return Err(r.fail("config hash does not match the stored config"));
    }
    let rng = RngState {
        seed: r.array32()?,
        stream: r.u64()?,
        word_pos: r.u128()?,
    };
    let count = r.u32()? as usize;
    let mut params = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.bytes(len)?.to_vec()).map_err(|_| r.fail("tensor name is not UTF-8"))?;
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(r.fail(format!("tensor {name} has rank {rank}")));
        }
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| r.fail("tensor too large"))?;
        let data = r.f64s(numel)?;
        let t = Tensor::new(shape, data).map_err(|e| r.fail(format!("tensor {name}: {e}")))?;
        params.push((name, t));
    }
    let (lr, beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
    let t = r.u64()?;
    let len = r.u64()? as usize;
    let m = r.f64s(len)?;
    let v = r.f64s(len)?;
    if !r.buf.is_empty() {
        return Err(r.fail("trailing bytes"));
    }
    Ok(Checkpoint {
        version,
        stage,
        iteration,
        config_hash,
        config_json,
        rng,
        params,
        adam: Adam {
            lr,
            beta1,
            beta2,
            eps,
            m,
            v,
            t,
        },
    })
}

pub fn write_metrics_jsonl(records: &[MetricRecord], path: &Path, append: bool) -> Result<()> {
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(append)
        .write(true)
        .truncate(!append)
        .open(path)
        .map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for r in records {
        writeln!(w, "{}", serde_json::to_string(r).expect("record serializes")).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_metrics_jsonl(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| CoreError::Format {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })
        })
        .collect()
}

/// Training state: model, optimizer, RNG and schedule position.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: SceneModel,
    pub adam: Adam,
    pub rng: ChaCha8Rng,
    /// Index into `config.stages` of the stage in progress.
    pub stage_pos: usize,
    /// Completed iterations of the stage in progress.
    pub iteration: usize,
    pub metrics: Vec<MetricRecord>,
    started: Instant,
}

impl Trainer {
    /// Fresh parameters drawn from the config seed.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = SceneModel::init(config.model.clone(), &mut rng)?;
        Self::with_model(config, model, rng)
    }

    /// Starts the schedule from given parameters.
    pub fn with_model(config: TrainConfig, model: SceneModel, rng: ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        if model.config != config.model {
            return Err(CoreError::InvalidArgument(
                "model config differs from the training config".into(),
            ));
        }
        let adam = Adam::new(model.params.num_scalars(), config.lr, config.beta1, config.beta2);
        Ok(Self {
            config,
            model,
            adam,
            rng,
            stage_pos: 0,
            iteration: 0,
            metrics: Vec::new(),
            started: Instant::now(),
        })
    }

    /// Continues exactly where `ckpt` stopped, under the stored config.
    pub fn resume(ckpt: &Checkpoint) -> Result<Self> {
        let config = ckpt.config()?;
        config.validate()?;
        let model = ckpt.model()?;
        let stage_pos = config
            .stage_index(ckpt.stage)
            .ok_or_else(|| CoreError::InvalidArgument(format!("stage {} not in schedule", ckpt.stage)))?;
        if ckpt.adam.m.len() != model.params.num_scalars() {
            return Err(CoreError::InvalidArgument("optimizer state does not match parameters".into()));
        }
        let mut t = Self {
            config,
            model,
            adam: ckpt.adam.clone(),
            rng: ckpt.rng.restore(),
            stage_pos,
            iteration: ckpt.iteration as usize,
            metrics: Vec::new(),
            started: Instant::now(),
        };
        if t.iteration >= t.config.stages[stage_pos].iterations {
            t.stage_pos += 1;
            t.iteration = 0;
        }
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let stage = self.config.stages[self.stage_pos.min(self.config.stages.len() - 1)].stage;
        Checkpoint {
            version: CHECKPOINT_VERSION,
            stage,
            iteration: self.iteration as u64,
            config_hash: self.config.hash(),
            config_json: self.config.to_json(),
            rng: RngState::capture(&self.rng),
            params: self.model.params.named(),
            adam: self.adam.clone(),
        }
    }

    pub fn current_stage(&self) -> Option<&StageConfig> {
        self.config.stages.get(self.stage_pos)
    }

    pub fn finished(&self) -> bool {
        self.stage_pos >= self.config.stages.len()
    }

    fn global_iteration(&self) -> usize {
        self.config.stages[..self.stage_pos.min(self.config.stages.len())]
            .iter()
            .map(|s| s.iterations)
            .sum::<usize>()
            + self.iteration
    }

    /// Episodes the stage may draw from, in dataset order.
    pub fn pool<'a>(&self, stage: &StageConfig, data: &'a Dataset) -> Result<Vec<&'a Episode>> {
        let pool: Vec<&Episode> = data
            .episodes
            .iter()
            .filter(|e| e.category.is_some_and(|c| stage.categories.contains(&c)))
            .collect();
        if pool.is_empty() {
            return Err(CoreError::EmptyStage(stage.stage));
        }
        let need = stage.horizon + 1;
        if let Some(e) = pool.iter().find(|e| e.num_frames() < need) {
            return Err(CoreError::TooFewFrames {
                need,
                got: e.num_frames(),
            });
        }
        Ok(pool)
    }

    /// Draws one batch: episode indices into the pool, gates and noise seeds.
    pub fn sample_batch(&mut self, stage: &StageConfig, pool_len: usize) -> Vec<BatchItem> {
        let forced_off = self.config.ablation == Ablation::NoInteraction;
        (0..stage.batch_size)
            .map(|_| {
                let episode = self.rng.random_range(0..pool_len);
                let u: f64 = self.rng.random();
                let collision = if !forced_off && u < stage.collision_prob { 1.0 } else { 0.0 };
                let charge = if !forced_off && stage.charge_enabled { 1.0 } else { 0.0 };
                BatchItem {
                    episode,
                    gates: Gates { collision, charge },
                    seed: self.rng.random(),
                }
            })
            .collect()
    }

    fn clip_gradient(&self, ep: &Episode, item: &BatchItem, horizon: usize) -> Result<(Vec<f64>, crate::inference::ElboReport)> {
        let clip = Clip::from_episode(ep, 0, horizon + 1)?;
        let cfg = InferenceConfig {
            gates: item.gates,
            ..self.config.inference.clone()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(item.seed);
        let (_, grad) = infer_impl(&clip, &self.model, &cfg, &mut rng, None, self.config.unroll, false)?;
        let g = grad.expect("unroll >= 1 yields a gradient");
        Ok((g.grad, g.report))
    }

    /// One optimizer step of the stage in progress.
    pub fn step(&mut self, data: &Dataset) -> Result<MetricRecord> {
        let stage = self
            .current_stage()
            .cloned()
            .ok_or_else(|| CoreError::InvalidArgument("schedule already finished".into()))?;
        let pool = self.pool(&stage, data)?;
        let batch = self.sample_batch(&stage, pool.len());
        let results = self.batch_gradients(&pool, &batch, stage.horizon)?;
        let n = results.len() as f64;
        let mut grad = vec![0.0; self.model.params.num_scalars()];
        let (mut loss, mut nll, mut kl) = (0.0, 0.0, 0.0);
        for (g, r) in &results {
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b / n;
            }
            loss += r.total / n;
            nll += r.nll.iter().sum::<f64>() / n;
            kl += r.kl / n;
        }
        let global = self.global_iteration();
        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(CoreError::Divergence {
                iteration: global,
                seed: self.config.seed,
            });
        }
        let mut flat = self.model.params.flatten();
        self.adam.step(&mut flat, &grad, None);
        self.model.params.assign(&flat)?;
        let record = MetricRecord {
            stage: stage.stage,
            iteration: self.iteration,
            global_iteration: global,
            horizon: stage.horizon,
            loss,
            nll,
            kl,
            collision_on: batch.iter().map(|b| b.gates.collision).sum::<f64>() / n,
            charge_on: batch.iter().any(|b| b.gates.charge > 0.0),
            grad_norm,
            wall_time: self.started.elapsed().as_secs_f64(),
        };
        self.iteration += 1;
        if self.iteration >= stage.iterations {
            self.stage_pos += 1;
            self.iteration = 0;
        }
        self.metrics.push(record.clone());
        Ok(record)
    }

    /// Per-clip gradients in batch order, fanned out over `threads`.
    fn batch_gradients(
        &self,
        pool: &[&Episode],
        batch: &[BatchItem],
        horizon: usize,
    ) -> Result<Vec<(Vec<f64>, crate::inference::ElboReport)>> {
        let threads = self.config.threads.min(batch.len()).max(1);
        if threads == 1 {
            return batch
                .iter()
                .map(|b| self.clip_gradient(pool[b.episode], b, horizon))
                .collect();
        }
        let chunk = batch.len().div_ceil(threads);
        let parts: Vec<Result<Vec<_>>> = std::thread::scope(|s| {
            let handles: Vec<_> = batch
                .chunks(chunk)
                .map(|items| {
                    s.spawn(move || {
                        items
                            .iter()
                            .map(|b| self.clip_gradient(pool[b.episode], b, horizon))
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        });
        let mut out = Vec::with_capacity(batch.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    /// Runs the rest of the schedule. With `out`, writes checkpoints at the
    /// configured cadence and at every stage end, and appends to
    /// `metrics.jsonl`.
    pub fn run(&mut self, data: &Dataset, out: Option<&Path>) -> Result<()> {
        self.run_until(data, out, usize::MAX)
    }

    /// Like [`Trainer::run`] but stops after `max_steps` optimizer steps.
    pub fn run_until(&mut self, data: &Dataset, out: Option<&Path>, max_steps: usize) -> Result<()> {
        if let Some(dir) = out {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let mut steps = 0;
        while !self.finished() && steps < max_steps {
            let stage = self.current_stage().expect("not finished").stage;
            let record = self.step(data)?;
            steps += 1;
            if let Some(dir) = out {
                write_metrics_jsonl(std::slice::from_ref(&record), &dir.join("metrics.jsonl"), true)?;
                let stage_done = self.iteration == 0;
                let cadence = self.config.checkpoint_every > 0
                    && (record.iteration + 1) % self.config.checkpoint_every == 0;
                if cadence && !stage_done {
                    save_checkpoint(&self.checkpoint(), &checkpoint_path(dir, stage, record.iteration + 1))?;
                }
                if stage_done {
                    // the position already points at the next stage; record
                    // the finished one so the file names the stage it closes
                    let mut c = self.checkpoint();
                    c.stage = stage;
                    c.iteration = (record.iteration + 1) as u64;
                    save_checkpoint(&c, &dir.join(format!("stage{stage}.phyc")))?;
                }
            }
        }
        if let (Some(dir), true) = (out, self.finished()) {
            save_checkpoint(&self.final_checkpoint(), &dir.join("final.phyc"))?;
        }
        Ok(())
    }

    /// Checkpoint of a finished schedule, tagged with the last stage.
    pub fn final_checkpoint(&self) -> Checkpoint {
        let mut c = self.checkpoint();
        if self.finished() {
            let last = self.config.stages.last().expect("non-empty schedule");
            c.stage = last.stage;
            c.iteration = last.iterations as u64;
        }
        c
    }
}

pub fn checkpoint_path(dir: &Path, stage: u8, iteration: usize) -> PathBuf {
    dir.join(format!("stage{stage}_iter{iteration:06}.phyc"))
}

/// Trains one stage from `model`, drawing batches from `rng`.
pub fn train_stage(
    stage: u8,
    data: &Dataset,
    model: SceneModel,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(SceneModel, Vec<MetricRecord>)> {
    let pos = config
        .stage_index(stage)
        .ok_or_else(|| CoreError::InvalidArgument(format!("stage {stage} not in schedule")))?;
    let stage_cfg = &config.stages[pos];
    if let Some(e) = data
        .episodes
        .iter()
        .find(|e| e.category.is_none_or(|c| !StageConfig::allowed(stage).contains(&c)))
    {
        return Err(CoreError::StageMismatch {
            stage,
            category: e.category.map_or(0, u8::from),
        });
    }
    let mut t = Trainer::with_model(config.clone(), model, rng.clone())?;
    t.stage_pos = pos;
    for _ in 0..stage_cfg.iterations {
        t.step(data)?;
    }
    *rng = t.rng.clone();
    Ok((t.model, t.metrics))
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub model: SceneModel,
    pub metrics: Vec<MetricRecord>,
}

/// Runs every stage of the schedule in order from fresh parameters.
pub fn train_full(data: &Dataset, config: &TrainConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    let mut t = Trainer::new(config.clone())?;
    t.run(data, out)?;
    Ok(TrainOutcome {
        checkpoint: t.final_checkpoint(),
        model: t.model,
        metrics: t.metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule_is_valid_and_gated() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        let h: Vec<usize> = c.stages.iter().map(|s| s.horizon).collect();
        assert_eq!(h, vec![3, 6, 6]);
        assert!(!c.stages[0].charge_enabled && !c.stages[1].charge_enabled);
        assert_eq!(c.stages[0].collision_prob, 0.5);
        assert_eq!(c.lr, 0.0003);
    }

    #[test]
    fn stage_one_rejects_other_categories() {
        let mut c = TrainConfig::default();
        c.stages[0].categories.push(Category::Two);
        assert!(matches!(
            c.validate(),
            Err(CoreError::StageMismatch { stage: 1, category: 2 })
        ));
    }

    #[test]
    fn no_bottom_up_is_one_stage_of_the_same_length() {
        let c = TrainConfig::default().with_ablation(Ablation::NoBottomUp);
        assert_eq!(c.stages.len(), 1);
        assert_eq!(c.stages[0].stage, 3);
        assert_eq!(c.stages[0].iterations, 600);
        assert!(c.stages[0].charge_enabled);
        c.validate().unwrap();
    }

    #[test]
    fn ablation_names_parse_back() {
        for a in [Ablation::Full, Ablation::NoBottomUp, Ablation::NoInteraction] {
            assert_eq!(a.name().parse::<Ablation>().unwrap(), a);
        }
        assert!("nope".parse::<Ablation>().is_err());
    }

    #[test]
    fn rng_state_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let _: u64 = rng.random();
        let s = RngState::capture(&rng);
        let mut back = s.restore();
        assert_eq!(rng.random::<u64>(), back.random::<u64>());
    }
}
