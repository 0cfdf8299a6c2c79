use std::path::{Path, PathBuf};

use autodiff::Tensor;
use clap::ValueEnum;
use physcon::image::Image;
use physcon::inference::write_diagnostics_jsonl;
use physcon::interaction::{write_breakdown_csv, Gates};
use physcon::probes::{
    self, charge_report, counterfactual, infer_bound, mass_report, mean_prediction_mse, mse, render_latents,
    AblationData, AblationSettings, Arm, Intervention,
};
use physcon::trainer::{load_checkpoint, Ablation, Trainer};
use physcon::{Clip, SceneModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;
use sim::{generate_dataset, read_dataset, Dataset, Episode};

use crate::check::{self, Suite};
use crate::config::{Overrides, RunConfig};
use crate::error::{CliError, Result};
use crate::output::{ensure_dir, versioned, write_frames, write_image, write_json, write_provenance, ImageFormat};

pub struct Global {
    pub config: Option<PathBuf>,
    pub overrides: Overrides,
    pub format: ImageFormat,
}

impl Global {
    fn resolve(&self, base: Option<RunConfig>) -> Result<RunConfig> {
        RunConfig::resolve(self.config.as_deref(), base, &self.overrides)
    }
}

pub fn gen_data(g: &Global, counts: &[usize], out: &Path) -> Result<()> {
    let counts: [usize; 5] = counts
        .try_into()
        .map_err(|_| CliError::Usage(format!("--counts needs five values, got {}", counts.len())))?;
    let cfg = g.resolve(None)?;
    let (data, manifest) = generate_dataset(&cfg.scene, counts, cfg.seed, out)?;
    write_provenance(out, "gen-data", &cfg)?;
    println!(
        "wrote {} episodes to {} (seed {}, {} entries in manifest)",
        data.episodes.len(),
        out.display(),
        cfg.seed,
        manifest.episodes.len()
    );
    Ok(())
}

pub struct TrainArgs<'a> {
    pub data: &'a Path,
    pub out: &'a Path,
    pub stage: Option<u8>,
    pub resume: Option<&'a Path>,
    pub ablation: Option<Ablation>,
    pub max_steps: Option<usize>,
}

pub fn train(g: &Global, a: &TrainArgs) -> Result<()> {
    let data = read_dataset(a.data)?;
    let (mut trainer, cfg) = match a.resume {
        Some(path) => {
            if a.stage.is_some() || a.ablation.is_some() {
                return Err(CliError::Usage(
                    "--stage and --ablation come from the checkpoint when resuming".into(),
                ));
            }
            let ckpt = load_checkpoint(path)?;
            let tc = ckpt.config()?;
            let mut cfg = RunConfig::from_train(&tc);
            cfg.train.ablation = tc.ablation;
            (Trainer::resume(&ckpt)?, cfg)
        }
        None => {
            let mut cfg = g.resolve(None)?;
            if let Some(ab) = a.ablation {
                cfg.train.ablation = ab;
            }
            let mut tc = cfg.train_config();
            if let Some(s) = a.stage {
                tc.stages.retain(|st| st.stage <= s);
                if tc.stages.is_empty() {
                    return Err(CliError::Usage(format!("no stage at or below {s} in the schedule")));
                }
            }
            // what actually runs, after the ablation and stage cut
            cfg.train.stages = tc.stages.clone();
            cfg.train.ablation = tc.ablation;
            (Trainer::new(tc)?, cfg)
        }
    };
    ensure_dir(a.out)?;
    write_provenance(a.out, "train", &cfg)?;
    trainer.run_until(&data, Some(a.out), a.max_steps.unwrap_or(usize::MAX))?;
    let last = trainer.metrics.last();
    println!(
        "trained {} steps into {}{}",
        trainer.metrics.len(),
        a.out.display(),
        last.map(|m| format!(", last loss {:.4}", m.loss)).unwrap_or_default()
    );
    Ok(())
}

/// Model and resolved config from a checkpoint; `--config` replaces the
/// checkpoint's settings when given.
fn load_model(g: &Global, ckpt: &Path) -> Result<(SceneModel, RunConfig)> {
    let c = load_checkpoint(ckpt)?;
    let model = c.model()?;
    let tc = c.config()?;
    let mut base = RunConfig::from_train(&tc);
    if tc.ablation == Ablation::NoInteraction {
        base.inference.gates = Gates::CLOSED;
    }
    let mut cfg = g.resolve(Some(base))?;
    cfg.model = model.config.clone();
    cfg.scene.height = model.config.height;
    cfg.scene.width = model.config.width;
    Ok((model, cfg))
}

fn episode(data: &Dataset, i: usize) -> Result<&Episode> {
    data.episodes.get(i).ok_or_else(|| {
        CliError::Usage(format!("episode {i} out of range ({} episodes)", data.episodes.len()))
    })
}

fn episode_rng(cfg: &RunConfig, i: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(i as u64))
}

fn observed_frames(ep: &Episode, observe: usize) -> Result<usize> {
    if observe + 1 > ep.num_frames() || observe == 0 {
        return Err(CliError::Usage(format!(
            "cannot observe {} frames of a {}-frame episode",
            observe + 1,
            ep.num_frames()
        )));
    }
    Ok(observe + 1)
}

/// Ground-truth frames `0..n`, clipped to the episode length.
fn truth_frames(ep: &Episode, n: usize) -> Result<Vec<Tensor>> {
    let n = n.min(ep.num_frames());
    let clip = Clip::from_episode(ep, 0, n)?;
    Ok((0..n).map(|t| clip.frame(t)).collect())
}

fn frame_errors(pred: &[Tensor], truth: &[Tensor]) -> Vec<f64> {
    pred.iter().zip(truth).map(|(p, t)| mse(p, t)).collect()
}

pub struct EpisodeArgs<'a> {
    pub ckpt: &'a Path,
    pub data: &'a Path,
    pub episode: usize,
    pub observe: Option<usize>,
    pub out: &'a Path,
}

pub fn infer(g: &Global, a: &EpisodeArgs) -> Result<()> {
    let (model, mut cfg) = load_model(g, a.ckpt)?;
    if let Some(o) = a.observe {
        cfg.eval.observe = o;
    }
    let data = read_dataset(a.data)?;
    let ep = episode(&data, a.episode)?;
    let frames = observed_frames(ep, cfg.eval.observe)?;
    let (res, binding) = infer_bound(ep, frames, &model, &cfg.inference, &mut episode_rng(&cfg, a.episode))?;
    let (_, recon) = render_latents(&model, &res.latents, frames - 1, cfg.inference.gates)?;
    let truth = truth_frames(ep, frames)?;
    ensure_dir(a.out)?;
    write_frames(&a.out.join("recon"), &recon, g.format)?;
    write_image(&Image::strip(&[truth.clone(), recon.clone()], 1)?, &a.out.join("strip"), g.format)?;
    write_diagnostics_jsonl(&res.diagnostics, &a.out.join("diagnostics.jsonl"))?;
    write_json(
        &a.out.join("latents.json"),
        &versioned(&json!({
            "episode": a.episode,
            "frames": frames,
            "latents": res.latents,
            "posterior": res.posterior,
            "phase_losses": res.phase_losses,
            "binding": binding,
            "frame_mse": frame_errors(&recon, &truth),
        })),
    )?;
    write_provenance(a.out, "infer", &cfg)?;
    println!("inferred episode {} over {frames} frames into {}", a.episode, a.out.display());
    Ok(())
}

struct Observed {
    model: SceneModel,
    cfg: RunConfig,
    ep: Episode,
    latents: Vec<physcon::latent::ObjectLatent>,
    bound: Vec<usize>,
    steps: usize,
}

fn observe_episode(g: &Global, a: &EpisodeArgs, steps: Option<usize>) -> Result<Observed> {
    let (model, mut cfg) = load_model(g, a.ckpt)?;
    if let Some(o) = a.observe {
        cfg.eval.observe = o;
    }
    if let Some(s) = steps {
        cfg.eval.predict_to = s;
    }
    cfg.validate()?;
    let data = read_dataset(a.data)?;
    let ep = episode(&data, a.episode)?.clone();
    let frames = observed_frames(&ep, cfg.eval.observe)?;
    let (res, binding) = infer_bound(&ep, frames, &model, &cfg.inference, &mut episode_rng(&cfg, a.episode))?;
    Ok(Observed {
        steps: cfg.eval.predict_to,
        model,
        cfg,
        ep,
        latents: res.latents,
        bound: binding.bound_slots(),
    })
}

#[derive(Serialize)]
struct RolloutSummary<'a> {
    episode: usize,
    observe: usize,
    steps: usize,
    latents: &'a [Vec<physcon::latent::ObjectLatent>],
    frame_mse: Vec<f64>,
}

pub fn rollout(g: &Global, a: &EpisodeArgs, steps: Option<usize>) -> Result<()> {
    let o = observe_episode(g, a, steps)?;
    let (r, frames) = render_latents(&o.model, &o.latents, o.steps, o.cfg.inference.gates)?;
    let truth = truth_frames(&o.ep, o.steps + 1)?;
    ensure_dir(a.out)?;
    write_frames(&a.out.join("frames"), &frames, g.format)?;
    write_image(&Image::strip(&[truth.clone(), frames.clone()], 1)?, &a.out.join("strip"), g.format)?;
    write_breakdown_csv(&r, &a.out.join("forces.csv"))?;
    let summary = RolloutSummary {
        episode: a.episode,
        observe: o.cfg.eval.observe,
        steps: o.steps,
        latents: &r.latents,
        frame_mse: frame_errors(&frames, &truth),
    };
    write_json(&a.out.join("rollout.json"), &versioned(&summary))?;
    write_provenance(a.out, "rollout", &o.cfg)?;
    println!("rolled out {} steps into {}", o.steps, a.out.display());
    Ok(())
}

pub fn counterfactual_cmd(g: &Global, a: &EpisodeArgs, steps: Option<usize>, edit: &str) -> Result<()> {
    let edit = Intervention::parse(edit)?;
    let o = observe_episode(g, a, steps)?;
    let cf = counterfactual(&o.model, &o.latents, &edit, o.steps, o.cfg.inference.gates, &o.bound)?;
    ensure_dir(a.out)?;
    write_frames(&a.out.join("frames"), &cf.edited_frames, g.format)?;
    write_frames(&a.out.join("baseline"), &cf.baseline_frames, g.format)?;
    let strip = Image::strip(&[cf.baseline_frames.clone(), cf.edited_frames.clone()], 1)?;
    write_image(&strip, &a.out.join("strip"), g.format)?;
    let trend = |c: &[Vec<[f64; 2]>]| {
        edit.slot()
            .zip(cf.partner)
            .map(|(s, p)| probes::radial_trend(c, s, p))
    };
    write_json(
        &a.out.join("counterfactual.json"),
        &versioned(&json!({
            "episode": a.episode,
            "edit": edit,
            "bound_slots": o.bound,
            "partner": cf.partner,
            "events": cf.events,
            "latent_divergence": cf.latent_divergence,
            "pixel_divergence": cf.pixel_divergence,
            "baseline_radial_trend": trend(&cf.baseline_centroids),
            "edited_radial_trend": trend(&cf.edited_centroids),
        })),
    )?;
    write_provenance(a.out, "counterfactual", &o.cfg)?;
    println!("counterfactual over {} steps into {}", o.steps, a.out.display());
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Metric {
    Mass,
    Charge,
    Prediction,
    Ablation,
}

/// Leading `fraction` of `eps` calibrates, the rest evaluates.
fn split<'a>(eps: Vec<&'a Episode>, fraction: f64) -> (Vec<&'a Episode>, Vec<&'a Episode>) {
    let n = ((eps.len() as f64) * fraction).round() as usize;
    let mut calib = eps;
    let eval = calib.split_off(n.min(calib.len()));
    (calib, eval)
}

fn probe_data<'a>(data: &'a Dataset, cfg: &RunConfig) -> AblationData<'a> {
    let charged = |e: &&Episode| e.category.is_some_and(|c| c.flags().charged);
    let collided = |e: &&Episode| e.category.is_some_and(|c| c.flags().collision);
    let multi = |e: &&Episode| e.num_objects() >= 2;
    let (charge_calib, charge_eval) = split(data.episodes.iter().filter(charged).collect(), cfg.eval.calib_fraction);
    let (mass_calib, mass_eval) = split(data.episodes.iter().filter(multi).collect(), cfg.eval.calib_fraction);
    AblationData {
        collision: data.episodes.iter().filter(collided).collect(),
        charge_calib,
        charge_eval,
        mass_calib,
        mass_eval,
    }
}

fn settings(cfg: &RunConfig) -> AblationSettings {
    AblationSettings {
        inference: cfg.inference.clone(),
        horizon: cfg.eval.observe,
        predict_to: cfg.eval.predict_to,
        seeds: cfg.eval.seeds.clone(),
    }
}

fn emit(out: Option<&Path>, value: &serde_json::Value, cfg: &RunConfig) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value).expect("report serializes"));
    if let Some(p) = out {
        write_json(p, value)?;
        write_provenance(p, "probe", cfg)?;
    }
    Ok(())
}

pub struct ProbeArgs<'a> {
    pub metric: Metric,
    pub data: &'a Path,
    pub ckpt: Option<&'a Path>,
    pub arms: &'a [String],
    pub out: Option<&'a Path>,
}

pub fn probe(g: &Global, a: &ProbeArgs) -> Result<()> {
    let data = read_dataset(a.data)?;
    if a.metric == Metric::Ablation {
        return ablation(g, a, &data);
    }
    let ckpt = a
        .ckpt
        .ok_or_else(|| CliError::Usage("--ckpt is required for this metric".into()))?;
    let (model, cfg) = load_model(g, ckpt)?;
    let pd = probe_data(&data, &cfg);
    let frames = cfg.eval.observe + 1;
    let value = match a.metric {
        Metric::Mass => versioned(&mass_report(&pd, &model, &cfg.inference, frames, cfg.seed)?),
        Metric::Charge => versioned(&charge_report(&pd, &model, &cfg.inference, frames, cfg.seed)?),
        Metric::Prediction => {
            let s = settings(&cfg);
            let per_seed = s
                .seeds
                .iter()
                .map(|&seed| mean_prediction_mse(&pd.collision, &model, &s, cfg.inference.gates, seed))
                .collect::<physcon::Result<Vec<f64>>>()?;
            let mut sorted = per_seed.clone();
            sorted.sort_by(f64::total_cmp);
            let m = sorted.len();
            let median = if m % 2 == 1 {
                sorted[m / 2]
            } else {
                0.5 * (sorted[m / 2 - 1] + sorted[m / 2])
            };
            versioned(&json!({
                "metric": "prediction_mse",
                "value": median,
                "n": pd.collision.len(),
                "per_seed": per_seed,
                "seeds": s.seeds,
            }))
        }
        Metric::Ablation => unreachable!("handled above"),
    };
    emit(a.out, &value, &cfg)
}

fn ablation(g: &Global, a: &ProbeArgs, data: &Dataset) -> Result<()> {
    if a.arms.is_empty() {
        return Err(CliError::Usage("--arm name=checkpoint is required for the ablation table".into()));
    }
    let mut loaded = Vec::new();
    for spec in a.arms {
        let (name, path) = spec
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--arm expects name=checkpoint, got {spec:?}")))?;
        let (model, cfg) = load_model(g, Path::new(path))?;
        loaded.push((name.to_string(), model, cfg));
    }
    let cfg = loaded[0].2.clone();
    let arms: Vec<Arm> = loaded
        .iter()
        .map(|(name, model, c)| Arm {
            name: name.clone(),
            model: Some(model),
            gates: c.inference.gates,
        })
        .collect();
    let pd = probe_data(data, &cfg);
    let rows = probes::ablation_suite(&arms, &pd, &settings(&cfg))?;
    if let Some(p) = a.out {
        probes::write_rows_csv(&rows, p)?;
        write_provenance(p, "probe", &cfg)?;
    }
    for r in &rows {
        println!("{},{},{},{}", r.arm, r.metric, r.value, r.n);
    }
    Ok(())
}

pub fn check_cmd(g: &Global, suite: Suite, cases: usize) -> Result<()> {
    let cfg = g.resolve(None)?;
    let results = check::run(suite, cases, cfg.seed)?;
    let mut failed = Vec::new();
    for r in &results {
        let verdict = if r.passed() { "ok" } else { "FAILED" };
        println!(
            "{}: {verdict}, max error {:.3e} (tolerance {:.0e}); {}",
            r.name, r.max_error, r.tolerance, r.detail
        );
        if !r.passed() {
            failed.push(r.name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Invariant(format!("suites {failed:?} out of tolerance")))
    }
}
