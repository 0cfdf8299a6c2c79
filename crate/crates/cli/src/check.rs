//! Self-check suites run by `physcon check`.

use autodiff::Tensor;
use clap::ValueEnum;
use physcon::decoder::{decode, mixture_log_likelihood};
use physcon::interaction::{charge_forces, rollout, Gates};
use physcon::latent::ObjectLatent;
use physcon::params::{ModelConfig, ModelParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sim::{coulomb_force, resolve_collision, Shape, Vec2, WorldObject};

use crate::error::{CliError, Result};

pub const GRAD_TOLERANCE: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Autodiff,
    Physics,
    Decoder,
    Interaction,
    All,
}

#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub name: &'static str,
    /// Largest observed deviation, in the suite's own units.
    pub max_error: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.max_error <= self.tolerance
    }
}

fn autodiff_suite(cases: usize, seed: u64) -> Result<SuiteResult> {
    let report = autodiff::check::run_suite(cases, seed, FD_STEP).map_err(physcon::CoreError::from)?;
    let detail = report
        .worst()
        .map(|w| format!("{} graphs, worst op {} at seed {}", report.cases.len(), w.name, w.seed))
        .unwrap_or_default();
    Ok(SuiteResult {
        name: "autodiff",
        max_error: report.max_error(),
        tolerance: GRAD_TOLERANCE,
        detail,
    })
}

fn body(rng: &mut ChaCha8Rng, position: Vec2) -> WorldObject {
    WorldObject {
        position,
        velocity: Vec2::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)),
        mass: rng.random_range(0.5..5.0),
        charge: [-1.0, 0.0, 1.0][rng.random_range(0..3)],
        radius: 0.5,
        color_id: 0,
        shape: Shape::Disk,
    }
}

/// Momentum and energy through random impulsive collisions, and pairwise
/// cancellation of the charge forces.
fn physics_suite(cases: usize, seed: u64) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut dp, mut de, mut df) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..cases * 100 {
        let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let a = body(&mut rng, Vec2::zeros());
        let mut b = body(&mut rng, Vec2::new(angle.cos(), angle.sin()));
        // head-on enough to guarantee an impulse
        b.velocity = a.velocity - b.position * rng.random_range(0.5..3.0);
        let (va, vb) = resolve_collision(&a, &b, 1.0);
        let p0 = a.momentum() + b.momentum();
        let p1 = va * a.mass + vb * b.mass;
        let e0 = a.kinetic_energy() + b.kinetic_energy();
        let e1 = 0.5 * a.mass * va.norm_squared() + 0.5 * b.mass * vb.norm_squared();
        dp = dp.max((p1 - p0).norm() / p0.norm().max(1.0));
        de = de.max((e1 - e0).abs() / e0.max(1.0));
        let f = coulomb_force(&a, &b, 0.5, 0.7) + coulomb_force(&b, &a, 0.5, 0.7);
        df = df.max(f.norm());
    }
    // normalise each deviation by its own tolerance so one number decides
    SuiteResult {
        name: "physics",
        max_error: (dp / 1e-12).max(de / 1e-9).max(df / 1e-12),
        tolerance: 1.0,
        detail: format!(
            "{} collisions: momentum {dp:.2e}, energy {de:.2e}, force sum {df:.2e}",
            cases * 100
        ),
    }
}

fn small_params(seed: u64) -> Result<ModelParams> {
    let cfg = ModelConfig {
        height: 6,
        width: 8,
        decoder_hidden: vec![8, 8],
        ..ModelConfig::default()
    };
    Ok(ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(seed))?)
}

fn random_latents(k: usize, rng: &mut ChaCha8Rng) -> Vec<ObjectLatent> {
    (0..k)
        .map(|_| {
            let v: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
            ObjectLatent::from_slice(&v).expect("16 entries")
        })
        .collect()
}

/// Masks sum to one; permuting slots permutes masks and leaves the
/// likelihood unchanged.
fn decoder_suite(cases: usize, seed: u64) -> Result<SuiteResult> {
    let p = small_params(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
    let (h, w, k) = (6, 8, 4);
    let (mut sum_err, mut perm_err, mut ll_err) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..cases {
        let ctx = Tensor::from_fn(&[k, 12], |_| rng.random_range(-1.5..1.5));
        let out = decode(&ctx, h, w, &p)?;
        for px in 0..h * w {
            let s: f64 = (0..k).map(|s| out.masks.data()[s * h * w + px]).sum();
            sum_err = sum_err.max((s - 1.0).abs());
        }
        let perm: Vec<usize> = (0..k).rev().collect();
        let pctx = Tensor::from_fn(&[k, 12], |n| ctx.data()[perm[n / 12] * 12 + n % 12]);
        let pout = decode(&pctx, h, w, &p)?;
        for (s, &from) in perm.iter().enumerate() {
            for px in 0..h * w {
                let d = pout.masks.data()[s * h * w + px] - out.masks.data()[from * h * w + px];
                perm_err = perm_err.max(d.abs());
            }
        }
        let x = Tensor::from_fn(&[h, w, 3], |_| rng.random_range(0.0..1.0));
        let a = mixture_log_likelihood(&x, &out, 0.3)?;
        let b = mixture_log_likelihood(&x, &pout, 0.3)?;
        ll_err = ll_err.max((a - b).abs() / a.abs().max(1.0));
    }
    Ok(SuiteResult {
        name: "decoder",
        max_error: sum_err.max(perm_err).max(ll_err),
        tolerance: 1e-12,
        detail: format!("{cases} decodes: mask sum {sum_err:.2e}, permutation {perm_err:.2e}, likelihood {ll_err:.2e}"),
    })
}

/// Rollouts commute with slot permutations; zero charge latents give zero
/// charge forces.
fn interaction_suite(cases: usize, seed: u64) -> Result<SuiteResult> {
    let p = small_params(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
    let (mut perm_err, mut zero_err) = (0.0f64, 0.0f64);
    for _ in 0..cases {
        let l = random_latents(3, &mut rng);
        let perm = [2, 0, 1];
        let pl: Vec<ObjectLatent> = perm.iter().map(|&i| l[i].clone()).collect();
        let a = rollout(&l, 4, &p, Gates::OPEN, false)?;
        let b = rollout(&pl, 4, &p, Gates::OPEN, false)?;
        for (sa, sb) in a.latents.iter().zip(&b.latents) {
            for (s, &from) in perm.iter().enumerate() {
                for (u, v) in sb[s].to_vec().iter().zip(sa[from].to_vec()) {
                    perm_err = perm_err.max((u - v).abs());
                }
            }
        }
        let mut z = l.clone();
        z.iter_mut().for_each(|o| o.c = 0.0);
        for f in charge_forces(&z, &p)? {
            zero_err = zero_err.max(f[0].abs()).max(f[1].abs());
        }
    }
    Ok(SuiteResult {
        name: "interaction",
        max_error: perm_err.max(zero_err),
        tolerance: 1e-10,
        detail: format!("{cases} rollouts: permutation {perm_err:.2e}, zero-charge force {zero_err:.2e}"),
    })
}

pub fn run(suite: Suite, cases: usize, seed: u64) -> Result<Vec<SuiteResult>> {
    if cases == 0 {
        return Err(CliError::Usage("--cases must be at least 1".into()));
    }
    let mut out = Vec::new();
    if matches!(suite, Suite::Autodiff | Suite::All) {
        out.push(autodiff_suite(cases, seed)?);
    }
    if matches!(suite, Suite::Physics | Suite::All) {
        out.push(physics_suite(cases, seed));
    }
    if matches!(suite, Suite::Decoder | Suite::All) {
        out.push(decoder_suite(cases, seed)?);
    }
    if matches!(suite, Suite::Interaction | Suite::All) {
        out.push(interaction_suite(cases, seed)?);
    }
    Ok(out)
}
