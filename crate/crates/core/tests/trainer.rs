use std::path::Path;

use physcon::inference::InferenceConfig;
use physcon::params::ModelConfig;
use physcon::trainer::{
    load_checkpoint, params_hash, read_metrics_jsonl, save_checkpoint, train_stage, Ablation, MetricRecord,
    StageConfig, TrainConfig, Trainer, CHECKPOINT_VERSION,
};
use physcon::CoreError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sim::{generate_episodes, Category, Dataset, SceneConfig};

fn scene() -> SceneConfig {
    SceneConfig {
        height: 8,
        width: 12,
        frames: 5,
        ..SceneConfig::default()
    }
}

fn data(counts: [usize; 5]) -> Dataset {
    generate_episodes(&scene(), counts, 7).unwrap()
}

fn tiny_config() -> TrainConfig {
    let stage = |s: u8, horizon, iterations| StageConfig {
        horizon,
        iterations,
        batch_size: 2,
        ..StageConfig::default_for(s)
    };
    TrainConfig {
        model: ModelConfig {
            height: 8,
            width: 12,
            decoder_hidden: vec![8],
            ..ModelConfig::default()
        },
        inference: InferenceConfig {
            slots: 2,
            refine_steps: 1,
            inner_steps: 1,
            polish: false,
            ..InferenceConfig::default()
        },
        stages: vec![stage(1, 2, 2), stage(2, 3, 3), stage(3, 3, 1)],
        lr: 1e-2,
        seed: 11,
        unroll: 1,
        ..TrainConfig::default()
    }
}

fn strip_time(m: &[MetricRecord]) -> Vec<MetricRecord> {
    m.iter()
        .cloned()
        .map(|mut r| {
            r.wall_time = 0.0;
            r
        })
        .collect()
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let t = Trainer::new(tiny_config()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.phyc");
    let b = dir.path().join("b.phyc");
    save_checkpoint(&t.checkpoint(), &a).unwrap();
    let loaded = load_checkpoint(&a).unwrap();
    save_checkpoint(&loaded, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(loaded, t.checkpoint());
    for ((_, x), (_, y)) in loaded.params.iter().zip(t.model.params.named().iter()) {
        assert!(x.data().iter().zip(y.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
    }
}

fn write_mutated(src: &Path, dst: &Path, f: impl FnOnce(&mut Vec<u8>)) {
    let mut bytes = std::fs::read(src).unwrap();
    f(&mut bytes);
    std::fs::write(dst, bytes).unwrap();
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let t = Trainer::new(tiny_config()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.phyc");
    save_checkpoint(&t.checkpoint(), &good).unwrap();
    let bad = dir.path().join("bad.phyc");

    write_mutated(&good, &bad, |b| b[0] = b'X');
    assert!(matches!(load_checkpoint(&bad), Err(CoreError::Format { .. })));

    write_mutated(&good, &bad, |b| b[4..8].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes()));
    assert!(matches!(load_checkpoint(&bad), Err(CoreError::Version { .. })));

    write_mutated(&good, &bad, |b| b.truncate(b.len() - 9));
    assert!(matches!(load_checkpoint(&bad), Err(CoreError::Format { .. })));

    write_mutated(&good, &bad, |b| b.push(0));
    assert!(matches!(load_checkpoint(&bad), Err(CoreError::Format { .. })));

    // a flipped byte in the stored config no longer matches its hash
    write_mutated(&good, &bad, |b| {
        let at = b.windows(6).position(|w| w == b"\"seed\"").unwrap();
        b[at + 7] ^= 1;
    });
    assert!(load_checkpoint(&bad).is_err());
}

#[test]
fn resume_mid_stage_two_reproduces_the_uninterrupted_run() {
    let d = data([3, 3, 0, 0, 0]);
    let cfg = TrainConfig {
        stages: tiny_config().stages[..2].to_vec(),
        ..tiny_config()
    };
    let mut whole = Trainer::new(cfg.clone()).unwrap();
    whole.run(&d, None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut first = Trainer::new(cfg).unwrap();
    first.run_until(&d, Some(dir.path()), 3).unwrap();
    assert_eq!((first.stage_pos, first.iteration), (1, 1));
    let path = dir.path().join("mid.phyc");
    save_checkpoint(&first.checkpoint(), &path).unwrap();
    let mut second = Trainer::resume(&load_checkpoint(&path).unwrap()).unwrap();
    second.run(&d, Some(dir.path())).unwrap();

    assert_eq!(params_hash(&whole.model.params), params_hash(&second.model.params));
    let mut joined = first.metrics.clone();
    joined.extend(second.metrics.clone());
    assert_eq!(strip_time(&joined), strip_time(&whole.metrics));
    // the on-disk log holds both halves in order
    assert_eq!(strip_time(&read_metrics_jsonl(&dir.path().join("metrics.jsonl")).unwrap()), strip_time(&whole.metrics));
    assert!(dir.path().join("stage1.phyc").exists());
    assert!(dir.path().join("stage2.phyc").exists());
    assert!(dir.path().join("final.phyc").exists());
}

#[test]
fn same_seed_gives_identical_metrics() {
    let d = data([3, 0, 0, 0, 0]);
    let cfg = TrainConfig {
        stages: tiny_config().stages[..1].to_vec(),
        ..tiny_config()
    };
    let mut a = Trainer::new(cfg.clone()).unwrap();
    a.run(&d, None).unwrap();
    let mut b = Trainer::new(cfg.clone()).unwrap();
    b.run(&d, None).unwrap();
    assert_eq!(strip_time(&a.metrics), strip_time(&b.metrics));
    let threaded = TrainConfig { threads: 2, ..cfg };
    let mut c = Trainer::new(threaded).unwrap();
    c.run(&d, None).unwrap();
    let (ma, mc) = (strip_time(&a.metrics), strip_time(&c.metrics));
    assert_eq!(ma.iter().map(|m| m.loss).collect::<Vec<_>>(), mc.iter().map(|m| m.loss).collect::<Vec<_>>());
}

#[test]
fn stage_one_checkpoint_continues_into_stage_two() {
    let d = data([3, 3, 0, 0, 0]);
    let cfg = TrainConfig {
        stages: tiny_config().stages[..2].to_vec(),
        ..tiny_config()
    };
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(cfg).unwrap();
    t.run_until(&d, Some(dir.path()), 2).unwrap();
    let c = load_checkpoint(&dir.path().join("stage1.phyc")).unwrap();
    assert_eq!((c.stage, c.iteration), (1, 2));
    let mut r = Trainer::resume(&c).unwrap();
    assert_eq!(r.current_stage().unwrap().stage, 2);
    let m = r.step(&d).unwrap();
    assert_eq!((m.stage, m.horizon, m.global_iteration), (2, 3, 2));
}

#[test]
fn stage_one_never_samples_charged_or_unequal_mass_episodes() {
    let d = data([2, 2, 2, 2, 2]);
    let cfg = tiny_config();
    let mut t = Trainer::new(cfg.clone()).unwrap();
    let stage = cfg.stages[0].clone();
    let pool = t.pool(&stage, &d).unwrap();
    assert_eq!(pool.len(), 2);
    for _ in 0..200 {
        for item in t.sample_batch(&stage, pool.len()) {
            let ep = pool[item.episode];
            assert_eq!(ep.category, Some(Category::One));
            let objs = &ep.states[0].objects;
            assert!(objs.iter().all(|o| o.charge == 0.0 && o.mass == objs[0].mass));
            assert_eq!(item.gates.charge, 0.0);
            assert!(item.gates.collision == 0.0 || item.gates.collision == 1.0);
        }
    }
}

#[test]
fn collision_gate_is_drawn_at_the_configured_rate() {
    let cfg = tiny_config();
    let mut t = Trainer::new(cfg.clone()).unwrap();
    let stage = StageConfig {
        batch_size: 1000,
        ..cfg.stages[0].clone()
    };
    let on = t.sample_batch(&stage, 1).iter().filter(|b| b.gates.collision == 1.0).count();
    // binomial(1000, 0.5): 6 standard deviations is about 95
    assert!((405..=595).contains(&on), "{on}");
}

#[test]
fn no_interaction_arm_closes_every_gate() {
    let cfg = tiny_config().with_ablation(Ablation::NoInteraction);
    let mut t = Trainer::new(cfg.clone()).unwrap();
    for s in &cfg.stages {
        for item in t.sample_batch(s, 3) {
            assert_eq!((item.gates.collision, item.gates.charge), (0.0, 0.0));
        }
    }
}

#[test]
fn charge_map_is_untouched_while_charge_is_disabled() {
    let d = data([3, 3, 0, 0, 0]);
    let cfg = TrainConfig {
        stages: tiny_config().stages[..2].to_vec(),
        ..tiny_config()
    };
    let mut t = Trainer::new(cfg).unwrap();
    let before: Vec<_> = t.model.params.named().into_iter().filter(|(n, _)| n.starts_with("interaction.charge")).collect();
    let decoder_before = t.model.params.decoder.in_z.clone();
    t.run(&d, None).unwrap();
    let after: Vec<_> = t.model.params.named().into_iter().filter(|(n, _)| n.starts_with("interaction.charge")).collect();
    assert_eq!(before, after);
    assert_ne!(decoder_before, t.model.params.decoder.in_z);
}

#[test]
fn stage_datasets_are_checked_against_the_schedule() {
    let d = data([2, 2, 0, 0, 0]);
    let cfg = tiny_config();
    let model = Trainer::new(cfg.clone()).unwrap().model;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(
        train_stage(1, &d, model.clone(), &cfg, &mut rng),
        Err(CoreError::StageMismatch { stage: 1, category: 2 })
    ));
    let only_one = Dataset {
        episodes: d.episodes.iter().filter(|e| e.category == Some(Category::One)).cloned().collect(),
    };
    let (trained, metrics) = train_stage(1, &only_one, model.clone(), &cfg, &mut rng).unwrap();
    assert_eq!(metrics.len(), 2);
    assert_ne!(params_hash(&trained.params), params_hash(&model.params));
    let mut t = Trainer::new(cfg).unwrap();
    assert!(matches!(t.step(&Dataset { episodes: Vec::new() }), Err(CoreError::EmptyStage(1))));
}

#[test]
fn horizons_are_recorded_per_stage() {
    let d = data([3, 3, 2, 2, 2]);
    let out = physcon::trainer::train_full(&d, &tiny_config(), None).unwrap();
    let h: Vec<(u8, usize)> = out.metrics.iter().map(|m| (m.stage, m.horizon)).collect();
    assert_eq!(h, vec![(1, 2), (1, 2), (2, 3), (2, 3), (2, 3), (3, 3)]);
    assert!(out.metrics.iter().all(|m| m.loss.is_finite()));
    assert!(out.metrics.iter().filter(|m| m.stage == 3).all(|m| m.charge_on));
    assert_eq!(out.checkpoint.stage, 3);
}

#[test]
fn evaluation_does_not_change_parameters() {
    let d = data([1, 0, 0, 0, 0]);
    let t = Trainer::new(tiny_config()).unwrap();
    let h = params_hash(&t.model.params);
    let clip = physcon::Clip::from_episode(&d.episodes[0], 0, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    physcon::inference::infer(&clip, &t.model, &t.config.inference, &mut rng).unwrap();
    physcon::probes::regenerate(&clip, &t.model, &t.config.inference, &mut rng).unwrap();
    assert_eq!(h, params_hash(&t.model.params));
}

#[test]
fn invalid_schedules_are_rejected() {
    let mut c = tiny_config();
    c.stages.swap(0, 1);
    assert!(c.validate().is_err());
    let mut c = tiny_config();
    c.stages[1].horizon = 1;
    assert!(c.validate().is_err());
    let mut c = tiny_config();
    c.stages[0].collision_prob = 1.5;
    assert!(c.validate().is_err());
    let c = TrainConfig { unroll: 5, ..tiny_config() };
    assert!(c.validate().is_err());
}
