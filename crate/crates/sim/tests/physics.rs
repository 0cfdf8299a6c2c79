use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sim::*;

fn body(pos: Vec2, vel: Vec2, mass: f64, charge: f64, radius: f64) -> WorldObject {
    WorldObject {
        position: pos,
        velocity: vel,
        mass,
        charge,
        radius,
        color_id: 0,
        shape: Shape::Disk,
    }
}

#[test]
fn thousand_elastic_collisions_conserve_momentum_and_energy() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut events = 0;
    while events < 1000 {
        let m1 = [1.0, 5.0][rng.random_range(0..2)];
        let m2 = rng.random_range(0.5..6.0);
        let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let n = Vec2::new(angle.cos(), angle.sin());
        let a = body(Vec2::zeros(), Vec2::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)), m1, 0.0, 0.4);
        let b = body(n * 0.8, Vec2::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)), m2, 0.0, 0.4);
        if (a.velocity - b.velocity).dot(&(a.position - b.position)) >= 0.0 {
            continue;
        }
        let (va, vb) = resolve_collision(&a, &b, 1.0);
        let p0 = a.momentum() + b.momentum();
        let p1 = va * m1 + vb * m2;
        assert!((p1 - p0).norm() < 1e-12, "momentum drift {}", (p1 - p0).norm());
        let e0 = a.kinetic_energy() + b.kinetic_energy();
        let e1 = 0.5 * m1 * va.norm_squared() + 0.5 * m2 * vb.norm_squared();
        assert!((e1 - e0).abs() < 1e-9);
        // tangential components untouched
        let t = Vec2::new(-n.y, n.x);
        assert!((va.dot(&t) - a.velocity.dot(&t)).abs() < 1e-12);
        events += 1;
    }
}

#[test]
fn collisions_inside_step_conserve_momentum() {
    let state = WorldState {
        objects: vec![
            body(Vec2::new(2.0, 2.0), Vec2::new(2.0, 0.3), 1.0, 0.0, 0.4),
            body(Vec2::new(2.85, 2.1), Vec2::new(-1.0, 0.0), 5.0, 0.0, 0.45),
        ],
        time_index: 0,
        bounds: Bounds::new(10.0, 10.0),
    };
    let (next, ev) = step(&state, &PhysicsParams::default());
    assert_eq!(ev.collisions, vec![(0, 1)]);
    assert!((next.total_momentum() - state.total_momentum()).norm() < 1e-12);
    assert!((next.kinetic_energy() - state.kinetic_energy()).abs() < 1e-9);
}

#[test]
fn wall_bounce_preserves_speed() {
    let mut state = WorldState {
        objects: vec![body(Vec2::new(0.6, 1.5), Vec2::new(-2.3, 0.7), 1.0, 0.0, 0.4)],
        time_index: 0,
        bounds: Bounds::new(4.8, 3.2),
    };
    let speed = state.objects[0].velocity.norm();
    let p = PhysicsParams::default();
    let mut bounces = 0;
    for _ in 0..40 {
        let (next, ev) = step(&state, &p);
        bounces += ev.wall_bounces;
        state = next;
        assert!((state.objects[0].velocity.norm() - speed).abs() < 1e-12);
        assert!(state.bounds.contains(&state.objects[0].position));
    }
    assert!(bounces >= 2);
}

#[test]
fn like_charges_conserve_momentum_over_200_steps() {
    let mut state = WorldState {
        objects: vec![
            body(Vec2::new(48.0, 50.0), Vec2::new(0.3, 0.1), 1.0, 1.0, 0.4),
            body(Vec2::new(52.0, 50.5), Vec2::new(-0.2, 0.0), 5.0, 1.0, 0.4),
        ],
        time_index: 0,
        bounds: Bounds::new(100.0, 100.0),
    };
    let p0 = state.total_momentum();
    let p = PhysicsParams::default();
    for _ in 0..200 {
        let (next, ev) = step(&state, &p);
        assert_eq!(ev.wall_bounces, 0);
        assert!(ev.collisions.is_empty());
        state = next;
    }
    assert!((state.total_momentum() - p0).norm() < 1e-9);
    // repulsion pushed them apart
    assert!((state.objects[0].position - state.objects[1].position).norm() > 4.1);
}

#[test]
fn rendering_is_pure_and_masks_are_exclusive() {
    let ep = generate_episode(&SceneConfig::default(), Category::Four, 3).unwrap();
    let (f, m) = render(&ep.states[5], ep.height, ep.width);
    assert_eq!(f, ep.frame(5));
    assert_eq!(&m[..], &ep.masks[5 * ep.num_objects() * ep.height * ep.width..][..m.len()]);
    let hw = ep.height * ep.width;
    for px in 0..hw {
        let owners: u8 = (0..ep.num_objects()).map(|k| m[k * hw + px]).sum();
        assert!(owners <= 1);
    }
    assert!(f.iter().all(|&v| (0.0..=1.0).contains(&v)));
}

proptest! {
    #[test]
    fn coulomb_pair_forces_cancel_exactly(
        x1 in -5.0f64..5.0, y1 in -5.0f64..5.0, x2 in -5.0f64..5.0, y2 in -5.0f64..5.0,
        q1 in -1i32..=1, q2 in -1i32..=1, k in 0.01f64..3.0,
    ) {
        let a = body(Vec2::new(x1, y1), Vec2::zeros(), 1.0, q1 as f64, 0.4);
        let b = body(Vec2::new(x2, y2), Vec2::zeros(), 5.0, q2 as f64, 0.4);
        let s = coulomb_force(&a, &b, k, 0.7) + coulomb_force(&b, &a, k, 0.7);
        prop_assert_eq!(s, Vec2::zeros());
    }

    #[test]
    fn step_is_deterministic(seed in 0u64..200) {
        let ep = generate_episode(&SceneConfig::default(), Category::Five, seed).unwrap();
        let p = PhysicsParams::default();
        prop_assert_eq!(step(&ep.states[0], &p), step(&ep.states[0], &p));
    }
}
