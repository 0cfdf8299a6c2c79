//! Symplectic-Euler integrator with inverse-square charge forces, impulsive
//! disk collisions and reflecting walls.

use serde::{Deserialize, Serialize};

use crate::world::{Vec2, WorldObject, WorldState};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhysicsParams {
    pub dt: f64,
    pub restitution: f64,
    pub coulomb_k: f64,
    /// Distance below which the inverse-square law is clamped.
    pub r_min: f64,
}

impl Default for PhysicsParams {
    fn default() -> Self {
        Self {
            dt: 0.1,
            restitution: 1.0,
            coulomb_k: 0.5,
            r_min: 0.7,
        }
    }
}

/// Force on `o1` exerted by `o2`: `k q1 q2 r_hat / max(r^2, r_min^2)` with
/// `r_hat` pointing from `o2` to `o1`, so like charges repel.
pub fn coulomb_force(o1: &WorldObject, o2: &WorldObject, k: f64, r_min: f64) -> Vec2 {
    let d = o1.position - o2.position;
    let r = d.norm();
    let strength = k * (o1.charge * o2.charge);
    if strength == 0.0 || r == 0.0 {
        return Vec2::zeros();
    }
    let dir = Vec2::new(d.x / r, d.y / r);
    dir * (strength / (r * r).max(r_min * r_min))
}

/// Post-collision velocities for two touching disks.
///
/// The impulse acts along the line of centers with coefficient of
/// restitution `e`; tangential components are untouched. A separating or
/// coincident pair is returned unchanged.
pub fn resolve_collision(o1: &WorldObject, o2: &WorldObject, e: f64) -> (Vec2, Vec2) {
    let d = o1.position - o2.position;
    let dist = d.norm();
    if dist == 0.0 {
        return (o1.velocity, o2.velocity);
    }
    let n = d / dist;
    let approach = (o1.velocity - o2.velocity).dot(&n);
    if approach >= 0.0 {
        return (o1.velocity, o2.velocity);
    }
    let j = -(1.0 + e) * approach / (1.0 / o1.mass + 1.0 / o2.mass);
    let impulse = n * j;
    (
        o1.velocity + impulse / o1.mass,
        o2.velocity - impulse / o2.mass,
    )
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepEvents {
    /// Pairs `(i, j)`, `i < j`, whose collision was resolved this step.
    pub collisions: Vec<(usize, usize)>,
    pub wall_bounces: usize,
}

/// Advances one step: velocities from pairwise charge forces, then
/// positions, then collisions (with de-penetration), then walls.
pub fn step(state: &WorldState, params: &PhysicsParams) -> (WorldState, StepEvents) {
    let mut next = state.clone();
    next.time_index += 1;
    let objs = &mut next.objects;
    let n = objs.len();
    let mut events = StepEvents::default();

    let mut forces = vec![Vec2::zeros(); n];
    for i in 0..n {
        for j in i + 1..n {
            let f = coulomb_force(&objs[i], &objs[j], params.coulomb_k, params.r_min);
            forces[i] += f;
            forces[j] -= f;
        }
    }
    for (o, f) in objs.iter_mut().zip(&forces) {
        o.velocity += f / o.mass * params.dt;
        o.position += o.velocity * params.dt;
    }

    for i in 0..n {
        for j in i + 1..n {
            let d = objs[i].position - objs[j].position;
            let dist = d.norm();
            let contact = objs[i].radius + objs[j].radius;
            if dist > contact || dist == 0.0 {
                continue;
            }
            let (vi, vj) = resolve_collision(&objs[i], &objs[j], params.restitution);
            if vi != objs[i].velocity || vj != objs[j].velocity {
                events.collisions.push((i, j));
            }
            objs[i].velocity = vi;
            objs[j].velocity = vj;
            let overlap = contact - dist;
            if overlap > 0.0 {
                let n = d / dist;
                let (mi, mj) = (objs[i].mass, objs[j].mass);
                objs[i].position += n * (overlap * mj / (mi + mj));
                objs[j].position -= n * (overlap * mi / (mi + mj));
            }
        }
    }

    let bounds = next.bounds;
    for o in objs.iter_mut() {
        let r = o.radius;
        for axis in 0..2 {
            let lo = bounds.min[axis] + r;
            let hi = bounds.max[axis] - r;
            if o.position[axis] < lo {
                o.position[axis] = 2.0 * lo - o.position[axis];
                if o.velocity[axis] < 0.0 {
                    o.velocity[axis] = -o.velocity[axis];
                    events.wall_bounces += 1;
                }
            } else if o.position[axis] > hi {
                o.position[axis] = 2.0 * hi - o.position[axis];
                if o.velocity[axis] > 0.0 {
                    o.velocity[axis] = -o.velocity[axis];
                    events.wall_bounces += 1;
                }
            }
        }
    }
    (next, events)
}
