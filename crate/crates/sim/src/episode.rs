use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::physics::{step, PhysicsParams};
use crate::render::{render, PALETTE};
use crate::world::{Bounds, Shape, Vec2, WorldObject, WorldState};

/// The five data categories used by the curriculum.
///
/// | category | charge | collision | identical mass |
/// |---|---|---|---|
/// | 1 | no  | yes | yes |
/// | 2 | no  | yes | no  |
/// | 3 | yes | no  | any |
/// | 4 | yes | yes | yes |
/// | 5 | yes | yes | no  |
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Category {
    One = 1,
    Two = 2,
    Three = 3,
    Four = 4,
    Five = 5,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CategoryFlags {
    pub charged: bool,
    pub collision: bool,
    /// `None` when the category does not constrain masses.
    pub identical_mass: Option<bool>,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::One,
        Category::Two,
        Category::Three,
        Category::Four,
        Category::Five,
    ];

    pub fn flags(self) -> CategoryFlags {
        let (charged, collision, identical_mass) = match self {
            Category::One => (false, true, Some(true)),
            Category::Two => (false, true, Some(false)),
            Category::Three => (true, false, None),
            Category::Four => (true, true, Some(true)),
            Category::Five => (true, true, Some(false)),
        };
        CategoryFlags {
            charged,
            collision,
            identical_mass,
        }
    }

    pub fn index(self) -> usize {
        self as usize - 1
    }
}

impl TryFrom<u8> for Category {
    type Error = SimError;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            1..=5 => Ok(Category::ALL[v as usize - 1]),
            _ => Err(SimError::InvalidCategory(v)),
        }
    }
}

impl From<Category> for u8 {
    fn from(c: Category) -> u8 {
        c as u8
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    /// Frames per episode, including the initial state.
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub world_width: f64,
    pub world_height: f64,
    pub physics: PhysicsParams,
    pub charge_unit: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    pub mass_palette: Vec<f64>,
    pub radius_range: [f64; 2],
    pub speed_range: [f64; 2],
    /// A required collision must happen at or before this frame index.
    pub collision_window: usize,
    pub max_attempts: usize,
    pub allow_squares: bool,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            frames: 11,
            height: 32,
            width: 48,
            world_width: 4.8,
            world_height: 3.2,
            physics: PhysicsParams::default(),
            charge_unit: 1.0,
            min_objects: 2,
            max_objects: 3,
            mass_palette: vec![1.0, 5.0],
            radius_range: [0.35, 0.5],
            speed_range: [1.0, 2.5],
            collision_window: 6,
            max_attempts: 5000,
            allow_squares: true,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SimError::InvalidConfig(m.to_string()));
        if self.frames < 2 || self.height == 0 || self.width == 0 {
            return bad("need at least 2 frames and a non-empty image");
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad("object count range must satisfy 1 <= min <= max");
        }
        if self.mass_palette.is_empty() || self.mass_palette.iter().any(|&m| !(m > 0.0)) {
            return bad("mass palette must hold positive masses");
        }
        let [r0, r1] = self.radius_range;
        let [s0, s1] = self.speed_range;
        if !(r0 > 0.0 && r0 <= r1) || !(s0 >= 0.0 && s0 <= s1) {
            return bad("radius and speed ranges must be ordered and non-negative");
        }
        if s1 * self.physics.dt >= r0 {
            return bad("max speed * dt must stay below the min radius");
        }
        if !(self.physics.dt > 0.0 && self.physics.r_min > 0.0) {
            return bad("dt and r_min must be positive");
        }
        Ok(())
    }

    pub fn bounds(&self) -> Bounds {
        Bounds::new(self.world_width, self.world_height)
    }
}

/// A simulated and rendered clip.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    /// `None` for scenes built outside the category generator.
    pub category: Option<Category>,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub states: Vec<WorldState>,
    /// `T x H x W x 3`, values in `[0, 1]`.
    pub frames: Vec<f32>,
    /// `T x K x H x W` instance masks (0 or 1).
    pub masks: Vec<u8>,
}

impl Episode {
    pub fn num_frames(&self) -> usize {
        self.states.len()
    }

    pub fn num_objects(&self) -> usize {
        self.states[0].objects.len()
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.height * self.width * 3;
        &self.frames[t * n..(t + 1) * n]
    }

    pub fn mask(&self, t: usize, k: usize) -> &[u8] {
        let n = self.height * self.width;
        let base = (t * self.num_objects() + k) * n;
        &self.masks[base..base + n]
    }

    /// Builds an episode from an initial state by simulation and rendering.
    pub fn simulate(
        initial: WorldState,
        frames: usize,
        physics: &PhysicsParams,
        height: usize,
        width: usize,
    ) -> (Self, Vec<CollisionEvent>) {
        let mut states = vec![initial];
        let mut log = Vec::new();
        for t in 1..frames {
            let (next, ev) = step(&states[t - 1], physics);
            log.extend(ev.collisions.iter().map(|&(i, j)| CollisionEvent { frame: t, i, j }));
            states.push(next);
        }
        let mut all_frames = Vec::with_capacity(frames * height * width * 3);
        let mut all_masks = Vec::new();
        for s in &states {
            let (f, m) = render(s, height, width);
            all_frames.extend(f);
            all_masks.extend(m);
        }
        let episode = Self {
            category: None,
            seed: 0,
            height,
            width,
            states,
            frames: all_frames,
            masks: all_masks,
        };
        (episode, log)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct CollisionEvent {
    /// Index of the first state after the impact.
    pub frame: usize,
    pub i: usize,
    pub j: usize,
}

/// Collision detector that only looks at recorded states.
///
/// A pair collided at frame `t` when it is in contact at `t`, separating along
/// the contact normal at `t`, and was approaching along that normal at `t-1`.
pub fn detect_collisions(states: &[WorldState]) -> Vec<CollisionEvent> {
    const CONTACT_TOL: f64 = 1e-6;
    let mut events = Vec::new();
    for t in 1..states.len() {
        let (prev, cur) = (&states[t - 1].objects, &states[t].objects);
        for i in 0..cur.len() {
            for j in i + 1..cur.len() {
                let d = cur[i].position - cur[j].position;
                let dist = d.norm();
                if dist == 0.0 || dist > cur[i].radius + cur[j].radius + CONTACT_TOL {
                    continue;
                }
                let n = d / dist;
                let separating = (cur[i].velocity - cur[j].velocity).dot(&n) > 0.0;
                let was_approaching = (prev[i].velocity - prev[j].velocity).dot(&n) < 0.0;
                if separating && was_approaching {
                    events.push(CollisionEvent { frame: t, i, j });
                }
            }
        }
    }
    events
}

/// Re-derives the category flags of a trajectory from its states alone.
pub fn observed_flags(states: &[WorldState], collision_window: usize) -> CategoryFlags {
    let objs = &states[0].objects;
    let charged = objs.iter().filter(|o| o.is_charged()).count() >= 2;
    let identical = objs.iter().all(|o| o.mass == objs[0].mass);
    let collision = detect_collisions(states)
        .iter()
        .any(|e| e.frame <= collision_window);
    CategoryFlags {
        charged,
        collision,
        identical_mass: Some(identical),
    }
}

/// Whether the observed flags satisfy `category`. Categories without a
/// collision additionally forbid collisions anywhere in the episode.
pub fn satisfies(category: Category, states: &[WorldState], collision_window: usize) -> bool {
    let want = category.flags();
    let got = observed_flags(states, collision_window);
    let uncharged = states[0].objects.iter().all(|o| !o.is_charged());
    let charge_ok = if want.charged { got.charged } else { uncharged };
    let collision_ok = if want.collision {
        got.collision
    } else {
        detect_collisions(states).is_empty()
    };
    let mass_ok = want
        .identical_mass
        .is_none_or(|w| Some(w) == got.identical_mass);
    charge_ok && collision_ok && mass_ok
}

fn max_speed(states: &[WorldState]) -> f64 {
    states
        .iter()
        .flat_map(|s| s.objects.iter().map(|o| o.velocity.norm()))
        .fold(0.0, f64::max)
}

fn random_unit(rng: &mut impl Rng) -> Vec2 {
    let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    Vec2::new(a.cos(), a.sin())
}

fn rotate(v: Vec2, angle: f64) -> Vec2 {
    let (s, c) = angle.sin_cos();
    Vec2::new(c * v.x - s * v.y, s * v.x + c * v.y)
}

/// Draws initial conditions for `category`. The draw is a proposal only;
/// the caller accepts it after simulating.
fn propose(cfg: &SceneConfig, category: Category, rng: &mut ChaCha8Rng) -> Option<WorldState> {
    let flags = category.flags();
    let bounds = cfg.bounds();
    let n = rng.random_range(cfg.min_objects.max(2)..=cfg.max_objects.max(2));
    let palette = &cfg.mass_palette;
    let masses: Vec<f64> = match flags.identical_mass {
        Some(true) => vec![palette[rng.random_range(0..palette.len())]; n],
        _ => (0..n).map(|_| palette[rng.random_range(0..palette.len())]).collect(),
    };
    let charges: Vec<f64> = if flags.charged {
        (0..n)
            .map(|_| [-1.0, 0.0, 1.0][rng.random_range(0..3)] * cfg.charge_unit)
            .collect()
    } else {
        vec![0.0; n]
    };
    let mut colors: Vec<u32> = (0..PALETTE.len() as u32).collect();
    colors.shuffle(rng);

    let mut objects: Vec<WorldObject> = Vec::with_capacity(n);
    for k in 0..n {
        let radius = rng.random_range(cfg.radius_range[0]..=cfg.radius_range[1]);
        let shape = if cfg.allow_squares && rng.random_bool(0.5) {
            Shape::Square
        } else {
            Shape::Disk
        };
        let speed = rng.random_range(cfg.speed_range[0]..=cfg.speed_range[1]);
        let mut placed = None;
        for _ in 0..100 {
            let pos = if k == 1 && flags.collision && rng.random_bool(0.8) {
                let gap = objects[0].radius + radius + rng.random_range(0.2..1.8);
                objects[0].position + random_unit(rng) * gap
            } else {
                Vec2::new(
                    rng.random_range(radius..bounds.max.x - radius),
                    rng.random_range(radius..bounds.max.y - radius),
                )
            };
            let inside = pos.x > radius
                && pos.y > radius
                && pos.x < bounds.max.x - radius
                && pos.y < bounds.max.y - radius;
            let free = objects
                .iter()
                .all(|o| (o.position - pos).norm() > o.radius + radius + 0.05);
            if inside && free {
                placed = Some(pos);
                break;
            }
        }
        let position = placed?;
        objects.push(WorldObject {
            position,
            velocity: random_unit(rng) * speed,
            mass: masses[k],
            charge: charges[k],
            radius,
            color_id: colors[k % colors.len()],
            shape,
        });
    }
    if flags.collision && rng.random_bool(0.8) {
        // aim the first pair at each other
        let toward = (objects[1].position - objects[0].position).normalize();
        let s0 = objects[0].velocity.norm();
        objects[0].velocity = rotate(toward, rng.random_range(-0.25..0.25)) * s0;
        if rng.random_bool(0.5) {
            let s1 = objects[1].velocity.norm();
            objects[1].velocity = rotate(-toward, rng.random_range(-0.25..0.25)) * s1;
        }
    }
    Some(WorldState {
        objects,
        time_index: 0,
        bounds,
    })
}

/// Rejection-samples an episode whose trajectory satisfies `category`.
pub fn generate_episode(cfg: &SceneConfig, category: Category, seed: u64) -> Result<Episode> {
    cfg.validate()?;
    if category.flags().identical_mass == Some(false) && distinct_masses(cfg) < 2 {
        return Err(SimError::InvalidConfig(
            "unequal-mass categories need at least two palette masses".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..cfg.max_attempts {
        let Some(initial) = propose(cfg, category, &mut rng) else {
            continue;
        };
        let (mut ep, log) =
            Episode::simulate(initial, cfg.frames, &cfg.physics, cfg.height, cfg.width);
        let logged_collision = log.iter().any(|e| e.frame <= cfg.collision_window);
        let no_tunnel = max_speed(&ep.states) * cfg.physics.dt < cfg.radius_range[0];
        // The independent detector must agree with the simulator's own log.
        let agrees = detect_collisions(&ep.states) == log;
        let logged_ok = if category.flags().collision {
            logged_collision
        } else {
            log.is_empty()
        };
        if no_tunnel && agrees && logged_ok && satisfies(category, &ep.states, cfg.collision_window)
        {
            ep.category = Some(category);
            ep.seed = seed;
            return Ok(ep);
        }
    }
    Err(SimError::RejectionExhausted {
        category: category as u8,
        seed,
        attempts: cfg.max_attempts,
    })
}

fn distinct_masses(cfg: &SceneConfig) -> usize {
    let mut m = cfg.mass_palette.clone();
    m.sort_by(f64::total_cmp);
    m.dedup();
    m.len()
}

/// Scene of `n` objects at rest, uncharged, with unit mass.
pub fn generate_static_scene(cfg: &SceneConfig, n: usize, seed: u64) -> Result<Episode> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bounds = cfg.bounds();
    let mut colors: Vec<u32> = (0..PALETTE.len() as u32).collect();
    colors.shuffle(&mut rng);
    for _ in 0..cfg.max_attempts {
        let mut objects: Vec<WorldObject> = Vec::new();
        for k in 0..n {
            let radius = rng.random_range(cfg.radius_range[0]..=cfg.radius_range[1]);
            let position = Vec2::new(
                rng.random_range(radius..bounds.max.x - radius),
                rng.random_range(radius..bounds.max.y - radius),
            );
            let shape = if cfg.allow_squares && rng.random_bool(0.5) {
                Shape::Square
            } else {
                Shape::Disk
            };
            objects.push(WorldObject {
                position,
                velocity: Vec2::zeros(),
                mass: 1.0,
                charge: 0.0,
                radius,
                color_id: colors[k % colors.len()],
                shape,
            });
        }
        let initial = WorldState {
            objects,
            time_index: 0,
            bounds,
        };
        if initial.is_valid_initial() {
            let (mut ep, _) =
                Episode::simulate(initial, cfg.frames, &cfg.physics, cfg.height, cfg.width);
            ep.seed = seed;
            return Ok(ep);
        }
    }
    Err(SimError::InvalidConfig(format!(
        "could not place {n} static objects"
    )))
}
