use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

pub type Vec2 = Vector2<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Disk,
    Square,
}

impl Shape {
    pub fn id(self) -> u32 {
        match self {
            Shape::Disk => 0,
            Shape::Square => 1,
        }
    }

    pub fn from_id(id: u32) -> Option<Self> {
        match id {
            0 => Some(Shape::Disk),
            1 => Some(Shape::Square),
            _ => None,
        }
    }
}

/// One rigid body. Collisions always use the bounding disk of `radius`.
#[derive(Clone, Debug, PartialEq)]
pub struct WorldObject {
    pub position: Vec2,
    /// World units per unit time.
    pub velocity: Vec2,
    pub mass: f64,
    /// Signed multiple of the charge unit: -q0, 0 or +q0.
    pub charge: f64,
    pub radius: f64,
    pub color_id: u32,
    pub shape: Shape,
}

impl WorldObject {
    pub fn momentum(&self) -> Vec2 {
        self.velocity * self.mass
    }

    pub fn kinetic_energy(&self) -> f64 {
        0.5 * self.mass * self.velocity.norm_squared()
    }

    pub fn is_charged(&self) -> bool {
        self.charge != 0.0
    }
}

/// Axis-aligned world rectangle; `min` is the top-left corner.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bounds {
    pub min: Vec2,
    pub max: Vec2,
}

impl Bounds {
    pub fn new(width: f64, height: f64) -> Self {
        Self {
            min: Vec2::zeros(),
            max: Vec2::new(width, height),
        }
    }

    pub fn width(&self) -> f64 {
        self.max.x - self.min.x
    }

    pub fn height(&self) -> f64 {
        self.max.y - self.min.y
    }

    pub fn contains(&self, p: &Vec2) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldState {
    pub objects: Vec<WorldObject>,
    pub time_index: u64,
    pub bounds: Bounds,
}

impl WorldState {
    pub fn total_momentum(&self) -> Vec2 {
        self.objects.iter().map(WorldObject::momentum).sum()
    }

    pub fn kinetic_energy(&self) -> f64 {
        self.objects.iter().map(WorldObject::kinetic_energy).sum()
    }

    /// Every position inside the bounds and no pair overlapping.
    pub fn is_valid_initial(&self) -> bool {
        let inside = self.objects.iter().all(|o| self.bounds.contains(&o.position));
        let apart = self.objects.iter().enumerate().all(|(i, a)| {
            self.objects[i + 1..]
                .iter()
                .all(|b| (a.position - b.position).norm() > a.radius + b.radius)
        });
        inside && apart
    }
}
