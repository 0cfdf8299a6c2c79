//! Ground-truth 2D physics, rendering and the categorized episode container.

pub mod dataset;
pub mod episode;
pub mod error;
pub mod physics;
pub mod render;
pub mod world;

pub use dataset::{
    derive_seed, generate_dataset, generate_episodes, read_dataset, read_manifest,
    write_dataset, Dataset, Manifest,
};
pub use episode::{
    detect_collisions, generate_episode, generate_static_scene, Category, CollisionEvent,
    Episode, SceneConfig,
};
pub use error::{Result, SimError};
pub use physics::{coulomb_force, resolve_collision, step, PhysicsParams};
pub use render::render;
pub use world::{Bounds, Shape, Vec2, WorldObject, WorldState};
