//! Deterministic 2-D driving micro-world.

pub mod generator;
pub mod geometry;
pub mod scene;
pub mod trajectory;

pub use generator::{generate_scenario, generate_scenario_with, GeneratorConfig};
pub use geometry::{OrientedBox, Polygon, Polyline, Pose, Vec2};
pub use scene::{Archetype, Instruction, Label, Lane, LightState, Obstacle, ObstacleKind, Scenario, Scene, TrafficLight};
pub use trajectory::{
    classify_maneuver, controls_from_trajectory, rollout_kinematic, EgoState, Lateral, Longitudinal, ManeuverLabel,
    ManeuverThresholds, TrajectoryError,
};
