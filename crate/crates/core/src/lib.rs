//! Planning with reasoning tokens and a flow-matching action expert.

pub mod config;
pub mod dataio;
pub mod metrics;
pub mod microworld;
pub mod nnkit;
pub mod pipeline;
pub mod policy;
pub mod scalar;
pub mod training;

pub type Real = f64;
pub type Vec2 = microworld::geometry::Vec2<Real>;
pub type Pose = microworld::geometry::Pose<Real>;
pub type Trajectory = microworld::trajectory::Trajectory<Real>;
pub type SubScores = metrics::SubScores<Real>;
