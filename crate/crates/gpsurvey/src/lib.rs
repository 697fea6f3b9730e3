//! Adaptive informative path planning with streaming sparse Gaussian-process
//! mapping.
//!
//! The crate couples an online map learner (exact, sparse-variational, and
//! streaming sparse GP regression backends over 2-D scalar fields) with an
//! entropy-driven RRT* replanner and a desk-scale mission simulator, plus a
//! CLI for seeded experiment matrices and runtime-scaling benchmarks.

pub mod data;
pub(crate) mod elbo;
pub mod error;
pub mod exact;
pub mod kernel;
pub mod mission;
pub mod optim;
pub mod sparse;
pub mod planner;
pub mod streaming;
pub mod vehicle;
pub mod world;

pub use error::{Error, Result};

/// Planar position in meters.
pub type Point = nalgebra::Point2<f64>;
