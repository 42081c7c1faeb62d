//! Data-driven, distributionally robust motion planning for stochastic linear
//! systems.
//!
//! Offline, trajectory samples of the tracking error are turned into a tube of
//! 1-Wasserstein ambiguity sets. Online, a kinodynamic tree planner grows
//! reference trajectories whose nodes are accepted only if every distribution
//! in the tube keeps the chance constraints.

pub mod dist;
pub mod error;
pub mod geometry;
pub mod linsys;
pub mod montecarlo;
pub mod planner;
pub mod scenarios;
pub mod tube;
pub mod validity;

pub use error::{Error, Result};
