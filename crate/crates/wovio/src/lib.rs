//! Odometer-aided visual-inertial sliding-window estimator with
//! bidirectional trajectory computation.

pub mod camera;
pub mod config;
pub mod engine;
pub mod factors;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod obsv;
pub mod preint;
pub mod sim;
pub mod solver;
pub mod sweep;
