//! Camera-lidar extrinsic calibration with automatic pose-set selection.
//!
//! Poses are scored in triples by VOQ (worst normal-matrix condition number
//! plus mean board dimension error); the best-scoring sets are solved in
//! closed form and aggregated after z-score filtering.

pub mod board;
pub mod camera;
pub mod cloud;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod lidar;
pub mod pipeline;
pub mod rng;
pub mod solver;
pub mod synthetic;
pub mod voq;

pub use error::{Error, ErrorKind, Result};
