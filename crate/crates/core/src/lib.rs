//! Spatial-temporal transformer video object detection, built from scratch
//! at desk scale: a small differentiable tensor core, deformable and dense
//! attention, a single-frame detector, three temporal aggregation variants,
//! set-prediction losses, a synthetic moving-shapes benchmark, detection
//! metrics and clip-window inference planning.

pub mod attention;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod matching;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod schedule;
pub mod spatial;
pub mod suite;
pub mod temporal;
pub mod train;

pub use error::{Error, Result};
