//! Stalled-vehicle anomaly detection for fixed-camera traffic video.
//!
//! The pipeline models the background in both time directions, clusters
//! detections of stationary vehicles into candidate regions, and locates
//! each anomaly's onset from the structural similarity between the region
//! and its background snapshot. [`pipeline::run_video`] runs every stage;
//! the modules can also be used on their own.

// `!(x > 0.0)` style checks are deliberate: they reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod background;
pub mod candidates;
pub mod config;
pub mod detections;
pub mod error;
pub mod frame_store;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod sequential;
pub mod similarity;
pub mod synth;

pub use error::{Error, Result};
