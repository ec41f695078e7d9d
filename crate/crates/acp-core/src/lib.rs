//! Action co-occurrence priors for long-tailed human-object-interaction
//! label spaces.
//!
//! The crate covers the full desk-scale pipeline: building conditional
//! co-occurrence matrices from annotations, selecting mutually exclusive
//! anchor actions, composing hierarchical action predictions on top of a
//! small multi-stream network, projecting predictions into the
//! prior-consistent space for distillation and post-processing, detection
//! mAP evaluation, and a synthetic long-tail benchmark with an experiment
//! harness.

pub mod anchors;
pub mod error;
pub mod io;
pub mod eval;
pub mod losses;
pub mod model;
pub mod nn;
pub mod priors;
pub mod space;
pub mod synth;
pub mod train;

pub use error::{AcpError, Result};
