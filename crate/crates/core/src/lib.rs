//! Temperature scaling and conformal prediction on stored classifier logits.
//!
//! The crate is organised bottom-up:
//!
//! - [`data`]: logits tables, file ingestion and seeded splits.
//! - [`softmax`]: the numeric kernel (tempered softmax, entropy, argmax).
//! - [`calibrate`]: ECE / NLL objectives, temperature search, reliability bins.
//! - [`conformal`]: LAC / APS / RAPS scores, thresholds, prediction sets, Mondrian CP.
//! - [`metrics`]: set-size and coverage metrics, median-of-means aggregation.
//! - [`theory`]: numerical checks of the score/threshold/gap/bound results.
//! - [`sweep`]: temperature sweeps, approximated curves and the two-branch guideline.
//! - [`synthetic`]: seeded generators of calibrated and overconfident logits.

pub mod calibrate;
pub mod conformal;
pub mod data;
mod error;
pub mod metrics;
pub mod optim;
pub mod rng;
pub mod softmax;
pub mod sweep;
pub mod synthetic;
pub mod theory;

pub use error::{Error, Result};
