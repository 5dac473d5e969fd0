//! Sample-difficulty decorrelation for age-confounded binary classification.
//!
//! After a short warm-up, per-sample difficulty `g = |p - y|` is regressed on
//! normalized age per label with a Huber fit; the residuals define frozen
//! trend-affinity weights. Training then adds a coverage-modulated penalty
//! on the squared weighted batch slope of difficulty against age. The crate
//! also ships a synthetic confounded population with exponential age-shift
//! splits, ERM and age-resampled baselines, and separation metrics
//! (`s+`, `s-`, `Sep`, `dSep10`) at a Youden-optimal operating point.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod difficulty;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod penalty;
pub mod rng;
pub mod stats;
pub mod synthgen;
pub mod trainer;
pub mod trendfit;

pub use error::{Error, Result};
