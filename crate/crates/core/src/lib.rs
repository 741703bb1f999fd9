//! Positive-congruent model updates at desk scale.
//!
//! Trains small dense classifiers on synthetic Gaussian-cluster data, measures
//! how often an updated model breaks samples its predecessor got right
//! (negative flips), and compares training objectives and ensembling
//! strategies that reduce those regressions.
//!
//! - [`nn`]: deterministic MLP training with exact gradients and momentum SGD.
//! - [`loss`]: the re-weighting baseline, focal distillation and the combined objective.
//! - [`metrics`]: flip quadrants, NFR, relative NFR and uncertainty histograms.
//! - [`ensemble`]: logit-averaged ensembles and the ensemble-size sweep.
//! - [`data`] and [`scenario`]: synthetic data, views and update scenarios.
//! - [`experiment`]: config-driven runs, method comparisons, sweeps and reports.

pub mod data;
pub mod ensemble;
mod error;
pub mod experiment;
pub mod matrix;
pub mod metrics;
pub mod nn;
pub mod loss;
pub mod scenario;
pub mod seed;

pub use error::{Error, Result};
pub use matrix::Matrix;
