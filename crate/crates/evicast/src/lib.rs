//! Evidential time-series forecasting toolkit.
//!
//! The crate trains small sequence models under a zoo of probabilistic loss
//! functions -- most importantly a Normal-Inverse-Gamma evidential head that
//! yields point forecasts, an epistemic/aleatoric uncertainty split and
//! Student-t prediction intervals from a single forward pass -- and evaluates
//! them with calibration and trading metrics on top of a directional
//! backtest.
//!
//! Everything trainable is built on [`autodiff`], a minimal dense-tensor
//! reverse-mode kernel with a finite-difference verification harness, so the
//! gradient of every loss in the zoo is checkable against central
//! differences.
//!
//! See the guide chapters under [`guide`] for a narrative tour; the same
//! snippets run as doc-tests.

pub mod autodiff;
pub mod backtest;
pub mod conformal;
pub mod data;
pub mod evidential;
pub mod experiment;
pub mod guide;
pub mod loss;
pub mod lstm;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod patchformer;
pub mod special;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor/graph shape violations and other interface contract breaches.
    #[error("contract violation: {0}")]
    Contract(String),
    /// A graph primitive produced NaN or Inf.
    #[error("numeric overflow at node {node} ({op}): non-finite value")]
    NumericOverflow { node: usize, op: &'static str },
    /// Parameters outside their mathematical domain (e.g. alpha <= 1).
    #[error("degenerate parameters: {0}")]
    Degenerate(String),
    /// Bad run configuration (paths, splits, method lists).
    #[error("configuration error: {0}")]
    Config(String),
    /// Input-data validation failure, tagged with the offending CSV line.
    #[error("input row {line}: {message}")]
    Row { line: usize, message: String },
    /// Training aborted (non-finite loss or similar), with location context.
    #[error("training aborted at epoch {epoch}, batch {batch}: {message}")]
    Training {
        epoch: usize,
        batch: usize,
        message: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub use autodiff::{finite_diff_check, GradReport, Graph, GraphBuilder, NodeId, Tensor};
pub use evidential::{Interval, NigParams, Uncertainty};
pub use loss::{CombinedLossWeights, LossMethod};
pub use model::HeadSpec;
