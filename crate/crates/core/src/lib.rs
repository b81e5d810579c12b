//! Bi-directional discrete process matching (Bi-DPM) on point clouds.
//!
//! A velocity field `u(x, t)` is trained so that short Euler rollouts
//! launched forward from source samples and backward from target samples
//! agree at a handful of grid times. Paired samples are matched by squared
//! distance; unpaired pools are matched in distribution by kernel MMD.
//! Rectified flow and conditional flow matching are provided as baselines.
//!
//! Module map:
//! - [`numcore`]: tensors and reverse-mode differentiation
//! - [`field`]: velocity fields
//! - [`flow`]: time grids, forward/backward rollouts, synthesis
//! - [`losses`]: process-matching, MMD and flow-matching objectives
//! - [`assignment`]: exact rectangular assignment for OT-CFM re-pairing
//! - [`data`]: Gaussian-ring toy datasets and minibatching
//! - [`train`]: Adam, EMA and the training loops
//! - [`eval`]: transport error, theorem diagnostics, centroid audits
//! - [`cli`]: configs, checkpoints, reports and the command implementations

pub mod assignment;
pub mod cli;
pub mod data;
pub mod eval;
pub mod field;
pub mod flow;
pub mod losses;
pub mod numcore;
pub mod train;

use thiserror::Error;

pub use numcore::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("dimension mismatch: expected {expected} columns, got shape {got:?}")]
    Dimension { expected: usize, got: Vec<usize> },
    #[error("time {0} outside [0, 1]")]
    TimeOutOfRange(f64),
    #[error("row count mismatch: {left} vs {right}")]
    RowMismatch { left: usize, right: usize },
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("invalid time grid: {0}")]
    Grid(String),
    #[error("pairing: {0}")]
    Pairing(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("non-finite gradient in parameter {param}")]
    NonFiniteGradient { param: usize },
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error("checkpoint format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
