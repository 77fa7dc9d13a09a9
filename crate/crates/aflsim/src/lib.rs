//! Deterministic discrete-event simulator and aggregation-rule library for
//! asynchronous federated learning (AFL).
//!
//! The server applies client contributions as they arrive, so clients compute
//! on stale model versions. This crate simulates that regime on synthetic
//! objectives with exactly computable gradients and measures where the server
//! update deviates from the ideal gradient: sampling noise, participation
//! bias, and delay error.
//!
//! Modules:
//! - [`config`]: run configuration, step-size rules, shared domain types
//! - [`rng`]: labelled deterministic random streams
//! - [`partition`]: synthetic classification data and Dirichlet label splits
//! - [`objectives`]: quadratic / logistic federated objectives with exact
//!   gradients and analytic constants
//! - [`delaysim`]: the event loop mapping wall-clock completions onto
//!   server-iteration staleness
//! - [`aggregators`]: the server update rules (ace_direct, ace_incremental,
//!   aced, fedbuff, ca2fl, vanilla_asgd, delay_adaptive_asgd)
//! - [`quant`]: unbiased 8-bit quantization of cached gradients
//! - [`probe`]: per-iteration error decomposition and Monte Carlo noise
//!   estimation
//! - [`metrics`]: run summaries, convergence-scaling fits
//! - [`cli`]: experiment planning and execution behind the `aflsim` binary

pub mod aggregators;
pub mod cli;
pub mod config;
pub mod delaysim;
pub mod metrics;
pub mod objectives;
pub mod output;
pub mod partition;
pub mod probe;
pub mod quant;
pub mod rng;
pub mod vecmath;

use thiserror::Error;

/// Library-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("degenerate partition: client {0} received no examples")]
    DegeneratePartition(usize),
    #[error("history underrun: iteration {needed} evicted from the model ring (capacity {capacity})")]
    HistoryUnderrun { needed: u64, capacity: usize },
    #[error("probe supports K=1 only (got K={0})")]
    ProbeLocalSteps(u32),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("unknown client id {0}")]
    UnknownClient(usize),
    #[error("non-finite value produced at iteration {0}")]
    NonFinite(u64),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
