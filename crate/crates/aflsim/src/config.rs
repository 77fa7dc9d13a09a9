//! Run configuration and shared domain types.

use crate::vecmath;
use crate::{Error, Result};

/// The global model: a dense weight vector plus the server iteration index.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub weights: Vec<f64>,
    pub iter: u64,
}

impl ModelState {
    pub fn zeros(dim: usize) -> Self {
        Self {
            weights: vec![0.0; dim],
            iter: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn is_finite(&self) -> bool {
        vecmath::all_finite(&self.weights)
    }
}

/// A dense update direction with the same dimension as the model.
pub type UpdateVector = Vec<f64>;

/// Global step-size rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepSizeRule {
    /// eta = c
    Constant { c: f64 },
    /// eta = c * sqrt(n / T)
    SqrtNOverT { c: f64 },
}

impl StepSizeRule {
    pub fn kind_name(&self) -> &'static str {
        match self {
            StepSizeRule::Constant { .. } => "constant",
            StepSizeRule::SqrtNOverT { .. } => "sqrt_n_over_T",
        }
    }

    pub fn coefficient(&self) -> f64 {
        match self {
            StepSizeRule::Constant { c } | StepSizeRule::SqrtNOverT { c } => *c,
        }
    }
}

/// Resolve the global step size for a run of `n` clients and `t_total`
/// server iterations.
pub fn resolve_step_size(rule: StepSizeRule, n: usize, t_total: u64) -> Result<f64> {
    if n < 1 || t_total < 1 {
        return Err(Error::Config(format!(
            "resolve_step_size requires n >= 1 and T >= 1 (got n={n}, T={t_total})"
        )));
    }
    let eta = match rule {
        StepSizeRule::Constant { c } => c,
        StepSizeRule::SqrtNOverT { c } => c * (n as f64 / t_total as f64).sqrt(),
    };
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(Error::Config(format!(
            "step size rule resolved to a non-positive value ({eta})"
        )));
    }
    Ok(eta)
}

/// When a client permanently leaves the run.
///
/// Triggers are in recorded server iterations: the drop takes effect before
/// the iteration with that index is processed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DropoutEntry {
    pub client: usize,
    pub at_iter: u64,
}

/// Full configuration of one simulated run.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub n_clients: usize,
    pub total_iters: u64,
    pub eta_rule: StepSizeRule,
    pub seed: u64,
    pub dim: usize,
    /// Administrative staleness cap (also sizes the probe's model history).
    pub tau_max_admin: u64,
    /// When true, cache entries older than the cap are excluded from updates
    /// and their owners are preemptively rescheduled.
    pub enforce_tau_cap: bool,
    pub dropout_schedule: Vec<DropoutEntry>,
}

impl RunConfig {
    pub fn new(n_clients: usize, total_iters: u64, dim: usize, seed: u64) -> Self {
        Self {
            n_clients,
            total_iters,
            eta_rule: StepSizeRule::SqrtNOverT { c: 0.2 },
            seed,
            dim,
            // Default cap never truncates the history a probe might need.
            tau_max_admin: total_iters.max(1),
            enforce_tau_cap: false,
            dropout_schedule: Vec::new(),
        }
    }
}

/// Collect every violated invariant; an empty list means the config is
/// runnable. Validation never aborts.
pub fn validate_config(cfg: &RunConfig) -> Vec<String> {
    let mut violations = Vec::new();
    if cfg.n_clients < 1 {
        violations.push("n_clients must be >= 1".to_string());
    }
    if cfg.total_iters < 1 {
        violations.push("total_iters must be >= 1".to_string());
    }
    if cfg.tau_max_admin < 1 {
        violations.push("tau_max_admin must be >= 1".to_string());
    }
    if cfg.dim < 1 {
        violations.push("dim must be >= 1".to_string());
    }
    if cfg.eta_rule.coefficient() <= 0.0 {
        violations.push("step size coefficient must be > 0".to_string());
    }
    let mut last = 0u64;
    for entry in &cfg.dropout_schedule {
        if cfg.n_clients >= 1 && entry.client >= cfg.n_clients {
            violations.push(format!(
                "dropout references unknown client id {}",
                entry.client
            ));
        }
        if entry.at_iter < last {
            violations.push("dropout schedule times must be non-decreasing".to_string());
        }
        last = entry.at_iter;
    }
    violations
}
