//! Run summarization and convergence-scaling analysis.

use crate::delaysim::{IterRecord, RunTrace};
use crate::objectives::ObjectiveSpec;
use crate::probe::check_mse_chain;
use crate::{Error, Result};

/// Headline numbers of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    /// (1/T) sum_t ||grad F(w^t)||^2 over the recorded iterations, using the
    /// exact objective gradient, never stochastic estimates.
    pub avg_grad_norm_sq: f64,
    pub final_objective: f64,
    /// F(final) - F*.
    pub final_gap: f64,
    pub total_comms: u64,
    pub mean_staleness: f64,
    pub max_staleness: u64,
    pub mean_n_t: f64,
    pub records: usize,
    /// Starved runs carry fewer than the configured iterations.
    pub partial: bool,
    pub mean_a2: Option<f64>,
    pub mean_b2: Option<f64>,
    pub mean_c2: Option<f64>,
}

/// Summarize a trace against its objective.
pub fn summarize(trace: &RunTrace, obj: &ObjectiveSpec) -> Result<RunSummary> {
    let (final_objective, _) = obj.global_objective_and_gradient(&trace.final_model.weights)?;
    let final_gap = final_objective - obj.analytics.f_star;
    let mut summary = summarize_records(&trace.records);
    summary.final_objective = final_objective;
    summary.final_gap = final_gap;
    summary.total_comms = trace.comms_total;
    summary.partial = trace.starved;
    if !trace.decompositions.is_empty() {
        let report = check_mse_chain(&trace.decompositions);
        summary.mean_a2 = Some(report.mean_a2);
        summary.mean_b2 = Some(report.mean_b2);
        summary.mean_c2 = Some(report.mean_c2);
    }
    Ok(summary)
}

/// The record-derived portion of a summary; replayable from an exported
/// trace CSV.
pub fn summarize_records(records: &[IterRecord]) -> RunSummary {
    let n = records.len();
    let count = n.max(1) as f64;
    RunSummary {
        avg_grad_norm_sq: records.iter().map(|r| r.grad_norm_sq).sum::<f64>() / count,
        final_objective: f64::NAN,
        final_gap: f64::NAN,
        total_comms: records.last().map(|r| r.comms_total).unwrap_or(0),
        mean_staleness: records.iter().map(|r| r.max_staleness as f64).sum::<f64>() / count,
        max_staleness: records.iter().map(|r| r.max_staleness).max().unwrap_or(0),
        mean_n_t: records.iter().map(|r| r.n_t as f64).sum::<f64>() / count,
        records: n,
        partial: false,
        mean_a2: None,
        mean_b2: None,
        mean_c2: None,
    }
}

/// Log-log fit of avg_grad_norm_sq against T.
#[derive(Debug, Clone)]
pub struct ScalingReport {
    pub points: Vec<(u64, f64)>,
    pub slope: f64,
    pub intercept: f64,
}

/// Least-squares slope of ln(avg_grad_norm_sq) vs ln(T); callers average
/// seeds into each point first. Needs at least 3 points.
pub fn scaling_check(points: &[(u64, f64)]) -> Result<ScalingReport> {
    if points.len() < 3 {
        return Err(Error::Config(format!(
            "scaling fit needs at least 3 points (got {})",
            points.len()
        )));
    }
    let mut sorted: Vec<(u64, f64)> = points.to_vec();
    sorted.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let logs: Vec<(f64, f64)> = sorted
        .iter()
        .map(|&(t, v)| {
            if t == 0 || !(v > 0.0) {
                Err(Error::Config(format!(
                    "scaling fit needs positive T and values (got T={t}, v={v})"
                )))
            } else {
                Ok(((t as f64).ln(), v.ln()))
            }
        })
        .collect::<Result<_>>()?;
    let n = logs.len() as f64;
    let mean_x = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mean_x) * (p.0 - mean_x)).sum();
    let sxy: f64 = logs.iter().map(|p| (p.0 - mean_x) * (p.1 - mean_y)).sum();
    if sxx <= 0.0 {
        return Err(Error::Config(
            "scaling fit needs at least two distinct T values".to_string(),
        ));
    }
    let slope = sxy / sxx;
    Ok(ScalingReport {
        points: sorted,
        slope,
        intercept: mean_y - slope * mean_x,
    })
}

/// Render a summary as key = value text.
pub fn summary_text(s: &RunSummary) -> String {
    let mut out = String::new();
    out.push_str(&format!("avg_grad_norm_sq = {:e}\n", s.avg_grad_norm_sq));
    out.push_str(&format!("final_objective = {:e}\n", s.final_objective));
    out.push_str(&format!("final_gap = {:e}\n", s.final_gap));
    out.push_str(&format!("total_comms = {}\n", s.total_comms));
    out.push_str(&format!("mean_staleness = {:e}\n", s.mean_staleness));
    out.push_str(&format!("max_staleness = {}\n", s.max_staleness));
    out.push_str(&format!("mean_n_t = {:e}\n", s.mean_n_t));
    out.push_str(&format!("records = {}\n", s.records));
    out.push_str(&format!("partial = {}\n", s.partial));
    if let (Some(a), Some(b), Some(c)) = (s.mean_a2, s.mean_b2, s.mean_c2) {
        out.push_str(&format!("mean_a2 = {a:e}\n"));
        out.push_str(&format!("mean_b2 = {b:e}\n"));
        out.push_str(&format!("mean_c2 = {c:e}\n"));
    }
    out
}
