//! Per-iteration error decomposition of the server update.
//!
//! The update's deviation from the ideal gradient splits into three parts
//! measured against the stale models the clients actually used:
//!
//!   u - grad F(w^t) = (u - u_bar)                 sampling noise (A)
//!                   + (u_bar - grad F(w_stale))   participation bias (B)
//!                   + (grad F(w_stale) - grad F(w^t))   delay error (C)
//!
//! `u_bar` is the update with every fresh stochastic contribution replaced
//! by the true gradient on its basis model: under the Gaussian-additive
//! oracle that substitution equals the expectation over fresh samples, which
//! is what makes the bias term exactly measurable. With minibatch noise the
//! replay still substitutes true gradients, so A absorbs the minibatch
//! variance and B keeps the same participation-structure meaning.
//!
//! Buffered updates are rescaled to gradient units (divided by eta_l * K)
//! before decomposition so every strategy is measured against the same
//! gradient. The probe supports K=1 only: for K>1 the expected update has
//! no closed form and the probe refuses rather than approximate.

use std::collections::HashMap;
use std::collections::VecDeque;

use crate::aggregators::ReplayInfo;
use crate::objectives::ObjectiveSpec;
use crate::rng::RngStream;
use crate::vecmath;
use crate::{Error, Result};

/// Ring buffer of recent model versions; versions are contiguous.
#[derive(Debug, Clone)]
pub struct ModelHistory {
    ring: VecDeque<(u64, Vec<f64>)>,
    capacity: usize,
}

impl ModelHistory {
    pub fn new(capacity: usize) -> Self {
        Self {
            ring: VecDeque::with_capacity(capacity.min(4096)),
            capacity: capacity.max(1),
        }
    }

    pub fn push(&mut self, version: u64, weights: Vec<f64>) {
        if self.ring.len() == self.capacity {
            self.ring.pop_front();
        }
        self.ring.push_back((version, weights));
    }

    pub fn get(&self, version: u64) -> Result<&[f64]> {
        let front = self.ring.front().map(|(v, _)| *v).unwrap_or(0);
        if version < front {
            return Err(Error::HistoryUnderrun {
                needed: version,
                capacity: self.capacity,
            });
        }
        let idx = (version - front) as usize;
        match self.ring.get(idx) {
            Some((v, w)) => {
                debug_assert_eq!(*v, version);
                Ok(w)
            }
            None => Err(Error::HistoryUnderrun {
                needed: version,
                capacity: self.capacity,
            }),
        }
    }
}

/// One iteration's measured decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorDecomposition {
    pub t: u64,
    /// ||u - u_bar||^2
    pub norm_a2: f64,
    /// ||u_bar - grad F(w_stale)||^2
    pub norm_b2: f64,
    /// ||grad F(w_stale) - grad F(w^t)||^2
    pub norm_c2: f64,
    /// ||u - grad F(w^t)||^2
    pub mse: f64,
    pub grad_norm_sq: f64,
    /// Per-client model drift ||w^{t - tau_i} - w^t||^2.
    pub drift: Vec<f64>,
    /// Per-client staleness tau_i at this iteration.
    pub staleness: Vec<u64>,
    /// ||(u - grad F(w^t)) - (A + B + C)||_inf, a float-identity residual.
    pub identity_gap: f64,
}

impl ErrorDecomposition {
    pub fn mean_drift(&self) -> f64 {
        if self.drift.is_empty() {
            return 0.0;
        }
        self.drift.iter().sum::<f64>() / self.drift.len() as f64
    }
}

/// Decompose the emitted update `u_applied` at pre-update iteration `t`.
///
/// `probe_basis[i]` is the basis iteration of client i's latest delivered
/// contribution (0 before its first delivery); `history` must still hold
/// every referenced version.
pub fn decompose_error(
    u_applied: &[f64],
    replay: &ReplayInfo,
    obj: &ObjectiveSpec,
    history: &ModelHistory,
    probe_basis: &[u64],
    w_current: &[f64],
    t: u64,
) -> Result<ErrorDecomposition> {
    let dim = obj.dim();
    let n = obj.n_clients();
    let u_g = vecmath::scale(u_applied, 1.0 / replay.grad_unit_scale);

    // True gradients per (client, basis), computed once.
    let mut grad_cache: HashMap<(usize, u64), Vec<f64>> = HashMap::new();
    let mut grad_at = |client: usize, basis: u64| -> Result<Vec<f64>> {
        if let Some(g) = grad_cache.get(&(client, basis)) {
            return Ok(g.clone());
        }
        let w = history.get(basis)?;
        let g = obj.true_gradient(client, w)?;
        grad_cache.insert((client, basis), g.clone());
        Ok(g)
    };

    // u_bar: replay the combination rule with true gradients.
    let mut u_bar = vec![0.0; dim];
    for &(client, basis, weight) in &replay.fresh {
        let g = grad_at(client, basis)?;
        vecmath::axpy(&mut u_bar, weight, &g);
    }
    if let Some(carry) = &replay.carry {
        vecmath::axpy(&mut u_bar, 1.0, carry);
    }

    // grad F(w_stale): average true gradient on every client's stale model.
    let mut g_stale = vec![0.0; dim];
    let inv_n = 1.0 / n as f64;
    for (client, &basis) in probe_basis.iter().enumerate() {
        let g = grad_at(client, basis)?;
        vecmath::axpy(&mut g_stale, inv_n, &g);
    }

    let (_, g_t) = obj.global_objective_and_gradient(w_current)?;

    let a = vecmath::sub(&u_g, &u_bar);
    let b = vecmath::sub(&u_bar, &g_stale);
    let c = vecmath::sub(&g_stale, &g_t);
    let total = vecmath::sub(&u_g, &g_t);
    let mut recomposed = a.clone();
    vecmath::axpy(&mut recomposed, 1.0, &b);
    vecmath::axpy(&mut recomposed, 1.0, &c);
    let identity_gap = vecmath::linf_dist(&total, &recomposed);

    let drift: Vec<f64> = probe_basis
        .iter()
        .map(|&basis| {
            history
                .get(basis)
                .map(|w| vecmath::dist_sq(w, w_current))
        })
        .collect::<Result<_>>()?;
    let staleness: Vec<u64> = probe_basis.iter().map(|&b| t.saturating_sub(b)).collect();

    Ok(ErrorDecomposition {
        t,
        norm_a2: vecmath::norm_sq(&a),
        norm_b2: vecmath::norm_sq(&b),
        norm_c2: vecmath::norm_sq(&c),
        mse: vecmath::norm_sq(&total),
        grad_norm_sq: vecmath::norm_sq(&g_t),
        drift,
        staleness,
        identity_gap,
    })
}

/// Which clients contribute to a frozen update, at what weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FrozenCombination {
    /// Mean over all n clients (ACE kinds).
    AllClients,
    /// Mean over an explicit participant set (buffered kinds, ACED).
    Subset,
    /// A single reporting client.
    Single,
}

/// Monte Carlo estimate of E||u - u_bar||^2 at frozen stale models.
///
/// Each sample redraws fresh stochastic gradients for every participant and
/// compares the combined update against the true-gradient combination.
/// `stale_models[i]` is the model client i computes on; `participants`
/// lists the contributing clients (ignored for `AllClients`).
pub fn estimate_term_a_variance(
    combination: FrozenCombination,
    obj: &ObjectiveSpec,
    stale_models: &[Vec<f64>],
    participants: &[usize],
    samples: usize,
    rng: &mut RngStream,
) -> Result<f64> {
    if stale_models.len() != obj.n_clients() {
        return Err(Error::Config(format!(
            "need one stale model per client (got {})",
            stale_models.len()
        )));
    }
    let members: Vec<usize> = match combination {
        FrozenCombination::AllClients => (0..obj.n_clients()).collect(),
        FrozenCombination::Subset => participants.to_vec(),
        FrozenCombination::Single => {
            if participants.len() != 1 {
                return Err(Error::Config(
                    "single-client combination needs exactly one participant".to_string(),
                ));
            }
            participants.to_vec()
        }
    };
    if members.is_empty() {
        return Err(Error::Config("no participants".to_string()));
    }
    let weight = 1.0 / members.len() as f64;
    let dim = obj.dim();
    let mut u_bar = vec![0.0; dim];
    for &client in &members {
        let g = obj.true_gradient(client, &stale_models[client])?;
        vecmath::axpy(&mut u_bar, weight, &g);
    }
    let mut total = 0.0;
    for _ in 0..samples {
        let mut u = vec![0.0; dim];
        for &client in &members {
            let g = obj.stochastic_gradient(client, &stale_models[client], rng)?;
            vecmath::axpy(&mut u, weight, &g);
        }
        total += vecmath::dist_sq(&u, &u_bar);
    }
    Ok(total / samples as f64)
}

/// Outcome of scanning a decomposition series.
#[derive(Debug, Clone)]
pub struct MseChainReport {
    /// (iteration, message) for every violated per-iteration inequality.
    pub violations: Vec<(u64, String)>,
    pub avg_mse: f64,
    pub avg_grad_norm_sq: f64,
    pub mean_a2: f64,
    pub mean_b2: f64,
    pub mean_c2: f64,
    pub iterations: usize,
}

impl MseChainReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Verify the per-iteration bound mse <= 3(A2 + B2 + C2) + 1e-9 and the
/// vector identity u - grad F = A + B + C, and report the running averages
/// the convergence bound relates.
pub fn check_mse_chain(series: &[ErrorDecomposition]) -> MseChainReport {
    let mut violations = Vec::new();
    let mut sums = [0.0f64; 5];
    for d in series {
        let bound = 3.0 * (d.norm_a2 + d.norm_b2 + d.norm_c2) + 1e-9;
        if d.mse > bound {
            violations.push((
                d.t,
                format!("mse {} exceeds 3(A+B+C) bound {}", d.mse, bound),
            ));
        }
        let scale = 1.0 + d.mse.sqrt() + d.grad_norm_sq.sqrt();
        if d.identity_gap > 1e-12 * scale {
            violations.push((
                d.t,
                format!("decomposition identity residual {}", d.identity_gap),
            ));
        }
        sums[0] += d.mse;
        sums[1] += d.grad_norm_sq;
        sums[2] += d.norm_a2;
        sums[3] += d.norm_b2;
        sums[4] += d.norm_c2;
    }
    let count = series.len().max(1) as f64;
    MseChainReport {
        violations,
        avg_mse: sums[0] / count,
        avg_grad_norm_sq: sums[1] / count,
        mean_a2: sums[2] / count,
        mean_b2: sums[3] / count,
        mean_c2: sums[4] / count,
        iterations: series.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregators::ReplayInfo;
    use crate::objectives::{make_quadratic_suite, NoiseSpec, QuadraticParams};
    use crate::rng::RngFactory;

    fn history_with(models: &[(u64, Vec<f64>)]) -> ModelHistory {
        let mut h = ModelHistory::new(64);
        for (v, w) in models {
            h.push(*v, w.clone());
        }
        h
    }

    #[test]
    fn history_underrun_is_an_error() {
        let mut h = ModelHistory::new(2);
        h.push(0, vec![0.0]);
        h.push(1, vec![1.0]);
        h.push(2, vec![2.0]);
        assert!(h.get(0).is_err());
        assert_eq!(h.get(2).unwrap(), &[2.0]);
    }

    #[test]
    fn noiseless_fresh_ace_decomposition_is_zero() {
        let mut p = QuadraticParams::new(3, 2);
        p.noise = NoiseSpec::noiseless();
        let obj =
            make_quadratic_suite(&p, &mut RngFactory::new(1).stream("suite")).unwrap();
        let w = vec![0.3, -0.4];
        let history = history_with(&[(5, w.clone())]);
        // Every client fresh at basis 5; u is the exact mean of true
        // gradients there.
        let grads: Vec<Vec<f64>> = (0..3)
            .map(|i| obj.true_gradient(i, &w).unwrap())
            .collect();
        let refs: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
        let u = crate::vecmath::mean(&refs);
        let replay = ReplayInfo {
            fresh: (0..3).map(|i| (i, 5, 1.0 / 3.0)).collect(),
            carry: None,
            grad_unit_scale: 1.0,
        };
        let d =
            decompose_error(&u, &replay, &obj, &history, &[5, 5, 5], &w, 5).unwrap();
        assert!(d.norm_a2 <= 1e-24);
        assert!(d.norm_b2 <= 1e-24);
        assert!(d.norm_c2 <= 1e-24);
        assert!(d.mse <= 1e-24);
        assert!(d.drift.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn hand_computed_single_client_bias_and_delay() {
        // Two identity-like quadratics via hetero=0/condition=1 would make
        // clients identical, so build distinct clients and hand-evaluate.
        let mut p = QuadraticParams::new(2, 2);
        p.hetero = 1.0;
        p.condition = 1.0; // A_i = l_max * I, centers differ
        p.l_max = 1.0;
        let obj = quad_suite(&p, 2);
        let w_old = vec![1.0, 1.0];
        let w_new = vec![0.5, 0.0];
        let history = history_with(&[(3, w_old.clone()), (4, w_new.clone())]);
        // Vanilla-style update from client 0 based on version 3; client 1's
        // latest basis is version 4.
        let g0_old = obj.true_gradient(0, &w_old).unwrap();
        let replay = ReplayInfo {
            fresh: vec![(0, 3, 1.0)],
            carry: None,
            grad_unit_scale: 1.0,
        };
        let d = decompose_error(
            &g0_old, &replay, &obj, &history, &[3, 4], &w_new, 4,
        )
        .unwrap();
        // A = 0 (true gradient used as the update), B and C by hand.
        let g1_new = obj.true_gradient(1, &w_new).unwrap();
        let stale_avg = [
            0.5 * (g0_old[0] + g1_new[0]),
            0.5 * (g0_old[1] + g1_new[1]),
        ];
        let b_hand = crate::vecmath::dist_sq(&g0_old, &stale_avg);
        let (_, g_t) = obj.global_objective_and_gradient(&w_new).unwrap();
        let c_hand = crate::vecmath::dist_sq(&stale_avg, &g_t);
        assert!(d.norm_a2 <= 1e-28);
        assert!((d.norm_b2 - b_hand).abs() <= 1e-12 * (1.0 + b_hand));
        assert!((d.norm_c2 - c_hand).abs() <= 1e-12 * (1.0 + c_hand));
        assert_eq!(d.staleness, vec![1, 0]);
        let drift0 = crate::vecmath::dist_sq(&w_old, &w_new);
        assert!((d.drift[0] - drift0).abs() <= 1e-15);
        assert_eq!(d.drift[1], 0.0);
    }

    fn quad_suite(p: &QuadraticParams, seed: u64) -> crate::objectives::ObjectiveSpec {
        make_quadratic_suite(p, &mut RngFactory::new(seed).stream("suite")).unwrap()
    }

    #[test]
    fn term_a_estimates_match_theory() {
        let mut p = QuadraticParams::new(10, 6);
        p.noise = NoiseSpec::gaussian(1.0);
        let obj = quad_suite(&p, 3);
        let stale: Vec<Vec<f64>> = (0..10).map(|i| vec![0.1 * i as f64; 6]).collect();
        let mut rng = RngFactory::new(4).stream("mc");
        let ace = estimate_term_a_variance(
            FrozenCombination::AllClients,
            &obj,
            &stale,
            &[],
            4000,
            &mut rng,
        )
        .unwrap();
        assert!(
            (ace - 0.1).abs() / 0.1 < 0.1,
            "ACE variance {ace} vs sigma2/n = 0.1"
        );
        let single = estimate_term_a_variance(
            FrozenCombination::Single,
            &obj,
            &stale,
            &[3],
            4000,
            &mut rng,
        )
        .unwrap();
        assert!(
            (single - 1.0).abs() < 0.1,
            "single-client variance {single} vs sigma2 = 1"
        );
    }

    #[test]
    fn term_a_zero_when_noiseless() {
        let p = QuadraticParams::new(4, 3);
        let obj = quad_suite(&p, 5);
        let stale: Vec<Vec<f64>> = (0..4).map(|_| vec![0.2; 3]).collect();
        let mut rng = RngFactory::new(6).stream("mc");
        let v = estimate_term_a_variance(
            FrozenCombination::AllClients,
            &obj,
            &stale,
            &[],
            100,
            &mut rng,
        )
        .unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn mse_chain_accepts_zero_series() {
        let series = vec![ErrorDecomposition {
            t: 0,
            norm_a2: 0.0,
            norm_b2: 0.0,
            norm_c2: 0.0,
            mse: 0.0,
            grad_norm_sq: 0.0,
            drift: vec![0.0],
            staleness: vec![0],
            identity_gap: 0.0,
        }];
        let report = check_mse_chain(&series);
        assert!(report.is_clean());
        assert_eq!(report.iterations, 1);
    }

    #[test]
    fn mse_chain_flags_violations() {
        let series = vec![ErrorDecomposition {
            t: 7,
            norm_a2: 0.0,
            norm_b2: 0.0,
            norm_c2: 0.0,
            mse: 1.0,
            grad_norm_sq: 0.0,
            drift: vec![],
            staleness: vec![],
            identity_gap: 0.0,
        }];
        let report = check_mse_chain(&series);
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].0, 7);
    }
}
