//! Synthetic federated objectives with exact per-client gradients, a
//! controlled stochastic-gradient oracle, and analytically known constants.
//!
//! Two families:
//! - quadratic: F_i(w) = 1/2 (w - c_i)' A_i (w - c_i) with symmetric
//!   positive-definite A_i, closed-form minimizer and constants;
//! - logistic: softmax cross-entropy over a client's shard of a synthetic
//!   classification dataset plus a ridge term, with the global minimum found
//!   numerically to a stated tolerance.

use nalgebra::DMatrix;

use crate::partition::{Dataset, Partition};
use crate::rng::RngStream;
use crate::vecmath;
use crate::{Error, Result};

/// Features are rescaled at suite construction so the logistic smoothness
/// constant is `0.5 * MAX_FEATURE_NORM_SQ + ridge`.
const MAX_FEATURE_NORM_SQ: f64 = 2.0;

/// How stochastic gradients deviate from true gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseModel {
    /// g = grad + sqrt(sigma2/d) * z with z standard normal, so
    /// E||g - grad||^2 = sigma2 exactly.
    GaussianAdditive,
    /// Uniform minibatch of the client shard, drawn with replacement
    /// (logistic only).
    Minibatch { batch: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub sigma2: f64,
    pub model: NoiseModel,
}

impl NoiseSpec {
    pub fn noiseless() -> Self {
        Self {
            sigma2: 0.0,
            model: NoiseModel::GaussianAdditive,
        }
    }

    pub fn gaussian(sigma2: f64) -> Self {
        Self {
            sigma2,
            model: NoiseModel::GaussianAdditive,
        }
    }
}

/// Analytic constants of a suite.
#[derive(Debug, Clone)]
pub struct ObjectiveAnalytics {
    /// Smoothness constant valid for every client objective.
    pub l_smooth: f64,
    /// Global minimum value.
    pub f_star: f64,
    /// Minimizer (closed form for quadratics; None for logistic).
    pub w_star: Option<Vec<f64>>,
    /// Uniform gradient-norm bound when one exists.
    pub g_bound: Option<f64>,
}

#[derive(Debug, Clone)]
struct QuadraticClient {
    /// Row-major d x d symmetric positive-definite matrix.
    a: Vec<f64>,
    center: Vec<f64>,
    /// a * center, precomputed.
    a_center: Vec<f64>,
}

#[derive(Debug, Clone)]
struct QuadraticSuite {
    clients: Vec<QuadraticClient>,
    /// Mean of A_i.
    a_bar: Vec<f64>,
    /// Mean of A_i c_i.
    b_bar: Vec<f64>,
    hetero: f64,
    condition: f64,
}

#[derive(Debug, Clone)]
struct LogisticSuite {
    /// Rescaled features, row-major size x d_feat.
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
    classes: usize,
    d_feat: usize,
    shards: Vec<Vec<usize>>,
    ridge: f64,
    alpha: f64,
}

#[derive(Debug, Clone)]
enum SuiteKind {
    Quadratic(QuadraticSuite),
    Logistic(LogisticSuite),
}

/// A federated objective: n client objectives, a noise model, and analytics.
#[derive(Debug, Clone)]
pub struct ObjectiveSpec {
    kind: SuiteKind,
    n_clients: usize,
    dim: usize,
    pub noise: NoiseSpec,
    pub analytics: ObjectiveAnalytics,
}

/// Construction parameters for the quadratic family.
#[derive(Debug, Clone, Copy)]
pub struct QuadraticParams {
    pub n_clients: usize,
    pub dim: usize,
    /// Center radius; 0 gives identical clients (zeta^2 = 0 everywhere).
    pub hetero: f64,
    /// Eigenvalue spread: eigenvalues lie in [l_max/condition, l_max].
    pub condition: f64,
    pub l_max: f64,
    pub noise: NoiseSpec,
}

impl QuadraticParams {
    pub fn new(n_clients: usize, dim: usize) -> Self {
        Self {
            n_clients,
            dim,
            hetero: 1.0,
            condition: 10.0,
            l_max: 0.5,
            noise: NoiseSpec::noiseless(),
        }
    }
}

fn matvec(a: &[f64], d: usize, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for (row, o) in out.iter_mut().enumerate() {
        let r = &a[row * d..(row + 1) * d];
        *o = vecmath::dot(r, x);
    }
    out
}

/// Random orthogonal matrix from the QR factorization of a Gaussian matrix.
fn random_orthogonal(d: usize, rng: &mut RngStream) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| rng.gen_standard_normal());
    g.qr().q()
}

fn spd_from_eigs(eigs: &[f64], rng: &mut RngStream) -> Vec<f64> {
    let d = eigs.len();
    let q = random_orthogonal(d, rng);
    let lambda = DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(eigs));
    let a = &q * lambda * q.transpose();
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            // Symmetrize to kill rounding asymmetry from the product.
            out[i * d + j] = 0.5 * (a[(i, j)] + a[(j, i)]);
        }
    }
    out
}

/// Eigenvalues log-spaced draws in [l_max/condition, l_max] with both
/// endpoints pinned, so every client has smoothness exactly l_max.
fn draw_eigs(d: usize, l_max: f64, condition: f64, rng: &mut RngStream) -> Vec<f64> {
    let mu = l_max / condition;
    if d == 1 {
        return vec![l_max];
    }
    let mut eigs = vec![0.0; d];
    eigs[0] = l_max;
    eigs[d - 1] = mu;
    let (ln_lo, ln_hi) = (mu.ln(), l_max.ln());
    for e in eigs.iter_mut().take(d - 1).skip(1) {
        *e = (ln_lo + rng.gen_uniform() * (ln_hi - ln_lo)).exp();
    }
    eigs
}

/// Build the quadratic suite.
///
/// Centers are drawn uniformly on the sphere of radius `hetero`. With
/// `hetero == 0` all clients share one matrix and the origin as center, so
/// they are identical and zeta^2 vanishes everywhere.
pub fn make_quadratic_suite(p: &QuadraticParams, rng: &mut RngStream) -> Result<ObjectiveSpec> {
    if p.n_clients < 1 || p.dim < 1 {
        return Err(Error::Config("need n >= 1 and dim >= 1".to_string()));
    }
    if p.condition < 1.0 || !(p.l_max > 0.0) {
        return Err(Error::Config(
            "quadratic suite needs condition >= 1 and l_max > 0".to_string(),
        ));
    }
    if matches!(p.noise.model, NoiseModel::Minibatch { .. }) {
        return Err(Error::Config(
            "minibatch noise applies to the logistic family only".to_string(),
        ));
    }
    let d = p.dim;
    let identical = p.hetero == 0.0;
    let shared = if identical {
        let eigs = draw_eigs(d, p.l_max, p.condition, rng);
        Some(spd_from_eigs(&eigs, rng))
    } else {
        None
    };
    let mut clients = Vec::with_capacity(p.n_clients);
    for _ in 0..p.n_clients {
        let a = match &shared {
            Some(a) => a.clone(),
            None => {
                let eigs = draw_eigs(d, p.l_max, p.condition, rng);
                spd_from_eigs(&eigs, rng)
            }
        };
        let center = if identical {
            vec![0.0; d]
        } else {
            vecmath::scale(&rng.gen_unit_vector(d), p.hetero)
        };
        let a_center = matvec(&a, d, &center);
        clients.push(QuadraticClient { a, center, a_center });
    }

    let inv_n = 1.0 / p.n_clients as f64;
    let mut a_bar = vec![0.0; d * d];
    let mut b_bar = vec![0.0; d];
    for c in &clients {
        vecmath::axpy(&mut a_bar, inv_n, &c.a);
        vecmath::axpy(&mut b_bar, inv_n, &c.a_center);
    }

    // Closed-form global minimizer: solve a_bar w = b_bar (SPD).
    let a_bar_m = DMatrix::from_row_slice(d, d, &a_bar);
    let b_bar_v = nalgebra::DVector::from_row_slice(&b_bar);
    let w_star = a_bar_m
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Config("mean quadratic matrix not SPD".to_string()))?
        .solve(&b_bar_v)
        .iter()
        .copied()
        .collect::<Vec<f64>>();

    let suite = QuadraticSuite {
        clients,
        a_bar,
        b_bar,
        hetero: p.hetero,
        condition: p.condition,
    };
    let f_star = quadratic_global_value(&suite, &w_star);
    let spec = ObjectiveSpec {
        kind: SuiteKind::Quadratic(suite),
        n_clients: p.n_clients,
        dim: d,
        noise: p.noise,
        analytics: ObjectiveAnalytics {
            l_smooth: p.l_max,
            f_star,
            w_star: Some(w_star),
            g_bound: None,
        },
    };
    Ok(spec)
}

fn quadratic_global_value(s: &QuadraticSuite, w: &[f64]) -> f64 {
    let d = w.len();
    let inv_n = 1.0 / s.clients.len() as f64;
    s.clients
        .iter()
        .map(|c| {
            let diff = vecmath::sub(w, &c.center);
            0.5 * vecmath::dot(&diff, &matvec(&c.a, d, &diff))
        })
        .sum::<f64>()
        * inv_n
}

/// Build the logistic suite over a dataset and partition.
///
/// F_i is the mean softmax cross-entropy over client i's shard plus
/// ridge/2 ||w||^2. Features are rescaled so the smoothness bound is
/// 0.5 * MAX_FEATURE_NORM_SQ + ridge; the global minimum is found by
/// accelerated full-batch descent to gradient norm <= 1e-11.
pub fn make_logistic_suite(
    dataset: &Dataset,
    partition: &Partition,
    ridge: f64,
    noise: NoiseSpec,
) -> Result<ObjectiveSpec> {
    if !(ridge > 0.0) {
        return Err(Error::Config("ridge must be positive".to_string()));
    }
    let covered: usize = partition.assignment.iter().map(|s| s.len()).sum();
    if covered != dataset.len() {
        return Err(Error::Config(format!(
            "partition covers {covered} of {} examples",
            dataset.len()
        )));
    }
    if let Some(empty) = partition.assignment.iter().position(|s| s.is_empty()) {
        return Err(Error::DegeneratePartition(empty));
    }
    if let NoiseModel::Minibatch { batch } = noise.model {
        if batch < 1 {
            return Err(Error::Config("minibatch size must be >= 1".to_string()));
        }
    }

    let max_norm_sq = dataset
        .features
        .iter()
        .map(|x| vecmath::norm_sq(x))
        .fold(0.0, f64::max);
    let scale = if max_norm_sq > 0.0 {
        (MAX_FEATURE_NORM_SQ / max_norm_sq).sqrt()
    } else {
        1.0
    };
    let features: Vec<Vec<f64>> = dataset
        .features
        .iter()
        .map(|x| vecmath::scale(x, scale))
        .collect();

    let suite = LogisticSuite {
        features,
        labels: dataset.labels.clone(),
        classes: dataset.classes,
        d_feat: dataset.d_feat(),
        shards: partition.assignment.clone(),
        ridge,
        alpha: partition.alpha,
    };
    let l_smooth = 0.5 * MAX_FEATURE_NORM_SQ + ridge;
    let dim = suite.classes * suite.d_feat;
    let n_clients = suite.shards.len();

    let (f_star, _w_star) = logistic_solve_f_star(&suite, l_smooth, ridge, dim)?;

    Ok(ObjectiveSpec {
        kind: SuiteKind::Logistic(suite),
        n_clients,
        dim,
        noise,
        analytics: ObjectiveAnalytics {
            l_smooth,
            f_star,
            w_star: None,
            g_bound: None,
        },
    })
}

/// Accelerated full-batch descent on the global objective; the ridge term
/// makes it strongly convex so this converges to machine-level tolerance.
fn logistic_solve_f_star(
    suite: &LogisticSuite,
    l: f64,
    mu: f64,
    dim: usize,
) -> Result<(f64, Vec<f64>)> {
    let q = (mu / l).sqrt();
    let momentum = (1.0 - q) / (1.0 + q);
    let mut w = vec![0.0; dim];
    let mut w_prev = w.clone();
    let step = 1.0 / l;
    let max_iters = 500_000;
    for _ in 0..max_iters {
        let mut y = vec![0.0; dim];
        for i in 0..dim {
            y[i] = w[i] + momentum * (w[i] - w_prev[i]);
        }
        let (_, grad_y) = logistic_global(suite, &y);
        w_prev = w;
        w = y;
        vecmath::axpy(&mut w, -step, &grad_y);
        let (_, grad_w) = logistic_global(suite, &w);
        if vecmath::norm(&grad_w) <= 1e-11 {
            let (value, _) = logistic_global(suite, &w);
            return Ok((value, w));
        }
    }
    Err(Error::Config(
        "logistic F* solve did not reach tolerance".to_string(),
    ))
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

/// Per-sample cross-entropy value and gradient accumulation. The weight
/// layout is class-major: w[c * d_feat + f].
fn ce_accumulate(
    suite: &LogisticSuite,
    w: &[f64],
    sample: usize,
    grad: Option<&mut [f64]>,
) -> f64 {
    let d = suite.d_feat;
    let x = &suite.features[sample];
    let y = suite.labels[sample];
    let scores: Vec<f64> = (0..suite.classes)
        .map(|c| vecmath::dot(&w[c * d..(c + 1) * d], x))
        .collect();
    let p = softmax(&scores);
    let value = -(p[y].max(1e-300)).ln();
    if let Some(grad) = grad {
        for c in 0..suite.classes {
            let coeff = p[c] - if c == y { 1.0 } else { 0.0 };
            for (g, xv) in grad[c * d..(c + 1) * d].iter_mut().zip(x) {
                *g += coeff * xv;
            }
        }
    }
    value
}

fn logistic_client(suite: &LogisticSuite, client: usize, w: &[f64]) -> (f64, Vec<f64>) {
    let shard = &suite.shards[client];
    let mut grad = vec![0.0; w.len()];
    let mut value = 0.0;
    for &s in shard {
        value += ce_accumulate(suite, w, s, Some(&mut grad));
    }
    let inv = 1.0 / shard.len() as f64;
    value *= inv;
    for g in grad.iter_mut() {
        *g *= inv;
    }
    value += 0.5 * suite.ridge * vecmath::norm_sq(w);
    vecmath::axpy(&mut grad, suite.ridge, w);
    (value, grad)
}

fn logistic_global(suite: &LogisticSuite, w: &[f64]) -> (f64, Vec<f64>) {
    let n = suite.shards.len();
    let inv_n = 1.0 / n as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; w.len()];
    for client in 0..n {
        let (v, g) = logistic_client(suite, client, w);
        value += v;
        vecmath::axpy(&mut grad, 1.0, &g);
    }
    (value * inv_n, vecmath::scale(&grad, inv_n))
}

impl ObjectiveSpec {
    pub fn n_clients(&self) -> usize {
        self.n_clients
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            SuiteKind::Quadratic(_) => "quadratic",
            SuiteKind::Logistic(_) => "logistic",
        }
    }

    fn check_client(&self, i: usize) -> Result<()> {
        if i >= self.n_clients {
            return Err(Error::UnknownClient(i));
        }
        Ok(())
    }

    /// Exact gradient of F_i at w.
    pub fn true_gradient(&self, i: usize, w: &[f64]) -> Result<Vec<f64>> {
        self.check_client(i)?;
        if w.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                got: w.len(),
            });
        }
        Ok(match &self.kind {
            SuiteKind::Quadratic(s) => {
                let c = &s.clients[i];
                let aw = matvec(&c.a, self.dim, w);
                vecmath::sub(&aw, &c.a_center)
            }
            SuiteKind::Logistic(s) => logistic_client(s, i, w).1,
        })
    }

    /// Exact value of F_i at w.
    pub fn client_value(&self, i: usize, w: &[f64]) -> Result<f64> {
        self.check_client(i)?;
        Ok(match &self.kind {
            SuiteKind::Quadratic(s) => {
                let c = &s.clients[i];
                let diff = vecmath::sub(w, &c.center);
                0.5 * vecmath::dot(&diff, &matvec(&c.a, self.dim, &diff))
            }
            SuiteKind::Logistic(s) => logistic_client(s, i, w).0,
        })
    }

    /// Stochastic gradient with E[g] = grad F_i(w).
    pub fn stochastic_gradient(
        &self,
        i: usize,
        w: &[f64],
        rng: &mut RngStream,
    ) -> Result<Vec<f64>> {
        self.check_client(i)?;
        match self.noise.model {
            NoiseModel::GaussianAdditive => {
                let mut g = self.true_gradient(i, w)?;
                if self.noise.sigma2 > 0.0 {
                    let per_coord = (self.noise.sigma2 / self.dim as f64).sqrt();
                    for gi in g.iter_mut() {
                        *gi += per_coord * rng.gen_standard_normal();
                    }
                }
                Ok(g)
            }
            NoiseModel::Minibatch { batch } => {
                let SuiteKind::Logistic(s) = &self.kind else {
                    return Err(Error::Config(
                        "minibatch noise applies to the logistic family only".to_string(),
                    ));
                };
                let shard = &s.shards[i];
                let mut grad = vec![0.0; self.dim];
                for _ in 0..batch {
                    let pick = shard[rng.gen_index(shard.len())];
                    ce_accumulate(s, w, pick, Some(&mut grad));
                }
                let inv = 1.0 / batch as f64;
                for g in grad.iter_mut() {
                    *g *= inv;
                }
                vecmath::axpy(&mut grad, s.ridge, w);
                Ok(grad)
            }
        }
    }

    /// Exact global value and gradient: the mean over clients.
    pub fn global_objective_and_gradient(&self, w: &[f64]) -> Result<(f64, Vec<f64>)> {
        if w.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                got: w.len(),
            });
        }
        Ok(match &self.kind {
            SuiteKind::Quadratic(s) => {
                let value = quadratic_global_value(s, w);
                let aw = matvec(&s.a_bar, self.dim, w);
                (value, vecmath::sub(&aw, &s.b_bar))
            }
            SuiteKind::Logistic(s) => logistic_global(s, w),
        })
    }

    /// max_i || grad F_i(w) - grad F(w) ||^2 at this point.
    pub fn zeta2_at(&self, w: &[f64]) -> Result<f64> {
        match &self.kind {
            SuiteKind::Quadratic(s) => {
                // Affine closed form: (A_i - A_bar) w - (A_i c_i - b_bar).
                let abar_w = matvec(&s.a_bar, self.dim, w);
                let mut worst = 0.0f64;
                for c in &s.clients {
                    let mut diff = matvec(&c.a, self.dim, w);
                    vecmath::axpy(&mut diff, -1.0, &abar_w);
                    vecmath::axpy(&mut diff, -1.0, &c.a_center);
                    vecmath::axpy(&mut diff, 1.0, &s.b_bar);
                    worst = worst.max(vecmath::norm_sq(&diff));
                }
                Ok(worst)
            }
            SuiteKind::Logistic(_) => {
                let (_, global) = self.global_objective_and_gradient(w)?;
                let mut worst = 0.0f64;
                for i in 0..self.n_clients {
                    let gi = self.true_gradient(i, w)?;
                    worst = worst.max(vecmath::dist_sq(&gi, &global));
                }
                Ok(worst)
            }
        }
    }

    /// Suite manifest: key = value lines describing the realized objective.
    pub fn manifest(&self) -> String {
        let w0 = vec![0.0; self.dim];
        let zeta2 = self.zeta2_at(&w0).unwrap_or(f64::NAN);
        let mut out = String::new();
        out.push_str(&format!("objective.kind = {}\n", self.kind_name()));
        out.push_str(&format!("objective.n = {}\n", self.n_clients));
        out.push_str(&format!("objective.dim = {}\n", self.dim));
        out.push_str(&format!("objective.sigma2 = {:e}\n", self.noise.sigma2));
        let noise = match self.noise.model {
            NoiseModel::GaussianAdditive => "gaussian_additive".to_string(),
            NoiseModel::Minibatch { batch } => format!("minibatch:{batch}"),
        };
        out.push_str(&format!("objective.noise = {noise}\n"));
        out.push_str(&format!("objective.l_smooth = {:e}\n", self.analytics.l_smooth));
        out.push_str(&format!("objective.zeta2_at_w0 = {zeta2:e}\n"));
        out.push_str(&format!("objective.f_star = {:e}\n", self.analytics.f_star));
        match &self.kind {
            SuiteKind::Quadratic(s) => {
                out.push_str(&format!("objective.hetero = {:e}\n", s.hetero));
                out.push_str(&format!("objective.condition = {:e}\n", s.condition));
            }
            SuiteKind::Logistic(s) => {
                out.push_str(&format!("objective.classes = {}\n", s.classes));
                out.push_str(&format!("objective.ridge = {:e}\n", s.ridge));
                out.push_str(&format!("objective.alpha = {:e}\n", s.alpha));
            }
        }
        out
    }
}

/// Convenience: build the logistic suite by re-sampling degenerate
/// partitions with fresh sub-seeds, up to 100 attempts.
pub fn make_logistic_suite_resampling(
    dataset: &Dataset,
    labels_alpha: f64,
    n_clients: usize,
    ridge: f64,
    noise: NoiseSpec,
    factory: &crate::rng::RngFactory,
) -> Result<(ObjectiveSpec, Partition)> {
    for attempt in 0..100u32 {
        let mut stream = factory.stream(&format!("partition:{attempt}"));
        match crate::partition::dirichlet_partition(
            &dataset.labels,
            n_clients,
            labels_alpha,
            &mut stream,
        ) {
            Ok(partition) => {
                let spec = make_logistic_suite(dataset, &partition, ridge, noise)?;
                return Ok((spec, partition));
            }
            Err(Error::DegeneratePartition(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::Config(
        "partition still degenerate after 100 resamples".to_string(),
    ))
}
