//! Server aggregation strategies behind a single delivery interface.
//!
//! Every strategy consumes one `Arrival` per delivery and decides whether a
//! server iteration occurs. The engine applies `w <- w - eta_t * u` for every
//! emitted update, so strategies whose reference form adds a displacement
//! emit the gradient-signed equivalent.
//!
//! Kinds: `ace_direct`, `ace_incremental`, `aced`, `fedbuff`, `ca2fl`,
//! `vanilla_asgd`, `delay_adaptive_asgd`.

use crate::objectives::ObjectiveSpec;
use crate::quant::{dequantize, quantize8, QuantizedVector};
use crate::rng::RngStream;
use crate::vecmath;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AggregatorKind {
    AceDirect,
    AceIncremental,
    Aced,
    FedBuff,
    Ca2fl,
    VanillaAsgd,
    DelayAdaptiveAsgd,
}

impl AggregatorKind {
    pub fn name(&self) -> &'static str {
        match self {
            AggregatorKind::AceDirect => "ace_direct",
            AggregatorKind::AceIncremental => "ace_incremental",
            AggregatorKind::Aced => "aced",
            AggregatorKind::FedBuff => "fedbuff",
            AggregatorKind::Ca2fl => "ca2fl",
            AggregatorKind::VanillaAsgd => "vanilla_asgd",
            AggregatorKind::DelayAdaptiveAsgd => "delay_adaptive_asgd",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "ace_direct" => AggregatorKind::AceDirect,
            "ace_incremental" => AggregatorKind::AceIncremental,
            "aced" => AggregatorKind::Aced,
            "fedbuff" => AggregatorKind::FedBuff,
            "ca2fl" => AggregatorKind::Ca2fl,
            "vanilla_asgd" => AggregatorKind::VanillaAsgd,
            "delay_adaptive_asgd" => AggregatorKind::DelayAdaptiveAsgd,
            _ => return None,
        })
    }

    /// Kinds that seed the server cache with one gradient per client before
    /// the first iteration.
    pub fn seeds_cache(&self) -> bool {
        matches!(
            self,
            AggregatorKind::AceDirect | AggregatorKind::AceIncremental | AggregatorKind::Aced
        )
    }

    pub fn is_buffered(&self) -> bool {
        matches!(self, AggregatorKind::FedBuff | AggregatorKind::Ca2fl)
    }
}

/// Local computation: K SGD steps with step size eta_l. The reported update
/// is `eta_l * sum_k g_k`, the gradient-signed displacement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalTrainSpec {
    pub k: u32,
    pub eta_l: f64,
}

impl Default for LocalTrainSpec {
    fn default() -> Self {
        Self { k: 1, eta_l: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AcedConfig {
    pub tau_algo: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BufferConfig {
    pub m: usize,
    pub concurrency: usize,
    /// When set, a reporting client is not re-dispatched until the buffer
    /// emits; with m = concurrency = n this is the synchronous limit.
    pub blocking: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DelayAdaptiveConfig {
    pub tau_c: u64,
    pub l_est: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregatorSpec {
    pub kind: AggregatorKind,
    pub local: LocalTrainSpec,
    pub aced: Option<AcedConfig>,
    pub buffer: Option<BufferConfig>,
    pub delay_adaptive: Option<DelayAdaptiveConfig>,
    pub quantize8: bool,
}

impl AggregatorSpec {
    pub fn new(kind: AggregatorKind) -> Self {
        Self {
            kind,
            local: LocalTrainSpec::default(),
            aced: None,
            buffer: None,
            delay_adaptive: None,
            quantize8: false,
        }
    }

    pub fn with_aced(tau_algo: u64) -> Self {
        let mut s = Self::new(AggregatorKind::Aced);
        s.aced = Some(AcedConfig { tau_algo });
        s
    }

    pub fn with_buffer(kind: AggregatorKind, m: usize, concurrency: usize) -> Self {
        let mut s = Self::new(kind);
        s.buffer = Some(BufferConfig {
            m,
            concurrency,
            blocking: false,
        });
        s
    }
}

/// Check parameter presence and ranges against the client count.
pub fn validate_aggregator(spec: &AggregatorSpec, n_clients: usize) -> Vec<String> {
    let mut v = Vec::new();
    let kind = spec.kind;
    if spec.local.k < 1 {
        v.push("local K must be >= 1".to_string());
    }
    if !(spec.local.eta_l > 0.0) {
        v.push("local eta_l must be > 0".to_string());
    }
    let single_step = matches!(
        kind,
        AggregatorKind::AceDirect
            | AggregatorKind::AceIncremental
            | AggregatorKind::Aced
            | AggregatorKind::VanillaAsgd
            | AggregatorKind::DelayAdaptiveAsgd
    );
    if single_step && spec.local.k != 1 {
        v.push(format!("{} requires K=1", kind.name()));
    }
    match kind {
        AggregatorKind::Aced => match spec.aced {
            None => v.push("aced requires tau_algo".to_string()),
            Some(c) if c.tau_algo < 1 => v.push("tau_algo must be >= 1".to_string()),
            _ => {}
        },
        AggregatorKind::FedBuff | AggregatorKind::Ca2fl => match spec.buffer {
            None => v.push(format!("{} requires buffer M and concurrency", kind.name())),
            Some(b) => {
                if b.m < 1 || b.m > n_clients {
                    v.push(format!("buffer M must be in [1, n] (got {})", b.m));
                }
                if b.concurrency < 1 || b.concurrency > n_clients {
                    v.push(format!(
                        "concurrency must be in [1, n] (got {})",
                        b.concurrency
                    ));
                }
            }
        },
        AggregatorKind::DelayAdaptiveAsgd => match spec.delay_adaptive {
            None => v.push("delay_adaptive_asgd requires tau_C and L_est".to_string()),
            Some(c) => {
                if c.tau_c < 1 {
                    v.push("tau_C must be >= 1".to_string());
                }
                if !(c.l_est > 0.0) {
                    v.push("L_est must be > 0".to_string());
                }
            }
        },
        _ => {}
    }
    if spec.aced.is_some() && kind != AggregatorKind::Aced {
        v.push("tau_algo only applies to aced".to_string());
    }
    if spec.buffer.is_some() && !kind.is_buffered() {
        v.push("buffer parameters only apply to fedbuff/ca2fl".to_string());
    }
    if spec.delay_adaptive.is_some() && kind != AggregatorKind::DelayAdaptiveAsgd {
        v.push("tau_C/L_est only apply to delay_adaptive_asgd".to_string());
    }
    if spec.quantize8
        && !matches!(kind, AggregatorKind::AceDirect | AggregatorKind::Aced)
    {
        v.push("quantize8 is valid for ace_direct and aced only".to_string());
    }
    v
}

/// K local SGD steps; returns eta_l * sum of the step gradients.
pub fn local_train(
    obj: &ObjectiveSpec,
    client: usize,
    w: &[f64],
    spec: &LocalTrainSpec,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    let mut local_w = w.to_vec();
    let mut sum = vec![0.0; w.len()];
    for _ in 0..spec.k {
        let g = obj.stochastic_gradient(client, &local_w, rng)?;
        vecmath::axpy(&mut sum, 1.0, &g);
        if spec.k > 1 {
            vecmath::axpy(&mut local_w, -spec.eta_l, &g);
        }
    }
    Ok(vecmath::scale(&sum, spec.eta_l))
}

/// Delay-adaptive step size: keep eta while the gradient is fresh, otherwise
/// scale down to min(eta, 1/(4 L tau)).
pub fn delay_adaptive_step_size(tau_t: u64, cfg: &DelayAdaptiveConfig, eta: f64) -> f64 {
    if tau_t <= cfg.tau_c {
        eta
    } else {
        eta.min(1.0 / (4.0 * cfg.l_est * tau_t as f64))
    }
}

/// One client contribution handed to the server.
#[derive(Debug, Clone)]
pub struct Arrival {
    pub client: usize,
    /// Output of `local_train` on the model dispatched at `basis_iter`.
    pub update: Vec<f64>,
    pub basis_iter: u64,
}

/// How to rebuild the emitted update from true gradients: the probe replaces
/// each fresh contribution with grad F_client evaluated on its basis model.
/// All quantities are in gradient units (applied update / (eta_l * K)).
#[derive(Debug, Clone)]
pub struct ReplayInfo {
    /// (client, basis_iter, weight)
    pub fresh: Vec<(usize, u64, f64)>,
    /// Constant part carried from server caches (CA2FL).
    pub carry: Option<Vec<f64>>,
    /// Applied-units update divided by this gives gradient units.
    pub grad_unit_scale: f64,
}

/// What one delivery produced.
#[derive(Debug, Clone)]
pub enum UpdateDecision {
    /// Buffered kinds mid-buffer: no server iteration.
    Accumulated,
    /// A server iteration occurs; `update` is None when the model stays
    /// unchanged (ACED with an empty active set).
    Emit {
        update: Option<EmittedUpdate>,
        n_participants: usize,
        max_staleness: u64,
    },
}

#[derive(Debug, Clone)]
pub struct EmittedUpdate {
    pub u: Vec<f64>,
    pub eta_t: f64,
    pub replay: ReplayInfo,
}

#[derive(Debug, Clone)]
enum CacheStore {
    Dense(Vec<f64>),
    Quant(QuantizedVector),
}

impl CacheStore {
    fn read(&self) -> Vec<f64> {
        match self {
            CacheStore::Dense(v) => v.clone(),
            CacheStore::Quant(q) => dequantize(q),
        }
    }

    fn size_bytes(&self) -> usize {
        match self {
            CacheStore::Dense(v) => v.len() * std::mem::size_of::<f64>(),
            CacheStore::Quant(q) => q.size_bytes(),
        }
    }
}

/// One cached client entry: the latest update, the iteration of the model it
/// was computed on, when it arrived, and the dispatch mark used by ACED's
/// active-set rule.
#[derive(Debug, Clone)]
struct CacheEntry {
    store: CacheStore,
    basis_iter: u64,
    #[allow(dead_code)]
    arrival_iter: u64,
    dispatch_mark: u64,
}

#[derive(Debug)]
pub struct Aggregator {
    spec: AggregatorSpec,
    n_clients: usize,
    dim: usize,
    cache: Vec<CacheEntry>,
    /// ace_incremental running aggregate and per-client previous updates.
    incr_u: Vec<f64>,
    incr_prev: Vec<Vec<f64>>,
    /// Buffered-kind state.
    accum: Vec<f64>,
    buffer_members: Vec<(usize, u64)>,
    reported: Vec<bool>,
    reported_count: usize,
    /// CA2FL caches.
    h_global: Vec<f64>,
    h_clients: Vec<Vec<f64>>,
    carry_h_sum: Vec<f64>,
    ca2fl_max_gap: f64,
    /// Transient staleness mask applied by `deliver_capped`.
    entry_cap: Option<u64>,
}

impl Aggregator {
    pub fn new(spec: AggregatorSpec, n_clients: usize, dim: usize) -> Result<Self> {
        let violations = validate_aggregator(&spec, n_clients);
        if !violations.is_empty() {
            return Err(Error::Config(violations.join("; ")));
        }
        let is_ca2fl = spec.kind == AggregatorKind::Ca2fl;
        Ok(Self {
            spec,
            n_clients,
            dim,
            cache: Vec::new(),
            incr_u: Vec::new(),
            incr_prev: Vec::new(),
            accum: vec![0.0; dim],
            buffer_members: Vec::new(),
            reported: vec![false; n_clients],
            reported_count: 0,
            h_global: vec![0.0; dim],
            h_clients: if is_ca2fl {
                vec![vec![0.0; dim]; n_clients]
            } else {
                Vec::new()
            },
            carry_h_sum: vec![0.0; dim],
            ca2fl_max_gap: 0.0,
            entry_cap: None,
        })
    }

    pub fn spec(&self) -> &AggregatorSpec {
        &self.spec
    }

    /// Largest observed gap between the incremental global cache and the
    /// exact mean of client caches (CA2FL only).
    pub fn ca2fl_max_cache_gap(&self) -> f64 {
        self.ca2fl_max_gap
    }

    /// Bytes held per cached entry, if this strategy caches gradients.
    pub fn cache_entry_bytes(&self) -> Option<usize> {
        self.cache.first().map(|e| e.store.size_bytes())
    }

    fn store(&self, update: Vec<f64>, rng: &mut RngStream) -> CacheStore {
        if self.spec.quantize8 {
            CacheStore::Quant(quantize8(&update, rng))
        } else {
            CacheStore::Dense(update)
        }
    }

    /// Seed the cache with one initial gradient per client (ACE kinds) and
    /// return the initialization update u0 = mean of the seeds. Dispatch
    /// marks start at 1: the initialization broadcast is iteration 1's model.
    pub fn seed_round(
        &mut self,
        seeds: Vec<Arrival>,
        rng: &mut RngStream,
    ) -> Result<Vec<f64>> {
        assert!(self.spec.kind.seeds_cache());
        if seeds.len() != self.n_clients {
            return Err(Error::Config(format!(
                "seed round needs one gradient per client (got {})",
                seeds.len()
            )));
        }
        for arrival in seeds {
            let entry = CacheEntry {
                store: self.store(arrival.update, rng),
                basis_iter: arrival.basis_iter,
                arrival_iter: 0,
                dispatch_mark: 1,
            };
            self.cache.push(entry);
        }
        let grads: Vec<Vec<f64>> = self.cache.iter().map(|e| e.store.read()).collect();
        let refs: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
        let u0 = vecmath::mean(&refs);
        if self.spec.kind == AggregatorKind::AceIncremental {
            self.incr_prev = grads;
            self.incr_u = u0.clone();
        }
        Ok(u0)
    }

    /// Handle one arrival at pre-update server iteration `t`.
    pub fn deliver(
        &mut self,
        arrival: Arrival,
        t: u64,
        eta: f64,
        rng: &mut RngStream,
    ) -> Result<UpdateDecision> {
        if arrival.client >= self.n_clients {
            return Err(Error::UnknownClient(arrival.client));
        }
        if arrival.update.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                got: arrival.update.len(),
            });
        }
        match self.spec.kind {
            AggregatorKind::AceDirect => self.deliver_ace_direct(arrival, t, eta, rng),
            AggregatorKind::AceIncremental => self.deliver_ace_incremental(arrival, t, eta),
            AggregatorKind::Aced => self.deliver_aced(arrival, t, eta, rng),
            AggregatorKind::FedBuff => self.deliver_fedbuff(arrival, t, eta),
            AggregatorKind::Ca2fl => self.deliver_ca2fl(arrival, t, eta),
            AggregatorKind::VanillaAsgd => Ok(self.deliver_single(arrival, t, eta, None)),
            AggregatorKind::DelayAdaptiveAsgd => {
                let cfg = self.spec.delay_adaptive.expect("validated");
                Ok(self.deliver_single(arrival, t, eta, Some(cfg)))
            }
        }
    }

    /// Like `deliver`, but under an enforced staleness cap cached entries
    /// older than `cap` are excluded from the aggregation (ace_direct and
    /// aced only; the engine validates the combination).
    pub fn deliver_capped(
        &mut self,
        arrival: Arrival,
        t: u64,
        eta: f64,
        rng: &mut RngStream,
        cap: Option<u64>,
    ) -> Result<UpdateDecision> {
        match (cap, self.spec.kind) {
            (Some(cap), AggregatorKind::AceDirect) => {
                self.deliver_ace_capped(arrival, t, eta, rng, cap)
            }
            (Some(_), AggregatorKind::Aced) => {
                // The active-set rule already filters by dispatch mark; the
                // cap additionally masks over-age entries inside deliver_aced.
                self.entry_cap = cap;
                let d = self.deliver(arrival, t, eta, rng);
                self.entry_cap = None;
                d
            }
            _ => self.deliver(arrival, t, eta, rng),
        }
    }

    fn deliver_ace_capped(
        &mut self,
        arrival: Arrival,
        t: u64,
        eta: f64,
        rng: &mut RngStream,
        cap: u64,
    ) -> Result<UpdateDecision> {
        let j = arrival.client;
        self.cache[j] = CacheEntry {
            store: self.store(arrival.update, rng),
            basis_iter: arrival.basis_iter,
            arrival_iter: t,
            dispatch_mark: self.cache[j].dispatch_mark,
        };
        let included: Vec<usize> = (0..self.n_clients)
            .filter(|&i| t.saturating_sub(self.cache[i].basis_iter) <= cap)
            .collect();
        if included.is_empty() {
            return Ok(UpdateDecision::Emit {
                update: None,
                n_participants: 0,
                max_staleness: 0,
            });
        }
        Ok(self.cache_combination(&included, t, eta))
    }

    /// Mean over `included` cache entries, summed in client-id order.
    fn cache_combination(&self, included: &[usize], t: u64, eta: f64) -> UpdateDecision {
        let grads: Vec<Vec<f64>> = included
            .iter()
            .map(|&i| self.cache[i].store.read())
            .collect();
        let refs: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
        let u = vecmath::mean(&refs);
        let max_staleness = included
            .iter()
            .map(|&i| t.saturating_sub(self.cache[i].basis_iter))
            .max()
            .unwrap_or(0);
        let weight = 1.0 / included.len() as f64;
        let fresh = included
            .iter()
            .map(|&i| (i, self.cache[i].basis_iter, weight))
            .collect();
        UpdateDecision::Emit {
            update: Some(EmittedUpdate {
                u,
                eta_t: eta,
                replay: ReplayInfo {
                    fresh,
                    carry: None,
                    grad_unit_scale: self.spec.local.eta_l,
                },
            }),
            n_participants: included.len(),
            max_staleness,
        }
    }

    fn deliver_ace_direct(
        &mut self,
        arrival: Arrival,
        t: u64,
        eta: f64,
        rng: &mut RngStream,
    ) -> Result<UpdateDecision> {
        let j = arrival.client;
        self.cache[j] = CacheEntry {
            store: self.store(arrival.update, rng),
            basis_iter: arrival.basis_iter,
            arrival_iter: t,
            dispatch_mark: self.cache[j].dispatch_mark,
        };
        let all: Vec<usize> = (0..self.n_clients).collect();
        Ok(self.cache_combination(&all, t, eta))
    }

    fn deliver_ace_incremental(
        &mut self,
        arrival: Arrival,
        t: u64,
        eta: f64,
    ) -> Result<UpdateDecision> {
        let j = arrival.client;
        // The client transmits g_new - g_prev; the server touches O(d) state.
        let diff = vecmath::sub(&arrival.update, &self.incr_prev[j]);
        vecmath::axpy(&mut self.incr_u, 1.0 / self.n_clients as f64, &diff);
        self.incr_prev[j] = arrival.update;
        self.cache[j].basis_iter = arrival.basis_iter;
        self.cache[j].arrival_iter = t;
        let max_staleness = self
            .cache
            .iter()
            .map(|e| t.saturating_sub(e.basis_iter))
            .max()
            .unwrap_or(0);
        let weight = 1.0 / self.n_clients as f64;
        let fresh = self
            .cache
            .iter()
            .enumerate()
            .map(|(i, e)| (i, e.basis_iter, weight))
            .collect();
        Ok(UpdateDecision::Emit {
            update: Some(EmittedUpdate {
                u: self.incr_u.clone(),
                eta_t: eta,
                replay: ReplayInfo {
                    fresh,
                    carry: None,
                    grad_unit_scale: self.spec.local.eta_l,
                },
            }),
            n_participants: self.n_clients,
            max_staleness,
        })
    }

    fn deliver_aced(
        &mut self,
        arrival: Arrival,
        t: u64,
        eta: f64,
        rng: &mut RngStream,
    ) -> Result<UpdateDecision> {
        let j = arrival.client;
        let tau_algo = self.spec.aced.expect("validated").tau_algo;
        self.cache[j] = CacheEntry {
            store: self.store(arrival.update, rng),
            basis_iter: arrival.basis_iter,
            arrival_iter: t,
            dispatch_mark: self.cache[j].dispatch_mark,
        };
        // Active set with the pre-reset dispatch marks; the reporter's mark
        // advances only afterwards, so a rejoiner is included from the next
        // iteration on.
        let cap = self.entry_cap;
        let active: Vec<usize> = (0..self.n_clients)
            .filter(|&i| t.saturating_sub(self.cache[i].dispatch_mark) <= tau_algo)
            .filter(|&i| match cap {
                Some(cap) => t.saturating_sub(self.cache[i].basis_iter) <= cap,
                None => true,
            })
            .collect();
        let decision = if active.is_empty() {
            // No fresh information: the model stays put but t advances.
            UpdateDecision::Emit {
                update: None,
                n_participants: 0,
                max_staleness: 0,
            }
        } else {
            self.cache_combination(&active, t, eta)
        };
        self.cache[j].dispatch_mark = t + 1;
        Ok(decision)
    }

    fn deliver_fedbuff(&mut self, arrival: Arrival, t: u64, eta: f64) -> Result<UpdateDecision> {
        let m_target = self.spec.buffer.expect("validated").m;
        vecmath::axpy(&mut self.accum, 1.0, &arrival.update);
        self.buffer_members.push((arrival.client, arrival.basis_iter));
        if !self.reported[arrival.client] {
            self.reported[arrival.client] = true;
            self.reported_count += 1;
        }
        if self.buffer_members.len() < m_target {
            return Ok(UpdateDecision::Accumulated);
        }
        let u = vecmath::scale(&self.accum, 1.0 / m_target as f64);
        let max_staleness = self
            .buffer_members
            .iter()
            .map(|&(_, basis)| t.saturating_sub(basis))
            .max()
            .unwrap_or(0);
        let weight = 1.0 / m_target as f64;
        let fresh = self
            .buffer_members
            .iter()
            .map(|&(c, basis)| (c, basis, weight))
            .collect();
        let n_participants = self.reported_count;
        self.reset_window();
        Ok(UpdateDecision::Emit {
            update: Some(EmittedUpdate {
                u,
                eta_t: eta,
                replay: ReplayInfo {
                    fresh,
                    carry: None,
                    grad_unit_scale: self.spec.local.eta_l * self.spec.local.k as f64,
                },
            }),
            n_participants,
            max_staleness,
        })
    }

    fn deliver_ca2fl(&mut self, arrival: Arrival, t: u64, eta: f64) -> Result<UpdateDecision> {
        let m_target = self.spec.buffer.expect("validated").m;
        let j = arrival.client;
        let h_old = std::mem::replace(&mut self.h_clients[j], arrival.update.clone());
        // Calibrated accumulation: Delta += (Delta_j - h_j).
        vecmath::axpy(&mut self.accum, 1.0, &arrival.update);
        vecmath::axpy(&mut self.accum, -1.0, &h_old);
        vecmath::axpy(&mut self.carry_h_sum, 1.0, &h_old);
        self.buffer_members.push((j, arrival.basis_iter));
        if !self.reported[j] {
            self.reported[j] = true;
            self.reported_count += 1;
        }
        if self.buffer_members.len() < m_target {
            return Ok(UpdateDecision::Accumulated);
        }
        let s_distinct = self.reported_count;
        let inv_s = 1.0 / s_distinct as f64;
        let mut u = self.h_global.clone();
        vecmath::axpy(&mut u, inv_s, &self.accum);
        let max_staleness = self
            .buffer_members
            .iter()
            .map(|&(_, basis)| t.saturating_sub(basis))
            .max()
            .unwrap_or(0);
        let scale = self.spec.local.eta_l * self.spec.local.k as f64;
        // Carry = (h - (1/|S|) sum h_j_old) in gradient units; the fresh
        // arrivals enter with weight 1/|S| each.
        let mut carry = self.h_global.clone();
        vecmath::axpy(&mut carry, -inv_s, &self.carry_h_sum);
        let carry = vecmath::scale(&carry, 1.0 / scale);
        let fresh = self
            .buffer_members
            .iter()
            .map(|&(c, basis)| (c, basis, inv_s))
            .collect();
        // Global cache for the next window: h + (net cache change)/n, then
        // verified against the exact mean of client caches.
        vecmath::axpy(&mut self.h_global, 1.0 / self.n_clients as f64, &self.accum);
        let refs: Vec<&[f64]> = self.h_clients.iter().map(|h| h.as_slice()).collect();
        let exact = vecmath::mean(&refs);
        let gap = vecmath::linf_dist(&self.h_global, &exact);
        self.ca2fl_max_gap = self.ca2fl_max_gap.max(gap);
        self.reset_window();
        Ok(UpdateDecision::Emit {
            update: Some(EmittedUpdate {
                u,
                eta_t: eta,
                replay: ReplayInfo {
                    fresh,
                    carry: Some(carry),
                    grad_unit_scale: scale,
                },
            }),
            n_participants: s_distinct,
            max_staleness,
        })
    }

    fn reset_window(&mut self) {
        self.accum.iter_mut().for_each(|a| *a = 0.0);
        self.carry_h_sum.iter_mut().for_each(|a| *a = 0.0);
        self.buffer_members.clear();
        self.reported.iter_mut().for_each(|r| *r = false);
        self.reported_count = 0;
    }

    fn deliver_single(
        &mut self,
        arrival: Arrival,
        t: u64,
        eta: f64,
        da: Option<DelayAdaptiveConfig>,
    ) -> UpdateDecision {
        let tau_t = t.saturating_sub(arrival.basis_iter);
        let eta_t = match da {
            Some(cfg) => delay_adaptive_step_size(tau_t, &cfg, eta),
            None => eta,
        };
        let fresh = vec![(arrival.client, arrival.basis_iter, 1.0)];
        UpdateDecision::Emit {
            update: Some(EmittedUpdate {
                u: arrival.update,
                eta_t,
                replay: ReplayInfo {
                    fresh,
                    carry: None,
                    grad_unit_scale: self.spec.local.eta_l,
                },
            }),
            n_participants: 1,
            max_staleness: tau_t,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::{make_quadratic_suite, QuadraticParams};
    use crate::rng::RngFactory;
    use approx::assert_relative_eq;

    fn quant_stream() -> RngStream {
        RngFactory::new(0).stream("quant")
    }

    fn seeded_ace(kind: AggregatorKind, seeds: Vec<Vec<f64>>) -> Aggregator {
        let n = seeds.len();
        let dim = seeds[0].len();
        let mut agg = Aggregator::new(AggregatorSpec::new(kind), n, dim).unwrap();
        let arrivals = seeds
            .into_iter()
            .enumerate()
            .map(|(client, update)| Arrival {
                client,
                update,
                basis_iter: 0,
            })
            .collect();
        agg.seed_round(arrivals, &mut quant_stream()).unwrap();
        agg
    }

    fn emitted(decision: UpdateDecision) -> EmittedUpdate {
        match decision {
            UpdateDecision::Emit {
                update: Some(e), ..
            } => e,
            other => panic!("expected an emitted update, got {other:?}"),
        }
    }

    #[test]
    fn ace_single_client_echoes_gradient() {
        let mut agg = seeded_ace(AggregatorKind::AceDirect, vec![vec![0.0, 0.0]]);
        let d = agg
            .deliver(
                Arrival {
                    client: 0,
                    update: vec![2.0, -1.0],
                    basis_iter: 1,
                },
                1,
                0.1,
                &mut quant_stream(),
            )
            .unwrap();
        assert_eq!(emitted(d).u, vec![2.0, -1.0]);
    }

    #[test]
    fn ace_mean_of_cache() {
        let mut agg = seeded_ace(
            AggregatorKind::AceDirect,
            vec![vec![9.0, 9.0], vec![0.0, 1.0], vec![2.0, 2.0]],
        );
        // Overwrite client 0 with (1,0): cache {(1,0),(0,1),(2,2)} -> (1,1).
        let d = agg
            .deliver(
                Arrival {
                    client: 0,
                    update: vec![1.0, 0.0],
                    basis_iter: 1,
                },
                1,
                0.1,
                &mut quant_stream(),
            )
            .unwrap();
        assert_eq!(emitted(d).u, vec![1.0, 1.0]);
    }

    #[test]
    fn incremental_zero_diff_keeps_u() {
        let mut agg = seeded_ace(
            AggregatorKind::AceIncremental,
            vec![vec![1.0, 1.0], vec![3.0, 1.0]],
        );
        let before = agg.incr_u.clone();
        let d = agg
            .deliver(
                Arrival {
                    client: 1,
                    update: vec![3.0, 1.0],
                    basis_iter: 1,
                },
                1,
                0.1,
                &mut quant_stream(),
            )
            .unwrap();
        assert_eq!(emitted(d).u, before);
    }

    #[test]
    fn incremental_diff_arithmetic() {
        // u=(1,1), n=2, diff=(2,0) -> u=(2,1).
        let mut agg = seeded_ace(
            AggregatorKind::AceIncremental,
            vec![vec![1.0, 1.0], vec![1.0, 1.0]],
        );
        let d = agg
            .deliver(
                Arrival {
                    client: 0,
                    update: vec![3.0, 1.0],
                    basis_iter: 1,
                },
                1,
                0.1,
                &mut quant_stream(),
            )
            .unwrap();
        assert_eq!(emitted(d).u, vec![2.0, 1.0]);
    }

    #[test]
    fn aced_excludes_lapsed_clients_and_rejoins() {
        let mut spec = AggregatorSpec::with_aced(1);
        spec.local = LocalTrainSpec::default();
        let mut agg = Aggregator::new(spec, 2, 1).unwrap();
        agg.seed_round(
            vec![
                Arrival { client: 0, update: vec![1.0], basis_iter: 0 },
                Arrival { client: 1, update: vec![5.0], basis_iter: 0 },
            ],
            &mut quant_stream(),
        )
        .unwrap();
        // Client 0 reports every iteration; client 1 never again. Marks start
        // at 1, so at t=3 client 1 (mark 1) exceeds tau_algo=1 and only the
        // fresh client remains: u equals its gradient alone.
        for t in 1..=2u64 {
            let d = agg
                .deliver(
                    Arrival { client: 0, update: vec![1.0], basis_iter: t },
                    t,
                    0.1,
                    &mut quant_stream(),
                )
                .unwrap();
            match d {
                UpdateDecision::Emit { n_participants, .. } => {
                    assert_eq!(n_participants, 2, "both active at t={t}")
                }
                _ => panic!(),
            }
        }
        let d = agg
            .deliver(
                Arrival { client: 0, update: vec![1.0], basis_iter: 3 },
                3,
                0.1,
                &mut quant_stream(),
            )
            .unwrap();
        match d {
            UpdateDecision::Emit {
                update: Some(e),
                n_participants,
                ..
            } => {
                assert_eq!(n_participants, 1);
                assert_eq!(e.u, vec![1.0]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn aced_empty_active_set_skips_update() {
        let mut agg = Aggregator::new(AggregatorSpec::with_aced(1), 2, 1).unwrap();
        agg.seed_round(
            vec![
                Arrival { client: 0, update: vec![1.0], basis_iter: 0 },
                Arrival { client: 1, update: vec![5.0], basis_iter: 0 },
            ],
            &mut quant_stream(),
        )
        .unwrap();
        // At t=10 both marks (1) lapsed; the reporter's mark resets only
        // after the decision, so no update is emitted but t advances.
        let d = agg
            .deliver(
                Arrival { client: 0, update: vec![1.0], basis_iter: 3 },
                10,
                0.1,
                &mut quant_stream(),
            )
            .unwrap();
        match d {
            UpdateDecision::Emit {
                update: None,
                n_participants,
                ..
            } => assert_eq!(n_participants, 0),
            other => panic!("unexpected {other:?}"),
        }
        // The reset makes the reporter active again next iteration.
        let d = agg
            .deliver(
                Arrival { client: 0, update: vec![2.0], basis_iter: 11 },
                11,
                0.1,
                &mut quant_stream(),
            )
            .unwrap();
        match d {
            UpdateDecision::Emit {
                update: Some(e),
                n_participants,
                ..
            } => {
                assert_eq!(n_participants, 1);
                assert_eq!(e.u, vec![2.0]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn fedbuff_emits_every_mth_delivery() {
        let spec = AggregatorSpec::with_buffer(AggregatorKind::FedBuff, 3, 3);
        let mut agg = Aggregator::new(spec, 3, 1).unwrap();
        let deliver = |agg: &mut Aggregator, client: usize, value: f64| {
            agg.deliver(
                Arrival { client, update: vec![value], basis_iter: 0 },
                0,
                0.1,
                &mut quant_stream(),
            )
            .unwrap()
        };
        assert!(matches!(
            deliver(&mut agg, 0, 1.0),
            UpdateDecision::Accumulated
        ));
        assert!(matches!(
            deliver(&mut agg, 1, 2.0),
            UpdateDecision::Accumulated
        ));
        let d = deliver(&mut agg, 2, 3.0);
        assert_eq!(emitted(d).u, vec![2.0]);
        // Window resets: the next delivery accumulates again.
        assert!(matches!(
            deliver(&mut agg, 0, 9.0),
            UpdateDecision::Accumulated
        ));
    }

    #[test]
    fn fedbuff_m1_emits_each_delivery() {
        let spec = AggregatorSpec::with_buffer(AggregatorKind::FedBuff, 1, 1);
        let mut agg = Aggregator::new(spec, 4, 1).unwrap();
        let d = agg
            .deliver(
                Arrival { client: 2, update: vec![7.0], basis_iter: 0 },
                0,
                0.1,
                &mut quant_stream(),
            )
            .unwrap();
        assert_eq!(emitted(d).u, vec![7.0]);
    }

    #[test]
    fn ca2fl_hand_example() {
        // n=2, M=1, h_1=(1,1), h_2=(3,3), h=(2,2); arrival Delta_1=(5,1)
        // gives v = h + (Delta_1 - h_1) = (6,2).
        let spec = AggregatorSpec::with_buffer(AggregatorKind::Ca2fl, 1, 1);
        let mut agg = Aggregator::new(spec, 2, 2).unwrap();
        agg.h_clients[0] = vec![1.0, 1.0];
        agg.h_clients[1] = vec![3.0, 3.0];
        agg.h_global = vec![2.0, 2.0];
        let d = agg
            .deliver(
                Arrival { client: 0, update: vec![5.0, 1.0], basis_iter: 0 },
                0,
                0.1,
                &mut quant_stream(),
            )
            .unwrap();
        assert_eq!(emitted(d).u, vec![6.0, 2.0]);
        // Cache invariant after the emit: h == mean(h_i) = ((5,1)+(3,3))/2.
        assert!(vecmath::linf_dist(&agg.h_global, &[4.0, 2.0]) <= 1e-12);
        assert!(agg.ca2fl_max_cache_gap() <= 1e-12);
    }

    #[test]
    fn ca2fl_duplicate_reporter_counts_once() {
        // Two reports from one client inside a window telescope in the
        // accumulator and |S| counts distinct clients.
        let spec = AggregatorSpec::with_buffer(AggregatorKind::Ca2fl, 2, 2);
        let mut agg = Aggregator::new(spec, 2, 1).unwrap();
        agg.h_clients[0] = vec![1.0];
        agg.h_clients[1] = vec![3.0];
        agg.h_global = vec![2.0];
        assert!(matches!(
            agg.deliver(
                Arrival { client: 0, update: vec![5.0], basis_iter: 0 },
                0,
                0.1,
                &mut quant_stream(),
            )
            .unwrap(),
            UpdateDecision::Accumulated
        ));
        let d = agg
            .deliver(
                Arrival { client: 0, update: vec![7.0], basis_iter: 0 },
                0,
                0.1,
                &mut quant_stream(),
            )
            .unwrap();
        // accum = (5 - 1) + (7 - 5) = 6; v = h + accum/|S| = 2 + 6/1 = 8.
        match d {
            UpdateDecision::Emit {
                update: Some(e),
                n_participants,
                ..
            } => {
                assert_eq!(n_participants, 1);
                assert_eq!(e.u, vec![8.0]);
            }
            other => panic!("unexpected {other:?}"),
        }
        // h tracks the true cache mean: h_0 = 7, h_1 = 3 -> h = 5.
        assert!(vecmath::linf_dist(&agg.h_global, &[5.0]) <= 1e-12);
    }

    #[test]
    fn ca2fl_calibration_cancels_when_cache_matches() {
        let spec = AggregatorSpec::with_buffer(AggregatorKind::Ca2fl, 2, 2);
        let mut agg = Aggregator::new(spec, 2, 1).unwrap();
        agg.h_clients[0] = vec![2.0];
        agg.h_clients[1] = vec![4.0];
        agg.h_global = vec![3.0];
        agg.deliver(
            Arrival { client: 0, update: vec![2.0], basis_iter: 0 },
            0,
            0.1,
            &mut quant_stream(),
        )
        .unwrap();
        let d = agg
            .deliver(
                Arrival { client: 1, update: vec![4.0], basis_iter: 0 },
                0,
                0.1,
                &mut quant_stream(),
            )
            .unwrap();
        assert_eq!(emitted(d).u, vec![3.0]);
    }

    #[test]
    fn delay_adaptive_rule_values() {
        let cfg = DelayAdaptiveConfig { tau_c: 5, l_est: 1.0 };
        assert_eq!(delay_adaptive_step_size(3, &cfg, 0.1), 0.1);
        assert_eq!(delay_adaptive_step_size(10, &cfg, 0.1), 0.025);
        assert_eq!(delay_adaptive_step_size(0, &cfg, 0.1), 0.1);
    }

    #[test]
    fn delay_adaptive_rule_bounds() {
        let cfg = DelayAdaptiveConfig { tau_c: 4, l_est: 2.5 };
        for tau in 0..200u64 {
            for &eta in &[0.01, 0.1, 1.0] {
                let eta_t = delay_adaptive_step_size(tau, &cfg, eta);
                assert!(eta_t <= eta);
                if tau > cfg.tau_c {
                    assert!(eta_t * tau as f64 <= 1.0 / (4.0 * cfg.l_est) + 1e-15);
                }
            }
        }
    }

    #[test]
    fn local_train_k1_identity() {
        let p = QuadraticParams::new(2, 3);
        let obj = make_quadratic_suite(&p, &mut RngFactory::new(1).stream("suite")).unwrap();
        let w = vec![0.4, -0.2, 0.9];
        let spec = LocalTrainSpec { k: 1, eta_l: 1.0 };
        let mut rng = RngFactory::new(2).stream("noise:client:0");
        let delta = local_train(&obj, 0, &w, &spec, &mut rng).unwrap();
        assert_eq!(delta, obj.true_gradient(0, &w).unwrap());
    }

    #[test]
    fn local_train_k2_matches_hand_expansion() {
        let p = QuadraticParams::new(1, 2);
        let obj = make_quadratic_suite(&p, &mut RngFactory::new(3).stream("suite")).unwrap();
        let w = vec![1.0, -1.0];
        let eta_l = 0.3;
        let spec = LocalTrainSpec { k: 2, eta_l };
        let mut rng = RngFactory::new(4).stream("noise:client:0");
        let delta = local_train(&obj, 0, &w, &spec, &mut rng).unwrap();
        let g0 = obj.true_gradient(0, &w).unwrap();
        let mut w1 = w.clone();
        vecmath::axpy(&mut w1, -eta_l, &g0);
        let g1 = obj.true_gradient(0, &w1).unwrap();
        for k in 0..2 {
            assert_relative_eq!(delta[k], eta_l * (g0[k] + g1[k]), epsilon = 1e-14);
        }
    }

    #[test]
    fn local_train_zero_eta_l_is_zero() {
        let p = QuadraticParams::new(1, 2);
        let obj = make_quadratic_suite(&p, &mut RngFactory::new(5).stream("suite")).unwrap();
        let spec = LocalTrainSpec { k: 1, eta_l: 0.0 };
        let mut rng = RngFactory::new(6).stream("noise:client:0");
        let delta = local_train(&obj, 0, &[0.5, 0.5], &spec, &mut rng).unwrap();
        assert_eq!(delta, vec![0.0, 0.0]);
    }

    #[test]
    fn validation_catches_misconfiguration() {
        let mut spec = AggregatorSpec::new(AggregatorKind::Aced);
        assert!(validate_aggregator(&spec, 4)
            .iter()
            .any(|m| m.contains("tau_algo")));
        spec = AggregatorSpec::new(AggregatorKind::FedBuff);
        assert!(validate_aggregator(&spec, 4)
            .iter()
            .any(|m| m.contains("buffer")));
        spec = AggregatorSpec::with_buffer(AggregatorKind::FedBuff, 9, 2);
        assert!(validate_aggregator(&spec, 4)
            .iter()
            .any(|m| m.contains("M must be in [1, n]")));
        spec = AggregatorSpec::new(AggregatorKind::VanillaAsgd);
        spec.local.k = 3;
        assert!(validate_aggregator(&spec, 4)
            .iter()
            .any(|m| m.contains("requires K=1")));
        spec = AggregatorSpec::new(AggregatorKind::FedBuff);
        spec.buffer = Some(BufferConfig { m: 2, concurrency: 2, blocking: false });
        spec.quantize8 = true;
        assert!(validate_aggregator(&spec, 4)
            .iter()
            .any(|m| m.contains("quantize8")));
    }
}
