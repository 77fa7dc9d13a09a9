//! Discrete-event engine mapping wall-clock client compute durations onto
//! server-iteration staleness.
//!
//! The wall clock exists only to order arrivals: staleness is always counted
//! in server iterations between the dispatch of a model version and the
//! consumption of the gradient computed on it. One arrival is one aggregator
//! delivery; the aggregator decides whether a server iteration occurs.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::aggregators::{
    local_train, Aggregator, AggregatorKind, AggregatorSpec, Arrival, UpdateDecision,
};
use crate::config::{resolve_step_size, validate_config, ModelState, RunConfig};
use crate::objectives::ObjectiveSpec;
use crate::probe::{decompose_error, ErrorDecomposition, ModelHistory};
use crate::rng::{RngFactory, RngStream};
use crate::vecmath;
use crate::{Error, Result};

/// Wall-clock duration model for client computations.
///
/// The `Exponential` kind draws a persistent per-client mean first:
/// `m_i = 1 + Exp(beta - 1)`, anchored so one time unit is a fast client's
/// compute, then samples each task duration from Exp(mean `m_i`). Client
/// speeds therefore differ persistently — the faster clients report more
/// often — while the duration marginal keeps mean `beta`.
#[derive(Debug, Clone, PartialEq)]
pub enum DelayModel {
    Constant { beta: f64 },
    Exponential { beta: f64 },
    PerClientConstant { durations: Vec<f64> },
}

impl DelayModel {
    pub fn validate(&self, n_clients: usize) -> Vec<String> {
        let mut v = Vec::new();
        match self {
            DelayModel::Constant { beta } => {
                if !(*beta > 0.0) {
                    v.push("constant delay beta must be > 0".to_string());
                }
            }
            DelayModel::Exponential { beta } => {
                if !(*beta >= 1.0) {
                    v.push(
                        "exponential delay beta must be >= 1 (one unit is a fast client's compute)"
                            .to_string(),
                    );
                }
            }
            DelayModel::PerClientConstant { durations } => {
                if durations.len() != n_clients {
                    v.push(format!(
                        "per_client durations has {} entries for {} clients",
                        durations.len(),
                        n_clients
                    ));
                }
                if durations.iter().any(|d| !(*d > 0.0)) {
                    v.push("per_client durations must all be > 0".to_string());
                }
            }
        }
        v
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            DelayModel::Constant { .. } => "constant",
            DelayModel::Exponential { .. } => "exponential",
            DelayModel::PerClientConstant { .. } => "per_client_constant",
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            DelayModel::Constant { beta } | DelayModel::Exponential { beta } => *beta,
            DelayModel::PerClientConstant { durations } => {
                durations.iter().sum::<f64>() / durations.len().max(1) as f64
            }
        }
    }
}

/// Stateful per-client duration sampler; the k-th draw for a client is
/// deterministic given (seed, client, k).
pub struct DelaySampler {
    model: DelayModel,
    client_means: Vec<f64>,
    streams: Vec<RngStream>,
}

impl DelaySampler {
    pub fn new(model: DelayModel, n_clients: usize, factory: &RngFactory) -> Result<Self> {
        let violations = model.validate(n_clients);
        if !violations.is_empty() {
            return Err(Error::Config(violations.join("; ")));
        }
        let client_means = match &model {
            DelayModel::Exponential { beta } => {
                let mut rates = factory.stream("delay:rates");
                (0..n_clients)
                    .map(|_| {
                        if *beta > 1.0 {
                            1.0 + rates.gen_exponential(*beta - 1.0)
                        } else {
                            1.0
                        }
                    })
                    .collect()
            }
            _ => vec![0.0; n_clients],
        };
        let streams = (0..n_clients)
            .map(|i| factory.stream(&format!("delay:client:{i}")))
            .collect();
        Ok(Self {
            model,
            client_means,
            streams,
        })
    }

    pub fn sample(&mut self, client: usize) -> f64 {
        match &self.model {
            DelayModel::Constant { beta } => *beta,
            DelayModel::PerClientConstant { durations } => durations[client],
            DelayModel::Exponential { .. } => {
                self.streams[client].gen_exponential(self.client_means[client])
            }
        }
    }

    pub fn client_mean(&self, client: usize) -> f64 {
        match &self.model {
            DelayModel::Constant { beta } => *beta,
            DelayModel::PerClientConstant { durations } => durations[client],
            DelayModel::Exponential { .. } => self.client_means[client],
        }
    }
}

/// Completion event; the queue pops in (time, client, seq) order.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Event {
    time: f64,
    client: usize,
    seq: u64,
}

impl Eq for Event {}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time
            .total_cmp(&other.time)
            .then(self.client.cmp(&other.client))
            .then(self.seq.cmp(&other.seq))
    }
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// What gets measured at every server iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct IterRecord {
    pub t: u64,
    pub grad_norm_sq: f64,
    pub objective: f64,
    pub eta_t: f64,
    pub n_t: usize,
    pub max_staleness: u64,
    pub comms_total: u64,
    /// Client whose arrival triggered this iteration (not exported).
    pub reporter: usize,
}

/// Probe configuration for a run.
#[derive(Debug, Clone, Copy, Default)]
pub struct ProbeSpec {
    /// Compute the per-iteration error decomposition (requires K=1). One
    /// entry per iteration that applies an update; skipped iterations have
    /// no update to decompose.
    pub decompose: bool,
    /// Keep every emitted update vector (for equivalence tests).
    pub collect_updates: bool,
}

/// Immutable result of one run.
#[derive(Debug, Clone)]
pub struct RunTrace {
    pub records: Vec<IterRecord>,
    pub final_model: ModelState,
    pub starved: bool,
    pub comms_total: u64,
    pub eta_base: f64,
    pub decompositions: Vec<ErrorDecomposition>,
    pub updates: Vec<Vec<f64>>,
    pub ca2fl_max_cache_gap: Option<f64>,
    pub cache_entry_bytes: Option<usize>,
}

impl RunTrace {
    pub fn mean_n_t(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().map(|r| r.n_t as f64).sum::<f64>() / self.records.len() as f64
    }

    pub fn max_staleness(&self) -> u64 {
        self.records.iter().map(|r| r.max_staleness).max().unwrap_or(0)
    }
}

struct ClientSlot {
    dropped: bool,
    computing: bool,
    parked: bool,
    dispatch_iter: u64,
    pending: Option<Vec<f64>>,
    seq: u64,
    /// Basis of the latest gradient actually delivered; iteration 0 until
    /// the first delivery (everyone starts from the initial model).
    probe_basis: u64,
    preempted_for: Option<u64>,
}

/// Run one simulation to `cfg.total_iters` recorded server iterations.
pub fn run_simulation(
    cfg: &RunConfig,
    obj: &ObjectiveSpec,
    agg_spec: &AggregatorSpec,
    delays: &DelayModel,
    probe: Option<ProbeSpec>,
) -> Result<RunTrace> {
    let violations = validate_config(cfg);
    if !violations.is_empty() {
        return Err(Error::Config(violations.join("; ")));
    }
    if obj.n_clients() != cfg.n_clients {
        return Err(Error::Config(format!(
            "objective has {} clients, config {}",
            obj.n_clients(),
            cfg.n_clients
        )));
    }
    if obj.dim() != cfg.dim {
        return Err(Error::Dimension {
            expected: cfg.dim,
            got: obj.dim(),
        });
    }
    if cfg.enforce_tau_cap
        && !matches!(
            agg_spec.kind,
            AggregatorKind::AceDirect | AggregatorKind::Aced
        )
    {
        return Err(Error::Config(
            "tau cap enforcement applies to cached aggregation (ace_direct, aced) only"
                .to_string(),
        ));
    }
    let probe = probe.unwrap_or_default();
    if probe.decompose && agg_spec.local.k != 1 {
        return Err(Error::ProbeLocalSteps(agg_spec.local.k));
    }

    let n = cfg.n_clients;
    let t_total = cfg.total_iters;
    let eta = resolve_step_size(cfg.eta_rule, n, t_total)?;
    let factory = RngFactory::new(cfg.seed);
    let mut sampler = DelaySampler::new(delays.clone(), n, &factory)?;
    let mut noise: Vec<RngStream> = (0..n)
        .map(|i| factory.stream(&format!("noise:client:{i}")))
        .collect();
    let mut quant_rng = factory.stream("quant");
    let mut sched_rng = factory.stream("sched");

    let mut agg = Aggregator::new(agg_spec.clone(), n, cfg.dim)?;
    let mut model = ModelState::zeros(cfg.dim);
    let mut history = if probe.decompose {
        let capacity = (2 * cfg.tau_max_admin + 1) as usize;
        let mut h = ModelHistory::new(capacity);
        h.push(0, model.weights.clone());
        Some(h)
    } else {
        None
    };

    let mut slots: Vec<ClientSlot> = (0..n)
        .map(|_| ClientSlot {
            dropped: false,
            computing: false,
            parked: false,
            dispatch_iter: 0,
            pending: None,
            seq: 0,
            probe_basis: 0,
            preempted_for: None,
        })
        .collect();
    let mut queue: BinaryHeap<std::cmp::Reverse<Event>> = BinaryHeap::new();
    let mut comms: u64 = 0;
    let cap = cfg.enforce_tau_cap.then_some(cfg.tau_max_admin);

    // Initialization. ACE-family kinds run a synchronous seeding round on
    // w^0, apply u^0, and dispatch everyone with the resulting model (their
    // dispatch marks start at iteration 1). Other kinds dispatch their
    // initial wave on w^0 with no model update.
    let blocking = agg_spec.buffer.map(|b| b.blocking).unwrap_or(false);
    if agg_spec.kind.seeds_cache() {
        let mut seeds = Vec::with_capacity(n);
        for (i, stream) in noise.iter_mut().enumerate() {
            let update = local_train(obj, i, &model.weights, &agg_spec.local, stream)?;
            seeds.push(Arrival {
                client: i,
                update,
                basis_iter: 0,
            });
        }
        comms += n as u64;
        let u0 = agg.seed_round(seeds, &mut quant_rng)?;
        vecmath::axpy(&mut model.weights, -eta, &u0);
        if !model.is_finite() {
            return Err(Error::NonFinite(0));
        }
        model.iter = 1;
        if let Some(h) = history.as_mut() {
            h.push(1, model.weights.clone());
        }
        for i in 0..n {
            dispatch(
                i, &mut slots, &mut queue, 0.0, &model, obj, agg_spec, &mut noise, &mut sampler,
            )?;
        }
    } else {
        let wave = if agg_spec.kind.is_buffered() {
            let m_c = agg_spec.buffer.expect("validated").concurrency;
            sample_distinct(n, m_c, &mut sched_rng)
        } else {
            (0..n).collect()
        };
        comms += wave.len() as u64;
        for i in wave {
            dispatch(
                i, &mut slots, &mut queue, 0.0, &model, obj, agg_spec, &mut noise, &mut sampler,
            )?;
        }
    }

    let mut records: Vec<IterRecord> = Vec::with_capacity(t_total as usize);
    let mut decompositions: Vec<ErrorDecomposition> = Vec::new();
    let mut updates: Vec<Vec<f64>> = Vec::new();
    let mut dropout_cursor = 0usize;
    let mut starved = false;

    while (records.len() as u64) < t_total {
        // Dropouts due at this recorded iteration take effect now; their
        // pending events become stale and are skipped at pop.
        while dropout_cursor < cfg.dropout_schedule.len()
            && cfg.dropout_schedule[dropout_cursor].at_iter <= records.len() as u64
        {
            let client = cfg.dropout_schedule[dropout_cursor].client;
            slots[client].dropped = true;
            slots[client].computing = false;
            slots[client].pending = None;
            dropout_cursor += 1;
        }

        // Preemptive refresh under the administrative cap: a client whose
        // cached basis is about to exceed the cap recomputes on the current
        // model immediately.
        if let Some(cap) = cap {
            let version = model.iter;
            for i in 0..n {
                let slot = &slots[i];
                if slot.dropped || !slot.computing {
                    continue;
                }
                let age = version.saturating_sub(slot.probe_basis);
                if age + 1 >= cap && slot.preempted_for != Some(slot.probe_basis) {
                    let basis_mark = slots[i].probe_basis;
                    let now = queue.peek().map(|e| e.0.time).unwrap_or(0.0);
                    slots[i].computing = false;
                    slots[i].pending = None;
                    dispatch_at(
                        i, &mut slots, &mut queue, now, 0.0, &model, obj, agg_spec, &mut noise,
                    )?;
                    slots[i].preempted_for = Some(basis_mark);
                }
            }
        }

        // Pop the earliest valid completion.
        let event = loop {
            match queue.pop() {
                None => break None,
                Some(std::cmp::Reverse(e)) => {
                    let slot = &slots[e.client];
                    if slot.dropped || !slot.computing || slot.seq != e.seq {
                        continue; // stale or dropped event
                    }
                    break Some(e);
                }
            }
        };
        let Some(event) = event else {
            starved = true;
            break;
        };
        let now = event.time;
        let client = event.client;
        let slot = &mut slots[client];
        slot.computing = false;
        let update = slot.pending.take().expect("computing client has a pending update");
        let basis_iter = slot.dispatch_iter;
        let arrival = Arrival {
            client,
            update,
            basis_iter,
        };
        comms += 1;
        let t_pre = model.iter;
        slots[client].probe_basis = basis_iter;
        let decision = agg.deliver_capped(arrival, t_pre, eta, &mut quant_rng, cap)?;

        match decision {
            UpdateDecision::Accumulated => {}
            UpdateDecision::Emit {
                update,
                n_participants,
                max_staleness,
            } => {
                let (value, grad) = obj.global_objective_and_gradient(&model.weights)?;
                let eta_t = update.as_ref().map(|u| u.eta_t).unwrap_or(eta);
                records.push(IterRecord {
                    t: t_pre,
                    grad_norm_sq: vecmath::norm_sq(&grad),
                    objective: value,
                    eta_t,
                    n_t: n_participants,
                    max_staleness,
                    comms_total: comms,
                    reporter: client,
                });
                if let Some(emitted) = update {
                    if probe.decompose {
                        let h = history.as_ref().expect("history allocated when probing");
                        let basis: Vec<u64> = slots.iter().map(|s| s.probe_basis).collect();
                        let decomp = decompose_error(
                            &emitted.u,
                            &emitted.replay,
                            obj,
                            h,
                            &basis,
                            &model.weights,
                            t_pre,
                        )?;
                        decompositions.push(decomp);
                    }
                    if probe.collect_updates {
                        updates.push(emitted.u.clone());
                    }
                    vecmath::axpy(&mut model.weights, -emitted.eta_t, &emitted.u);
                    if !model.is_finite() {
                        return Err(Error::NonFinite(t_pre));
                    }
                }
                model.iter += 1;
                if let Some(h) = history.as_mut() {
                    h.push(model.iter, model.weights.clone());
                }
                if blocking {
                    // Re-dispatch everyone parked during this buffer window.
                    slots[client].parked = true;
                    for i in 0..n {
                        if slots[i].parked && !slots[i].dropped {
                            slots[i].parked = false;
                            dispatch(
                                i, &mut slots, &mut queue, now, &model, obj, agg_spec,
                                &mut noise, &mut sampler,
                            )?;
                        }
                    }
                    continue;
                }
            }
        }

        // Hand out the current model: buffered kinds sample the next client
        // uniformly from the idle pool, everyone else re-dispatches the
        // reporter.
        if blocking {
            slots[client].parked = true;
        } else if agg_spec.kind.is_buffered() {
            let idle: Vec<usize> = (0..n)
                .filter(|&i| !slots[i].dropped && !slots[i].computing)
                .collect();
            if !idle.is_empty() {
                let next = idle[sched_rng.gen_index(idle.len())];
                dispatch(
                    next, &mut slots, &mut queue, now, &model, obj, agg_spec, &mut noise,
                    &mut sampler,
                )?;
            }
        } else if !slots[client].dropped {
            dispatch(
                client, &mut slots, &mut queue, now, &model, obj, agg_spec, &mut noise,
                &mut sampler,
            )?;
        }
    }

    Ok(RunTrace {
        records,
        starved,
        comms_total: comms,
        eta_base: eta,
        decompositions,
        updates,
        ca2fl_max_cache_gap: (agg_spec.kind == AggregatorKind::Ca2fl)
            .then(|| agg.ca2fl_max_cache_gap()),
        cache_entry_bytes: agg.cache_entry_bytes(),
        final_model: model,
    })
}

#[allow(clippy::too_many_arguments)]
fn dispatch(
    client: usize,
    slots: &mut [ClientSlot],
    queue: &mut BinaryHeap<std::cmp::Reverse<Event>>,
    now: f64,
    model: &ModelState,
    obj: &ObjectiveSpec,
    agg_spec: &AggregatorSpec,
    noise: &mut [RngStream],
    sampler: &mut DelaySampler,
) -> Result<()> {
    let duration = sampler.sample(client);
    dispatch_at(client, slots, queue, now, duration, model, obj, agg_spec, noise)
}

/// Dispatch with an explicit duration (0 for preemptive refresh: the forced
/// completion fires before any strictly later event).
#[allow(clippy::too_many_arguments)]
fn dispatch_at(
    client: usize,
    slots: &mut [ClientSlot],
    queue: &mut BinaryHeap<std::cmp::Reverse<Event>>,
    now: f64,
    duration: f64,
    model: &ModelState,
    obj: &ObjectiveSpec,
    agg_spec: &AggregatorSpec,
    noise: &mut [RngStream],
) -> Result<()> {
    let slot = &mut slots[client];
    debug_assert!(!slot.computing && !slot.dropped);
    slot.dispatch_iter = model.iter;
    // The gradient is computed eagerly on the dispatched model; the draw
    // sequence per client depends only on how many tasks it has run.
    slot.pending = Some(local_train(
        obj,
        client,
        &model.weights,
        &agg_spec.local,
        &mut noise[client],
    )?);
    slot.seq += 1;
    slot.computing = true;
    queue.push(std::cmp::Reverse(Event {
        time: now + duration,
        client,
        seq: slot.seq,
    }));
    Ok(())
}

/// Partial Fisher-Yates: the first `k` of a shuffled 0..n.
fn sample_distinct(n: usize, k: usize, rng: &mut RngStream) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..n).collect();
    for i in 0..k.min(n) {
        let j = i + rng.gen_index(n - i);
        ids.swap(i, j);
    }
    ids.truncate(k.min(n));
    ids
}
