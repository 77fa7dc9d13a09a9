//! Experiment planning and execution for the `aflsim` binary.
//!
//! Options come from a flat `key = value` config file overridden by command
//! line flags. A plan is a deterministic list of fully resolved runs, each
//! identified by a content hash of its resolved configuration; executing a
//! plan is idempotent (finished run ids are skipped) and runs may execute
//! concurrently since every run owns its output directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::aggregators::{
    AggregatorKind, AggregatorSpec, BufferConfig, DelayAdaptiveConfig, LocalTrainSpec,
};
use crate::config::{DropoutEntry, RunConfig, StepSizeRule};
use crate::delaysim::{run_simulation, DelayModel, ProbeSpec};
use crate::metrics::{scaling_check, summarize, summary_text, RunSummary, ScalingReport};
use crate::objectives::{
    make_logistic_suite_resampling, make_quadratic_suite, NoiseModel, NoiseSpec, ObjectiveSpec,
    QuadraticParams,
};
use crate::output::{
    decomposition_csv_bytes, sha256_hex, trace_csv_bytes, write_atomic,
};
use crate::partition::{synth_classification_dataset, Partition};
use crate::probe::check_mse_chain;
use crate::rng::RngFactory;
use crate::{Error, Result};

fn usage(msg: impl Into<String>) -> Error {
    Error::Usage(msg.into())
}

/// Layered flat options: file values overridden by flag values.
#[derive(Debug, Clone, Default)]
pub struct Options {
    map: BTreeMap<String, String>,
}

impl Options {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parse `key = value` lines; '#' starts a comment.
    pub fn parse_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut opts = Self::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(usage(format!(
                    "{}:{}: expected 'key = value', got '{raw}'",
                    path.display(),
                    lineno + 1
                )));
            };
            opts.map
                .insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(opts)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.map.insert(key.to_string(), value.to_string());
    }

    /// Overlay `other` on top of self (command line wins over file).
    pub fn overlay(&mut self, other: &Options) {
        for (k, v) in &other.map {
            self.map.insert(k.clone(), v.clone());
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|s| s.as_str())
    }

    fn parse_with<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.map.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|_| usage(format!("option '{key}' has invalid value '{raw}'"))),
        }
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        Ok(self.parse_with::<f64>(key)?.unwrap_or(default))
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64> {
        Ok(self.parse_with::<u64>(key)?.unwrap_or(default))
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        Ok(self.parse_with::<usize>(key)?.unwrap_or(default))
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        match self.map.get(key).map(|s| s.as_str()) {
            None => Ok(default),
            Some("true") | Some("1") | Some("yes") => Ok(true),
            Some("false") | Some("0") | Some("no") => Ok(false),
            Some(raw) => Err(usage(format!(
                "option '{key}' must be a boolean, got '{raw}'"
            ))),
        }
    }

    pub fn str_or(&self, key: &str, default: &str) -> String {
        self.map
            .get(key)
            .cloned()
            .unwrap_or_else(|| default.to_string())
    }

    /// Comma-separated list of T values, e.g. "2000,4000".
    pub fn list_f64(&self, key: &str, default: &[f64]) -> Result<Vec<f64>> {
        match self.map.get(key) {
            None => Ok(default.to_vec()),
            Some(raw) => raw
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|_| usage(format!("option '{key}' has invalid entry '{s}'")))
                })
                .collect(),
        }
    }

    pub fn list_u64(&self, key: &str, default: &[u64]) -> Result<Vec<u64>> {
        match self.map.get(key) {
            None => Ok(default.to_vec()),
            Some(raw) => raw
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<u64>()
                        .map_err(|_| usage(format!("option '{key}' has invalid entry '{s}'")))
                })
                .collect(),
        }
    }
}

/// Suite construction parameters, resolved but not yet built.
#[derive(Debug, Clone, PartialEq)]
pub enum SuiteConfig {
    Quadratic {
        hetero: f64,
        condition: f64,
        l_max: f64,
        sigma2: f64,
    },
    Logistic {
        classes: usize,
        d_feat: usize,
        size: usize,
        sep: f64,
        alpha: f64,
        ridge: f64,
        batch: usize,
    },
}

impl SuiteConfig {
    pub fn dim(&self, explicit_dim: usize) -> usize {
        match self {
            SuiteConfig::Quadratic { .. } => explicit_dim,
            SuiteConfig::Logistic { classes, d_feat, .. } => classes * d_feat,
        }
    }

    /// Build the objective for one run seed.
    pub fn build(
        &self,
        n_clients: usize,
        dim: usize,
        seed: u64,
    ) -> Result<(ObjectiveSpec, Option<Partition>)> {
        let factory = RngFactory::new(seed);
        match self {
            SuiteConfig::Quadratic {
                hetero,
                condition,
                l_max,
                sigma2,
            } => {
                let mut p = QuadraticParams::new(n_clients, dim);
                p.hetero = *hetero;
                p.condition = *condition;
                p.l_max = *l_max;
                p.noise = NoiseSpec::gaussian(*sigma2);
                let obj = make_quadratic_suite(&p, &mut factory.stream("suite"))?;
                Ok((obj, None))
            }
            SuiteConfig::Logistic {
                classes,
                d_feat,
                size,
                sep,
                alpha,
                ridge,
                batch,
            } => {
                let dataset = synth_classification_dataset(
                    *classes,
                    *d_feat,
                    *size,
                    *sep,
                    &mut factory.stream("dataset"),
                )?;
                let noise = NoiseSpec {
                    sigma2: 0.0,
                    model: NoiseModel::Minibatch { batch: *batch },
                };
                let (obj, partition) = make_logistic_suite_resampling(
                    &dataset, *alpha, n_clients, *ridge, noise, &factory,
                )?;
                Ok((obj, Some(partition)))
            }
        }
    }

    fn echo(&self, out: &mut Vec<(String, String)>) {
        match self {
            SuiteConfig::Quadratic {
                hetero,
                condition,
                l_max,
                sigma2,
            } => {
                out.push(("suite.kind".into(), "quadratic".into()));
                out.push(("suite.hetero".into(), format!("{hetero:e}")));
                out.push(("suite.condition".into(), format!("{condition:e}")));
                out.push(("suite.l_max".into(), format!("{l_max:e}")));
                out.push(("suite.sigma2".into(), format!("{sigma2:e}")));
            }
            SuiteConfig::Logistic {
                classes,
                d_feat,
                size,
                sep,
                alpha,
                ridge,
                batch,
            } => {
                out.push(("suite.kind".into(), "logistic".into()));
                out.push(("suite.classes".into(), classes.to_string()));
                out.push(("suite.d_feat".into(), d_feat.to_string()));
                out.push(("suite.size".into(), size.to_string()));
                out.push(("suite.sep".into(), format!("{sep:e}")));
                out.push(("suite.alpha".into(), format!("{alpha:e}")));
                out.push(("suite.ridge".into(), format!("{ridge:e}")));
                out.push(("suite.batch".into(), batch.to_string()));
            }
        }
    }

    /// Heterogeneity level used for comparison-table labelling.
    pub fn level(&self) -> f64 {
        match self {
            SuiteConfig::Quadratic { hetero, .. } => *hetero,
            SuiteConfig::Logistic { alpha, .. } => *alpha,
        }
    }
}

/// One fully resolved run.
#[derive(Debug, Clone)]
pub struct RunSetup {
    pub run_id: String,
    pub cfg: RunConfig,
    pub agg: AggregatorSpec,
    pub delay: DelayModel,
    pub suite: SuiteConfig,
    pub probe: Option<ProbeSpec>,
    pub echo: String,
}

/// A deterministic list of runs plus execution settings.
#[derive(Debug, Clone)]
pub struct ExperimentPlan {
    pub runs: Vec<RunSetup>,
    pub out_dir: PathBuf,
    pub jobs: usize,
}

fn resolve_aggregator(opts: &Options, kind_name: &str, n: usize) -> Result<AggregatorSpec> {
    let kind = AggregatorKind::parse(kind_name)
        .ok_or_else(|| usage(format!("unknown aggregator kind '{kind_name}' (--algo)")))?;
    let mut spec = AggregatorSpec::new(kind);
    spec.local = LocalTrainSpec {
        k: opts.u64_or("aggregator.K", 1)? as u32,
        eta_l: opts.f64_or("aggregator.eta_l", 1.0)?,
    };
    spec.quantize8 = opts.bool_or("aggregator.quantize8", false)?;
    match kind {
        AggregatorKind::Aced => {
            let tau = opts
                .parse_with::<u64>("aggregator.tau_algo")?
                .ok_or_else(|| usage("aced requires --tau-algo"))?;
            spec.aced = Some(crate::aggregators::AcedConfig { tau_algo: tau });
        }
        AggregatorKind::FedBuff | AggregatorKind::Ca2fl => {
            let m = opts
                .parse_with::<usize>("aggregator.M")?
                .ok_or_else(|| usage(format!("{kind_name} requires --buffer-M")))?;
            let concurrency = opts.usize_or("aggregator.concurrency", n.min(2 * m))?;
            spec.buffer = Some(BufferConfig {
                m,
                concurrency,
                blocking: opts.bool_or("aggregator.blocking", false)?,
            });
        }
        AggregatorKind::DelayAdaptiveAsgd => {
            spec.delay_adaptive = Some(DelayAdaptiveConfig {
                tau_c: opts.u64_or("aggregator.tau_C", n as u64)?,
                l_est: opts.f64_or("aggregator.L_est", 1.0)?,
            });
        }
        _ => {}
    }
    let violations = crate::aggregators::validate_aggregator(&spec, n);
    if !violations.is_empty() {
        return Err(usage(violations.join("; ")));
    }
    Ok(spec)
}

fn resolve_suite(opts: &Options) -> Result<SuiteConfig> {
    match opts.str_or("suite.kind", "quadratic").as_str() {
        "quadratic" => Ok(SuiteConfig::Quadratic {
            hetero: opts.f64_or("suite.hetero", 1.0)?,
            condition: opts.f64_or("suite.condition", 10.0)?,
            l_max: opts.f64_or("suite.l_max", 0.5)?,
            sigma2: opts.f64_or("suite.sigma2", 0.0)?,
        }),
        // Ten classes keep low-alpha Dirichlet partitions feasible: with few
        // classes a client empty in every class is near-certain at alpha=0.1
        // and the bounded re-sampling policy would reject every draw.
        "logistic" => Ok(SuiteConfig::Logistic {
            classes: opts.usize_or("suite.classes", 10)?,
            d_feat: opts.usize_or("suite.d_feat", 5)?,
            size: opts.usize_or("suite.size", 2000)?,
            sep: opts.f64_or("suite.sep", 4.0)?,
            alpha: opts.f64_or("suite.alpha", 0.3)?,
            ridge: opts.f64_or("suite.ridge", 0.02)?,
            batch: opts.usize_or("suite.batch", 8)?,
        }),
        other => Err(usage(format!("unknown suite.kind '{other}'"))),
    }
}

fn resolve_delay(opts: &Options) -> Result<DelayModel> {
    let beta = opts.f64_or("delay.beta", 5.0)?;
    match opts.str_or("delay.kind", "exponential").as_str() {
        "exponential" => Ok(DelayModel::Exponential { beta }),
        "constant" => Ok(DelayModel::Constant { beta }),
        "per_client_constant" => {
            let list = opts
                .get("delay.per_client")
                .ok_or_else(|| usage("per_client_constant requires delay.per_client"))?;
            let durations = list
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|_| usage(format!("bad delay.per_client entry '{s}'")))
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok(DelayModel::PerClientConstant { durations })
        }
        other => Err(usage(format!("unknown delay.kind '{other}'"))),
    }
}

/// Parse "FRAC@ITER" and resolve the dropped client set from the run seed.
fn resolve_dropout(
    spec: &str,
    n_clients: usize,
    seed: u64,
) -> Result<Vec<DropoutEntry>> {
    let (frac_s, iter_s) = spec
        .split_once('@')
        .ok_or_else(|| usage(format!("--dropout expects FRAC@ITER, got '{spec}'")))?;
    let frac: f64 = frac_s
        .parse()
        .map_err(|_| usage(format!("bad dropout fraction '{frac_s}'")))?;
    let at_iter: u64 = iter_s
        .parse()
        .map_err(|_| usage(format!("bad dropout iteration '{iter_s}'")))?;
    if !(0.0..=1.0).contains(&frac) {
        return Err(usage("dropout fraction must be in [0, 1]"));
    }
    Ok(sample_dropout(n_clients, frac, at_iter, seed))
}

/// Drop a uniformly sampled fraction of clients at one iteration; the set is
/// deterministic per seed (stream "dropout").
pub fn sample_dropout(
    n_clients: usize,
    frac: f64,
    at_iter: u64,
    seed: u64,
) -> Vec<DropoutEntry> {
    let count = ((frac * n_clients as f64).floor() as usize).min(n_clients);
    let mut stream = RngFactory::new(seed).stream("dropout");
    let mut ids: Vec<usize> = (0..n_clients).collect();
    for i in 0..count {
        let j = i + stream.gen_index(n_clients - i);
        ids.swap(i, j);
    }
    ids.truncate(count);
    ids.sort_unstable();
    ids.into_iter()
        .map(|client| DropoutEntry { client, at_iter })
        .collect()
}

/// Resolve one run from flat options plus per-run overrides.
#[allow(clippy::too_many_arguments)]
fn resolve_run(
    opts: &Options,
    algo: &str,
    seed: u64,
    t_total: u64,
    beta_override: Option<f64>,
    level_override: Option<f64>,
    tau_algo_override: Option<u64>,
    probe: bool,
) -> Result<RunSetup> {
    let mut local = opts.clone();
    if let Some(beta) = beta_override {
        local.set("delay.beta", beta);
    }
    if let Some(level) = level_override {
        match local.str_or("suite.kind", "quadratic").as_str() {
            "logistic" => local.set("suite.alpha", level),
            _ => local.set("suite.hetero", level),
        }
    }
    if let Some(tau) = tau_algo_override {
        local.set("aggregator.tau_algo", tau);
    }

    let n = local.usize_or("n", 20)?;
    let suite = resolve_suite(&local)?;
    let dim = suite.dim(local.usize_or("dim", 10)?);
    let agg = resolve_aggregator(&local, algo, n)?;
    let delay = resolve_delay(&local)?;

    let mut cfg = RunConfig::new(n, t_total, dim, seed);
    cfg.eta_rule = match local.str_or("eta.kind", "sqrt_n_over_T").as_str() {
        "constant" => StepSizeRule::Constant {
            c: local.f64_or("eta.c", 0.05)?,
        },
        "sqrt_n_over_T" => StepSizeRule::SqrtNOverT {
            c: local.f64_or("eta.c", 0.2)?,
        },
        other => return Err(usage(format!("unknown eta.kind '{other}'"))),
    };
    cfg.tau_max_admin = local.u64_or("tau_max_admin", t_total.max(1))?;
    cfg.enforce_tau_cap = local.bool_or("enforce_tau_cap", false)?;
    if let Some(spec) = local.get("dropout") {
        cfg.dropout_schedule = resolve_dropout(spec, n, seed)?;
    }

    let violations = crate::config::validate_config(&cfg);
    if !violations.is_empty() {
        return Err(usage(violations.join("; ")));
    }

    let probe_spec = probe.then_some(ProbeSpec {
        decompose: true,
        collect_updates: false,
    });

    let echo = config_echo(&cfg, &agg, &delay, &suite, probe);
    let run_id = sha256_hex(echo.as_bytes())[..16].to_string();
    Ok(RunSetup {
        run_id,
        cfg,
        agg,
        delay,
        suite,
        probe: probe_spec,
        echo,
    })
}

/// Canonical resolved-config text; the run id is its content hash.
fn config_echo(
    cfg: &RunConfig,
    agg: &AggregatorSpec,
    delay: &DelayModel,
    suite: &SuiteConfig,
    probe: bool,
) -> String {
    let mut kv: Vec<(String, String)> = vec![
        ("n".into(), cfg.n_clients.to_string()),
        ("T".into(), cfg.total_iters.to_string()),
        ("dim".into(), cfg.dim.to_string()),
        ("seed".into(), cfg.seed.to_string()),
        ("tau_max_admin".into(), cfg.tau_max_admin.to_string()),
        ("enforce_tau_cap".into(), cfg.enforce_tau_cap.to_string()),
        ("eta.kind".into(), cfg.eta_rule.kind_name().to_string()),
        ("eta.c".into(), format!("{:e}", cfg.eta_rule.coefficient())),
        ("aggregator.kind".into(), agg.kind.name().to_string()),
        ("aggregator.K".into(), agg.local.k.to_string()),
        ("aggregator.eta_l".into(), format!("{:e}", agg.local.eta_l)),
        ("aggregator.quantize8".into(), agg.quantize8.to_string()),
        ("delay.kind".into(), delay.kind_name().to_string()),
        ("probe".into(), probe.to_string()),
    ];
    if let Some(c) = agg.aced {
        kv.push(("aggregator.tau_algo".into(), c.tau_algo.to_string()));
    }
    if let Some(b) = agg.buffer {
        kv.push(("aggregator.M".into(), b.m.to_string()));
        kv.push(("aggregator.concurrency".into(), b.concurrency.to_string()));
        kv.push(("aggregator.blocking".into(), b.blocking.to_string()));
    }
    if let Some(d) = agg.delay_adaptive {
        kv.push(("aggregator.tau_C".into(), d.tau_c.to_string()));
        kv.push(("aggregator.L_est".into(), format!("{:e}", d.l_est)));
    }
    match delay {
        DelayModel::Constant { beta } | DelayModel::Exponential { beta } => {
            kv.push(("delay.beta".into(), format!("{beta:e}")));
        }
        DelayModel::PerClientConstant { durations } => {
            let list: Vec<String> = durations.iter().map(|d| format!("{d:e}")).collect();
            kv.push(("delay.per_client".into(), list.join(",")));
        }
    }
    suite.echo(&mut kv);
    if !cfg.dropout_schedule.is_empty() {
        let entries: Vec<String> = cfg
            .dropout_schedule
            .iter()
            .map(|e| format!("{}@{}", e.client, e.at_iter))
            .collect();
        kv.push(("dropout.resolved".into(), entries.join(",")));
    }
    kv.sort();
    let mut out = String::new();
    for (k, v) in kv {
        out.push_str(&format!("{k} = {v}\n"));
    }
    out
}

fn seeds_list(opts: &Options) -> Result<Vec<u64>> {
    let base = opts.u64_or("seed", 1)?;
    let count = opts.u64_or("seeds", 1)?.max(1);
    Ok((0..count).map(|k| base + k).collect())
}

fn common_plan(opts: &Options, runs: Vec<RunSetup>) -> Result<ExperimentPlan> {
    Ok(ExperimentPlan {
        runs,
        out_dir: PathBuf::from(opts.str_or("out", "out")),
        jobs: opts.usize_or("jobs", 1)?.max(1),
    })
}

/// Plan a single run.
pub fn plan_run(opts: &Options) -> Result<ExperimentPlan> {
    let algo = opts.str_or("aggregator.kind", "ace_direct");
    let t_total = opts.u64_or("T", 500)?;
    let probe = opts.bool_or("probe", false)?;
    let mut runs = Vec::new();
    for seed in seeds_list(opts)? {
        runs.push(resolve_run(opts, &algo, seed, t_total, None, None, None, probe)?);
    }
    common_plan(opts, runs)
}

/// Plan the factorial sweep: algorithms x heterogeneity levels x delays x
/// seeds, in that (deterministic) nesting order.
pub fn plan_sweep(opts: &Options) -> Result<ExperimentPlan> {
    let algos: Vec<String> = match opts.get("algos") {
        Some(raw) => raw.split(',').map(|s| s.trim().to_string()).collect(),
        None => vec![
            "ace_direct".into(),
            "ace_incremental".into(),
            "aced".into(),
            "fedbuff".into(),
            "ca2fl".into(),
            "vanilla_asgd".into(),
        ],
    };
    let levels = opts.list_f64("levels", &[0.1, 0.3])?;
    let betas = opts.list_f64("betas", &[5.0, 30.0])?;
    let t_total = opts.u64_or("T", 500)?;
    let probe = opts.bool_or("probe", false)?;
    let mut runs = Vec::new();
    for algo in &algos {
        for &level in &levels {
            for &beta in &betas {
                for seed in seeds_list(opts)? {
                    runs.push(resolve_run(
                        opts,
                        algo,
                        seed,
                        t_total,
                        Some(beta),
                        Some(level),
                        None,
                        probe,
                    )?);
                }
            }
        }
    }
    common_plan(opts, runs)
}

/// Plan the convergence-scaling study over a T grid (ACE, sqrt step rule).
pub fn plan_scaling(opts: &Options) -> Result<ExperimentPlan> {
    let grid = opts.list_u64("t_grid", &[2000, 4000, 8000, 16000])?;
    let algo = opts.str_or("aggregator.kind", "ace_direct");
    let mut runs = Vec::new();
    for &t_total in &grid {
        for seed in seeds_list(opts)? {
            runs.push(resolve_run(opts, &algo, seed, t_total, None, None, None, false)?);
        }
    }
    common_plan(opts, runs)
}

/// Plan the tau_algo ablation under dropout (ACED).
pub fn plan_ablate_tau(opts: &Options) -> Result<ExperimentPlan> {
    let t_total = opts.u64_or("T", 500)?;
    let grid = opts.list_u64("tau_grid", &[1, 10, 50, 100 * (t_total / 500).max(1)])?;
    let frac = opts.f64_or("dropout_frac", 0.3)?;
    let at = opts.u64_or("dropout_at", t_total / 2)?;
    let mut local = opts.clone();
    local.set("dropout", format!("{frac}@{at}"));
    let mut runs = Vec::new();
    for &tau in &grid {
        for seed in seeds_list(opts)? {
            runs.push(resolve_run(
                &local,
                "aced",
                seed,
                t_total,
                None,
                None,
                Some(tau),
                false,
            )?);
        }
    }
    common_plan(opts, runs)
}

/// Plan a probed run (error decomposition exported per iteration).
pub fn plan_probe(opts: &Options) -> Result<ExperimentPlan> {
    let mut local = opts.clone();
    local.set("probe", "true");
    plan_run(&local)
}

/// One row of the comparison table.
#[derive(Debug, Clone)]
pub struct ComparisonRow {
    pub run_id: String,
    pub algo: String,
    pub suite: String,
    pub level: f64,
    pub beta: f64,
    pub seed: u64,
    pub n: usize,
    pub t_total: u64,
    pub summary: RunSummary,
}

/// Execution outcome across a plan.
#[derive(Debug)]
pub struct ExecReport {
    pub rows: Vec<ComparisonRow>,
    pub executed: usize,
    pub skipped: usize,
    pub starved: usize,
    pub probe_violations: usize,
    pub scaling: Option<ScalingReport>,
}

struct RunOutcome {
    row: ComparisonRow,
    executed: bool,
    starved: bool,
    violations: usize,
}

/// Execute every run in the plan (idempotently), write per-run artifacts and
/// the aggregated comparison table.
pub fn execute(plan: &ExperimentPlan) -> Result<ExecReport> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(plan.jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let outcomes: Result<Vec<RunOutcome>> = pool.install(|| {
        plan.runs
            .par_iter()
            .map(|setup| {
                execute_one(setup, &plan.out_dir).map_err(|e| match e {
                    Error::Usage(msg) => Error::Usage(format!("run {}: {msg}", setup.run_id)),
                    other => Error::Config(format!("run {}: {other}", setup.run_id)),
                })
            })
            .collect()
    });
    let outcomes = outcomes?;
    let mut rows: Vec<ComparisonRow> = outcomes.iter().map(|o| o.row.clone()).collect();
    rows.sort_by(|a, b| a.run_id.cmp(&b.run_id));
    write_comparison(&plan.out_dir.join("comparison.csv"), &rows)?;
    Ok(ExecReport {
        executed: outcomes.iter().filter(|o| o.executed).count(),
        skipped: outcomes.iter().filter(|o| !o.executed).count(),
        starved: outcomes.iter().filter(|o| o.starved).count(),
        probe_violations: outcomes.iter().map(|o| o.violations).sum(),
        scaling: None,
        rows,
    })
}

fn execute_one(setup: &RunSetup, out_dir: &Path) -> Result<RunOutcome> {
    let run_dir = out_dir.join(&setup.run_id);
    let trace_path = run_dir.join("trace.csv");
    let summary_path = run_dir.join("summary.txt");
    if trace_path.exists() && summary_path.exists() {
        let summary = parse_summary(&std::fs::read_to_string(&summary_path)?)?;
        let starved = summary.partial;
        println!("skip {} ({}) — already complete", setup.run_id, setup.agg.kind.name());
        return Ok(RunOutcome {
            row: make_row(setup, summary),
            executed: false,
            starved,
            violations: 0,
        });
    }

    let (obj, partition) = setup.suite.build(setup.cfg.n_clients, setup.cfg.dim, setup.cfg.seed)?;
    let trace = run_simulation(&setup.cfg, &obj, &setup.agg, &setup.delay, setup.probe)?;
    let summary = summarize(&trace, &obj)?;

    let trace_bytes = trace_csv_bytes(&trace);
    write_atomic(&trace_path, &trace_bytes)?;
    let mut manifest = String::new();
    manifest.push_str(&setup.echo);
    manifest.push_str(&obj.manifest());
    manifest.push_str(&format!("run_id = {}\n", setup.run_id));
    manifest.push_str(&format!("trace_sha256 = {}\n", sha256_hex(&trace_bytes)));
    manifest.push_str(&format!("starved = {}\n", trace.starved));
    write_atomic(&run_dir.join("manifest.txt"), manifest.as_bytes())?;
    write_atomic(&summary_path, summary_text(&summary).as_bytes())?;
    if let Some(p) = partition {
        write_atomic(&run_dir.join("partition.txt"), p.to_text().as_bytes())?;
    }

    let mut violations = 0;
    if setup.probe.is_some() {
        write_atomic(
            &run_dir.join("decomp.csv"),
            &decomposition_csv_bytes(&trace.decompositions),
        )?;
        let report = check_mse_chain(&trace.decompositions);
        violations = report.violations.len();
        for (t, msg) in report.violations.iter().take(5) {
            eprintln!("probe violation at t={t}: {msg}");
        }
    }

    println!(
        "done {} ({}) — {} iterations{}",
        setup.run_id,
        setup.agg.kind.name(),
        trace.records.len(),
        if trace.starved { " [starved]" } else { "" }
    );
    Ok(RunOutcome {
        starved: trace.starved,
        row: make_row(setup, summary),
        executed: true,
        violations,
    })
}

fn make_row(setup: &RunSetup, summary: RunSummary) -> ComparisonRow {
    let beta = match &setup.delay {
        DelayModel::Constant { beta } | DelayModel::Exponential { beta } => *beta,
        DelayModel::PerClientConstant { durations } => {
            durations.iter().sum::<f64>() / durations.len().max(1) as f64
        }
    };
    ComparisonRow {
        run_id: setup.run_id.clone(),
        algo: setup.agg.kind.name().to_string(),
        suite: match setup.suite {
            SuiteConfig::Quadratic { .. } => "quadratic".to_string(),
            SuiteConfig::Logistic { .. } => "logistic".to_string(),
        },
        level: setup.suite.level(),
        beta,
        seed: setup.cfg.seed,
        n: setup.cfg.n_clients,
        t_total: setup.cfg.total_iters,
        summary,
    }
}

fn write_comparison(path: &Path, rows: &[ComparisonRow]) -> Result<()> {
    let mut out = String::new();
    out.push_str(
        "run_id,algo,suite,level,beta,seed,n,T,avg_grad_norm_sq,final_objective,final_gap,\
         total_comms,mean_staleness,max_staleness,mean_n_t,partial,mean_a2,mean_b2,mean_c2\n",
    );
    for r in rows {
        let s = &r.summary;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{:e},{:e},{},{},{},{:e},{:e},{:e},{},{:e},{},{:e},{},{},{},{}\n",
            r.run_id,
            r.algo,
            r.suite,
            r.level,
            r.beta,
            r.seed,
            r.n,
            r.t_total,
            s.avg_grad_norm_sq,
            s.final_objective,
            s.final_gap,
            s.total_comms,
            s.mean_staleness,
            s.max_staleness,
            s.mean_n_t,
            s.partial,
            opt(s.mean_a2),
            opt(s.mean_b2),
            opt(s.mean_c2),
        ));
    }
    write_atomic(path, out.as_bytes())
}

fn parse_summary(text: &str) -> Result<RunSummary> {
    let mut map = BTreeMap::new();
    for line in text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    let get_f = |k: &str| -> Result<f64> {
        map.get(k)
            .ok_or_else(|| Error::Parse(format!("summary missing {k}")))?
            .parse()
            .map_err(|e| Error::Parse(format!("summary field {k}: {e}")))
    };
    let get_u = |k: &str| -> Result<u64> {
        map.get(k)
            .ok_or_else(|| Error::Parse(format!("summary missing {k}")))?
            .parse()
            .map_err(|e| Error::Parse(format!("summary field {k}: {e}")))
    };
    let opt_f = |k: &str| -> Option<f64> { map.get(k).and_then(|v| v.parse().ok()) };
    Ok(RunSummary {
        avg_grad_norm_sq: get_f("avg_grad_norm_sq")?,
        final_objective: get_f("final_objective")?,
        final_gap: get_f("final_gap")?,
        total_comms: get_u("total_comms")?,
        mean_staleness: get_f("mean_staleness")?,
        max_staleness: get_u("max_staleness")?,
        mean_n_t: get_f("mean_n_t")?,
        records: get_u("records")? as usize,
        partial: map.get("partial").map(|v| v == "true").unwrap_or(false),
        mean_a2: opt_f("mean_a2"),
        mean_b2: opt_f("mean_b2"),
        mean_c2: opt_f("mean_c2"),
    })
}

/// Post-process a scaling plan's rows: seed-average per T, fit the log-log
/// slope, and write scaling.csv.
pub fn scaling_report(rows: &[ComparisonRow], out_dir: &Path) -> Result<ScalingReport> {
    let mut by_t: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for r in rows {
        by_t.entry(r.t_total).or_default().push(r.summary.avg_grad_norm_sq);
    }
    let points: Vec<(u64, f64)> = by_t
        .iter()
        .map(|(&t, vs)| (t, vs.iter().sum::<f64>() / vs.len() as f64))
        .collect();
    let report = scaling_check(&points)?;
    let mut out = String::from("T,avg_grad_norm_sq\n");
    for (t, v) in &report.points {
        out.push_str(&format!("{t},{v:e}\n"));
    }
    out.push_str(&format!("# slope = {:e}\n", report.slope));
    write_atomic(&out_dir.join("scaling.csv"), out.as_bytes())?;
    Ok(report)
}
