//! `aflsim` — asynchronous federated learning simulator.
//!
//! Subcommands: run, sweep, scaling, ablate-tau, probe.
//! Exit codes: 0 success, 1 usage error, 2 probe invariant violation.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use aflsim::cli::{self, ExperimentPlan, Options};
use aflsim::Error;

#[derive(Parser)]
#[command(name = "aflsim", version, about = "Asynchronous federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a single run.
    Run(CommonArgs),
    /// Factorial sweep: algorithms x heterogeneity x delay x seeds.
    Sweep(SweepArgs),
    /// Convergence scaling over a grid of T values.
    Scaling(ScalingArgs),
    /// tau_algo ablation for ACED under client dropout.
    AblateTau(AblateArgs),
    /// Single run with the per-iteration error decomposition enabled.
    Probe(CommonArgs),
}

#[derive(Args, Clone, Default)]
struct CommonArgs {
    /// Flat key = value config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Aggregator kind: ace_direct | ace_incremental | aced | fedbuff |
    /// ca2fl | vanilla_asgd | delay_adaptive_asgd.
    #[arg(long)]
    algo: Option<String>,
    /// Number of clients.
    #[arg(long)]
    n: Option<usize>,
    /// Server iterations per run.
    #[arg(long = "T")]
    t_total: Option<u64>,
    /// Model dimension (quadratic suite).
    #[arg(long)]
    dim: Option<usize>,
    /// Dirichlet alpha (logistic suite heterogeneity).
    #[arg(long)]
    alpha: Option<f64>,
    /// Quadratic-suite heterogeneity radius.
    #[arg(long)]
    hetero: Option<f64>,
    /// Mean client delay.
    #[arg(long)]
    beta: Option<f64>,
    /// Gradient noise variance (quadratic suite).
    #[arg(long)]
    sigma2: Option<f64>,
    /// Step-size coefficient c.
    #[arg(long = "eta-c")]
    eta_c: Option<f64>,
    /// Step-size rule: sqrt_n_over_T | constant.
    #[arg(long = "eta-kind")]
    eta_kind: Option<String>,
    /// ACED staleness threshold.
    #[arg(long = "tau-algo")]
    tau_algo: Option<u64>,
    /// Buffer size M (fedbuff / ca2fl).
    #[arg(long = "buffer-M")]
    buffer_m: Option<usize>,
    /// Concurrent clients (fedbuff / ca2fl).
    #[arg(long)]
    concurrency: Option<usize>,
    /// Defer re-dispatch until the buffer emits.
    #[arg(long)]
    blocking: bool,
    /// Delay-adaptive freshness threshold.
    #[arg(long = "tau-C")]
    tau_c: Option<u64>,
    /// Local steps per round.
    #[arg(long = "K")]
    k_local: Option<u32>,
    /// Local step size.
    #[arg(long = "eta-l")]
    eta_l: Option<f64>,
    /// Quantize cached gradients to 8 bits (ace_direct / aced).
    #[arg(long)]
    quantize8: bool,
    /// Permanent dropout as FRAC@ITER, e.g. 0.3@250.
    #[arg(long)]
    dropout: Option<String>,
    /// Suite kind: quadratic | logistic.
    #[arg(long)]
    suite: Option<String>,
    /// Base RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of seeds (seed, seed+1, ...).
    #[arg(long)]
    seeds: Option<u64>,
    /// Enable the error-decomposition probe.
    #[arg(long)]
    probe: bool,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Concurrent runs.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args, Clone)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Comma-separated aggregator kinds.
    #[arg(long)]
    algos: Option<String>,
    /// Comma-separated heterogeneity levels (alpha or hetero).
    #[arg(long)]
    levels: Option<String>,
    /// Comma-separated delay means.
    #[arg(long)]
    betas: Option<String>,
}

#[derive(Args, Clone)]
struct ScalingArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Comma-separated T grid.
    #[arg(long = "t-grid")]
    t_grid: Option<String>,
}

#[derive(Args, Clone)]
struct AblateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Comma-separated tau_algo grid.
    #[arg(long = "tau-grid")]
    tau_grid: Option<String>,
    /// Fraction of clients dropped.
    #[arg(long = "dropout-frac")]
    dropout_frac: Option<f64>,
    /// Iteration at which the dropout happens (default T/2).
    #[arg(long = "dropout-at")]
    dropout_at: Option<u64>,
}

fn collect_options(args: &CommonArgs) -> Result<Options, Error> {
    let mut opts = match &args.config {
        Some(path) => Options::parse_file(path)?,
        None => Options::new(),
    };
    let mut flags = Options::new();
    if let Some(v) = &args.algo {
        flags.set("aggregator.kind", v);
    }
    if let Some(v) = args.n {
        flags.set("n", v);
    }
    if let Some(v) = args.t_total {
        flags.set("T", v);
    }
    if let Some(v) = args.dim {
        flags.set("dim", v);
    }
    if let Some(v) = args.alpha {
        flags.set("suite.alpha", v);
    }
    if let Some(v) = args.hetero {
        flags.set("suite.hetero", v);
    }
    if let Some(v) = args.beta {
        flags.set("delay.beta", v);
    }
    if let Some(v) = args.sigma2 {
        flags.set("suite.sigma2", v);
    }
    if let Some(v) = args.eta_c {
        flags.set("eta.c", v);
    }
    if let Some(v) = &args.eta_kind {
        flags.set("eta.kind", v);
    }
    if let Some(v) = args.tau_algo {
        flags.set("aggregator.tau_algo", v);
    }
    if let Some(v) = args.buffer_m {
        flags.set("aggregator.M", v);
    }
    if let Some(v) = args.concurrency {
        flags.set("aggregator.concurrency", v);
    }
    if args.blocking {
        flags.set("aggregator.blocking", true);
    }
    if let Some(v) = args.tau_c {
        flags.set("aggregator.tau_C", v);
    }
    if let Some(v) = args.k_local {
        flags.set("aggregator.K", v);
    }
    if let Some(v) = args.eta_l {
        flags.set("aggregator.eta_l", v);
    }
    if args.quantize8 {
        flags.set("aggregator.quantize8", true);
    }
    if let Some(v) = &args.dropout {
        flags.set("dropout", v);
    }
    if let Some(v) = &args.suite {
        flags.set("suite.kind", v);
    }
    if let Some(v) = args.seed {
        flags.set("seed", v);
    }
    if let Some(v) = args.seeds {
        flags.set("seeds", v);
    }
    if args.probe {
        flags.set("probe", true);
    }
    if let Some(v) = &args.out {
        flags.set("out", v.display().to_string());
    }
    if let Some(v) = args.jobs {
        flags.set("jobs", v);
    }
    opts.overlay(&flags);
    Ok(opts)
}

fn run(command: Command) -> Result<i32, Error> {
    let (plan, is_scaling): (ExperimentPlan, bool) = match &command {
        Command::Run(args) => (cli::plan_run(&collect_options(args)?)?, false),
        Command::Probe(args) => (cli::plan_probe(&collect_options(args)?)?, false),
        Command::Sweep(args) => {
            let mut opts = collect_options(&args.common)?;
            if let Some(v) = &args.algos {
                opts.set("algos", v);
            }
            if let Some(v) = &args.levels {
                opts.set("levels", v);
            }
            if let Some(v) = &args.betas {
                opts.set("betas", v);
            }
            (cli::plan_sweep(&opts)?, false)
        }
        Command::Scaling(args) => {
            let mut opts = collect_options(&args.common)?;
            if let Some(v) = &args.t_grid {
                opts.set("t_grid", v);
            }
            (cli::plan_scaling(&opts)?, true)
        }
        Command::AblateTau(args) => {
            let mut opts = collect_options(&args.common)?;
            if let Some(v) = &args.tau_grid {
                opts.set("tau_grid", v);
            }
            if let Some(v) = args.dropout_frac {
                opts.set("dropout_frac", v);
            }
            if let Some(v) = args.dropout_at {
                opts.set("dropout_at", v);
            }
            (cli::plan_ablate_tau(&opts)?, false)
        }
    };

    println!("planned {} run(s) -> {}", plan.runs.len(), plan.out_dir.display());
    let report = cli::execute(&plan)?;
    if is_scaling && !report.rows.is_empty() {
        let scaling = cli::scaling_report(&report.rows, &plan.out_dir)?;
        println!("scaling slope = {:.4}", scaling.slope);
    }
    println!(
        "executed {} / skipped {} / starved {}; comparison at {}",
        report.executed,
        report.skipped,
        report.starved,
        plan.out_dir.join("comparison.csv").display()
    );
    if report.probe_violations > 0 {
        eprintln!("{} probe invariant violation(s)", report.probe_violations);
        return Ok(2);
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version requests are not usage errors.
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0u8,
                _ => 1u8,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(code) => ExitCode::from(code as u8),
        Err(Error::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
