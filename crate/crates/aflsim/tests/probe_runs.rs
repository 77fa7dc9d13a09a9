//! Run-level properties of the error decomposition.

use aflsim::aggregators::{AggregatorKind, AggregatorSpec};
use aflsim::config::{RunConfig, StepSizeRule};
use aflsim::delaysim::{run_simulation, DelayModel, ProbeSpec};
use aflsim::objectives::{make_quadratic_suite, NoiseSpec, ObjectiveSpec, QuadraticParams};
use aflsim::probe::check_mse_chain;
use aflsim::rng::RngFactory;
use aflsim::vecmath;

fn quad(n: usize, dim: usize, hetero: f64, sigma2: f64, seed: u64) -> ObjectiveSpec {
    let mut p = QuadraticParams::new(n, dim);
    p.hetero = hetero;
    p.noise = NoiseSpec::gaussian(sigma2);
    make_quadratic_suite(&p, &mut RngFactory::new(seed).stream("suite")).unwrap()
}

fn cfg(n: usize, t: u64, dim: usize, seed: u64, c: f64) -> RunConfig {
    let mut cfg = RunConfig::new(n, t, dim, seed);
    cfg.eta_rule = StepSizeRule::SqrtNOverT { c };
    cfg
}

fn probe() -> Option<ProbeSpec> {
    Some(ProbeSpec {
        decompose: true,
        collect_updates: true,
    })
}

#[test]
fn single_client_noiseless_run_decomposes_to_zero() {
    // n=1 keeps every consumed gradient fresh: A = B = C = mse = 0.
    let obj = quad(1, 4, 1.0, 0.0, 11);
    let trace = run_simulation(
        &cfg(1, 60, 4, 12, 0.05),
        &obj,
        &AggregatorSpec::new(AggregatorKind::AceDirect),
        &DelayModel::Constant { beta: 1.0 },
        probe(),
    )
    .unwrap();
    for d in &trace.decompositions {
        assert!(d.norm_a2 <= 1e-24);
        assert!(d.norm_b2 <= 1e-24);
        assert!(d.norm_c2 <= 1e-24);
        assert!(d.mse <= 1e-24);
        assert!(d.staleness.iter().all(|&s| s == 0));
    }
}

#[test]
fn ace_bias_strictly_below_vanilla_on_heterogeneous_suite() {
    let obj = quad(16, 8, 3.0, 0.0, 21);
    let delays = DelayModel::Exponential { beta: 5.0 };
    let run = |spec: &AggregatorSpec| {
        let trace = run_simulation(&cfg(16, 400, 8, 22, 0.05), &obj, spec, &delays, probe())
            .unwrap();
        check_mse_chain(&trace.decompositions).mean_b2
    };
    let ace_b2 = run(&AggregatorSpec::new(AggregatorKind::AceDirect));
    let vanilla_b2 = run(&AggregatorSpec::new(AggregatorKind::VanillaAsgd));
    assert!(
        ace_b2 < vanilla_b2,
        "ACE mean B2 {ace_b2:e} not below Vanilla {vanilla_b2:e}"
    );
    assert!(ace_b2 <= 1e-24, "ACE bias should vanish, got {ace_b2:e}");
}

#[test]
fn vanilla_delay_error_grows_with_beta() {
    // Heterogeneity fixed high; the mean squared delay error must not shrink
    // when the delay spread widens from beta=5 to beta=30 (seed-paired).
    let seeds = [31u64, 32, 33];
    let mean_c2 = |beta: f64| -> f64 {
        let mut total = 0.0;
        for &seed in &seeds {
            let obj = quad(20, 6, 3.0, 0.0, seed);
            let trace = run_simulation(
                &cfg(20, 400, 6, seed, 0.1),
                &obj,
                &AggregatorSpec::new(AggregatorKind::VanillaAsgd),
                &DelayModel::Exponential { beta },
                probe(),
            )
            .unwrap();
            total += check_mse_chain(&trace.decompositions).mean_c2;
        }
        total / seeds.len() as f64
    };
    let c2_low = mean_c2(5.0);
    let c2_high = mean_c2(30.0);
    assert!(
        c2_high >= c2_low,
        "delay error shrank with beta: {c2_low:e} -> {c2_high:e}"
    );
}

#[test]
fn drift_respects_telescoped_update_bound() {
    // D_i <= (tau_i * eta * max_s ||u^s||)^2 by the triangle inequality over
    // the telescoped updates.
    let obj = quad(10, 5, 1.5, 0.5, 41);
    let trace = run_simulation(
        &cfg(10, 300, 5, 42, 0.05),
        &obj,
        &AggregatorSpec::new(AggregatorKind::AceDirect),
        &DelayModel::Exponential { beta: 4.0 },
        probe(),
    )
    .unwrap();
    let max_u = trace
        .updates
        .iter()
        .map(|u| vecmath::norm(u))
        .fold(0.0, f64::max);
    let eta = trace.eta_base;
    for d in &trace.decompositions {
        for (i, (&drift, &tau)) in d.drift.iter().zip(&d.staleness).enumerate() {
            let bound = (tau as f64 * eta * max_u).powi(2);
            assert!(
                drift <= bound * (1.0 + 1e-9) + 1e-18,
                "client {i} at t={}: drift {drift:e} exceeds bound {bound:e}",
                d.t
            );
        }
    }
}

#[test]
fn probe_history_underrun_is_reported() {
    // A cap far below realized staleness starves the probe's model ring.
    let obj = quad(12, 4, 1.0, 0.0, 51);
    let mut config = cfg(12, 200, 4, 52, 0.05);
    config.tau_max_admin = 2; // ring capacity 5 << staleness ~ n
    let err = run_simulation(
        &config,
        &obj,
        &AggregatorSpec::new(AggregatorKind::AceDirect),
        &DelayModel::Exponential { beta: 4.0 },
        probe(),
    );
    match err {
        Err(aflsim::Error::HistoryUnderrun { .. }) => {}
        other => panic!("expected history underrun, got {other:?}"),
    }
}

#[test]
fn probe_refuses_multi_step_local_training() {
    let obj = quad(6, 4, 1.0, 0.0, 61);
    let mut spec = AggregatorSpec::with_buffer(AggregatorKind::FedBuff, 2, 4);
    spec.local.k = 3;
    spec.local.eta_l = 0.1;
    let err = run_simulation(
        &cfg(6, 50, 4, 62, 0.05),
        &obj,
        &spec,
        &DelayModel::Constant { beta: 1.0 },
        probe(),
    );
    match err {
        Err(aflsim::Error::ProbeLocalSteps(3)) => {}
        other => panic!("expected probe K=1 refusal, got {other:?}"),
    }
}

#[test]
fn non_buffered_kinds_consume_one_arrival_per_iteration() {
    let obj = quad(9, 4, 1.0, 0.3, 71);
    for kind in [AggregatorKind::VanillaAsgd, AggregatorKind::AceDirect] {
        let trace = run_simulation(
            &cfg(9, 150, 4, 72, 0.05),
            &obj,
            &AggregatorSpec::new(kind),
            &DelayModel::Exponential { beta: 3.0 },
            None,
        )
        .unwrap();
        assert_eq!(trace.comms_total, 9 + 150);
        let mut prev = 9;
        for r in &trace.records {
            assert_eq!(r.comms_total, prev + 1);
            prev = r.comms_total;
        }
    }
}
