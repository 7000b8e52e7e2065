use ratescale::cost::CostModel;
use ratescale::engine::{
    run_simulation, run_with_observer, Diagnostics, Event, EventKind, SimConfig, SimTrace,
};
use ratescale::stats::{
    check_renewal_identity, check_stationary_identities, estimate_steady_state,
    SteadyStateAccumulator, StatsError,
};

fn model() -> CostModel {
    CostModel::inverse_quadratic(0.1, 0.5, 3.0)
}

#[test]
fn single_server_estimates() {
    let mut cfg = SimConfig::frozen(vec![1.0], 1.0, 40_000.0);
    cfg.seed = 31;
    let trace = run_simulation(&cfg, &model()).unwrap();
    let est = estimate_steady_state(&trace, &model(), 0.2, 32).unwrap();
    let s = &est.servers[0];
    let within = |x: f64, i: ratescale::stats::Interval| (x - i.mean).abs() <= 3.0 * i.std_error;
    assert!(within(0.5, s.busy_fraction), "{:?}", s.busy_fraction);
    assert!(within(1.0, est.mean_sojourn), "{:?}", est.mean_sojourn);
    assert!(within(0.5, est.effective_lambda), "{:?}", est.effective_lambda);
    assert!(within(0.5, s.arrival_intensity), "{:?}", s.arrival_intensity);
    assert!(est.effective_lambda.mean <= 1.0);
    let little = est.little_residual().abs();
    let tol = est.mean_in_system.half_width + est.effective_lambda.half_width + est.mean_sojourn.half_width;
    assert!(little <= tol, "Little residual {little} vs {tol}");

    let report = check_stationary_identities(&trace, &model()).unwrap();
    let a = report.servers[0].a;
    assert!((a.estimate - 0.5).abs() < 0.02, "{a:?}");
    let renewal = check_renewal_identity(&est, &[1.0]);
    assert!(renewal[0].z.abs() <= 3.0, "{renewal:?}");
    assert!((renewal[0].predicted - 0.5).abs() < 0.02);
}

#[test]
fn heterogeneous_identities_hold() {
    let rates: Vec<f64> = (0..20).map(|v| 1.2 + 0.8 * v as f64 / 19.0).collect();
    let mut cfg = SimConfig::frozen(rates, 0.8, 8_000.0);
    cfg.seed = 41;
    let trace = run_simulation(&cfg, &model()).unwrap();
    let report = check_stationary_identities(&trace, &model()).unwrap();
    assert!(report.fraction_within(3.0) >= 0.9, "{:?}", report.servers);
}

#[test]
fn homogeneous_renewal_at_scale() {
    let mut cfg = SimConfig::frozen(vec![2.0; 100], 1.0, 1_000.0);
    cfg.seed = 43;
    let mut acc = SteadyStateAccumulator::new(&model(), 0.2, 32).unwrap();
    run_with_observer(&cfg, &model(), &mut acc).unwrap();
    let est = acc.finish().unwrap();
    assert!((est.mean_busy_fraction() - 0.5).abs() < 0.01);
    let mean_idle = est.servers.iter().map(|s| s.mean_idle.mean).sum::<f64>() / 100.0;
    assert!((mean_idle - 0.5).abs() < 0.02, "mean idle {mean_idle}");
    let res = check_renewal_identity(&est, &[2.0; 100]);
    let ok = res.iter().filter(|r| r.z.abs() <= 3.0).count();
    assert!(ok >= 95, "{ok} of 100 servers pass");
}

fn artificial_trace(events: Vec<Event>, horizon: f64) -> SimTrace {
    let config = SimConfig::frozen(vec![1.0], 1.0, horizon);
    SimTrace {
        config,
        initial_rates: vec![1.0],
        initial_queue: vec![0],
        events,
        rate_samples: Vec::new(),
        tasks: Vec::new(),
        idle_stats: Vec::new(),
        final_rates: vec![1.0],
        diagnostics: Diagnostics::default(),
    }
}

#[test]
fn always_busy_trace_fails_identity_b() {
    // one arrival after an idle second, then drops only: busy forever with I = 1
    let mut events = vec![Event {
        time: 1.0,
        kind: EventKind::Arrival,
        server: Some(0),
        seq: 0,
    }];
    for k in 1..2_000u64 {
        events.push(Event {
            time: 1.0 + k as f64 * 0.05,
            kind: EventKind::Drop,
            server: None,
            seq: k,
        });
    }
    let trace = artificial_trace(events, 100.0);
    let report = check_stationary_identities(&trace, &model()).unwrap();
    let b = report.servers[0].b;
    assert!(!b.within(3.0), "{b:?}");
    assert_eq!(b.target, 0.0);

    let est = estimate_steady_state(&trace, &model(), 0.2, 32).unwrap();
    let r = check_renewal_identity(&est, &[1.0]);
    assert_eq!(r[0].busy_fraction, 1.0);
}

#[test]
fn zero_idle_reduces_renewal_to_full_busy() {
    let mut events = vec![Event {
        time: 0.0,
        kind: EventKind::Arrival,
        server: Some(0),
        seq: 0,
    }];
    for k in 1..2_000u64 {
        events.push(Event {
            time: k as f64 * 0.05,
            kind: EventKind::Drop,
            server: None,
            seq: k,
        });
    }
    let trace = artificial_trace(events, 100.0);
    let est = estimate_steady_state(&trace, &model(), 0.2, 32).unwrap();
    assert_eq!(est.servers[0].mean_idle.mean, 0.0);
    let r = check_renewal_identity(&est, &[1.0]);
    assert_eq!(r[0].predicted, 1.0);
    assert_eq!(r[0].z, 0.0);
}

#[test]
fn contract_and_data_errors() {
    let mut cfg = SimConfig::new(4, 0.8, 10.0, 100.0);
    cfg.seed = 1;
    let trace = run_simulation(&cfg, &model()).unwrap();
    assert!(matches!(
        check_stationary_identities(&trace, &model()),
        Err(StatsError::Contract(_))
    ));

    let short = run_simulation(&SimConfig::frozen(vec![1.0], 0.5, 20.0), &model()).unwrap();
    match estimate_steady_state(&short, &model(), 0.2, 32) {
        Err(StatsError::InsufficientData {
            required_horizon, ..
        }) => assert!(required_horizon > 20.0),
        other => panic!("expected insufficient data, got {other:?}"),
    }
}

#[test]
fn no_intensity_when_nobody_idle() {
    // saturated: arrivals 50x the total service capacity
    let mut cfg = SimConfig::frozen(vec![0.1; 5], 5.0, 4_000.0);
    cfg.seed = 2;
    let trace = run_simulation(&cfg, &model()).unwrap();
    let report = check_stationary_identities(&trace, &model()).unwrap();
    for s in &report.servers {
        assert!(s.a.estimate.is_finite());
        assert!(s.a.within(4.0), "{s:?}");
    }
}

#[test]
fn intervals_shrink_like_root_horizon() {
    let rates: Vec<f64> = (0..10).map(|v| 1.2 + 0.08 * v as f64).collect();
    let mut widths = Vec::new();
    for horizon in [2_000.0, 8_000.0, 32_000.0] {
        let mut cfg = SimConfig::frozen(rates.clone(), 0.8, horizon);
        cfg.seed = 55;
        let mut acc = SteadyStateAccumulator::new(&model(), 0.2, 32).unwrap();
        run_with_observer(&cfg, &model(), &mut acc).unwrap();
        let est = acc.finish().unwrap();
        let w = est.servers.iter().map(|s| s.busy_fraction.std_error).sum::<f64>() / 10.0;
        widths.push(w);
    }
    for pair in widths.windows(2) {
        let ratio = pair[0] / pair[1];
        // quadrupling the horizon should halve the error
        assert!((1.5..2.7).contains(&ratio), "ratio {ratio} from {widths:?}");
    }
}

#[test]
fn renewal_identity_holds_at_small_n() {
    let rates: Vec<f64> = (0..20).map(|v| 1.2 + 0.8 * v as f64 / 19.0).collect();
    let mut cfg = SimConfig::frozen(rates.clone(), 0.8, 20_000.0);
    cfg.seed = 47;
    let mut acc = SteadyStateAccumulator::new(&model(), 0.2, 32).unwrap();
    run_with_observer(&cfg, &model(), &mut acc).unwrap();
    let est = acc.finish().unwrap();
    let res = check_renewal_identity(&est, &rates);
    let ok = res.iter().filter(|r| r.z.abs() <= 3.0).count();
    assert!(ok >= 19, "{res:?}");
    // idle periods are not exponential at n = 20, so the time average of I_v(t)
    // sits above the mean period length
    for s in &est.servers {
        assert!(s.mean_idle.mean > s.mean_idle_period.mean);
    }
}
