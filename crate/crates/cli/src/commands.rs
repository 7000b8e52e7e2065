//! Subcommand bodies. Each writes its data files into `spec.out`.

use rayon::prelude::*;
use serde::Serialize;

use ratescale::coupling::{run_coupled, CoupleOptions};
use ratescale::engine::{
    initial_rate_vector, run_with_observer, write_trace, InitialRates, SimConfig, TraceRecorder,
};
use ratescale::meanfield::{
    birth_death_stationary, busy_fraction_fixed_point, compute_c_paper, integrate_limit_ode,
    supercritical_prob, IdleBackend,
};
use ratescale::stats::{
    check_renewal_identity, IdentityReport, RenewalResidual, StatsError, SteadyStateAccumulator,
    SteadyStateEstimate,
};

use crate::config::ExperimentSpec;
use crate::experiment::{clamped_initial_rates, run_experiment, ExperimentResult};
use crate::output::{write_csv, write_json};
use crate::seeds::run_seed;
use crate::CliError;

/// Single run of the base configuration with the master seed.
pub fn simulate(spec: &ExperimentSpec) -> Result<Option<SteadyStateEstimate>, CliError> {
    let model = spec.model.build()?;
    let mut cfg = spec.config_at(spec.points()[0]);
    cfg.seed = spec.seed;
    let mut recorder = TraceRecorder::new();
    let mut acc = SteadyStateAccumulator::new(&model, spec.burn_in, spec.batches)?;
    let outcome = run_with_observer(&cfg, &model, (&mut recorder, &mut acc))?;
    let trace = recorder.into_trace(&cfg, outcome);
    let estimate = match acc.finish() {
        Ok(est) => Some(est),
        Err(e @ StatsError::InsufficientData { .. }) => {
            eprintln!("warning: no steady-state estimate: {e}");
            None
        }
        Err(e) => return Err(e.into()),
    };
    let value = estimate.as_ref().map(serde_json::to_value).transpose()?;
    write_trace(&spec.out, &trace, value)?;
    Ok(estimate)
}

pub fn sweep(spec: &ExperimentSpec) -> Result<ExperimentResult, CliError> {
    run_experiment(spec)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct MeanFieldRow {
    pub time: f64,
    pub busy_fraction: f64,
    pub mean_rate: f64,
    pub min_rate: f64,
    pub max_rate: f64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct CValueRow {
    pub time: f64,
    pub n: usize,
    pub c_fixed_point: f64,
    pub c_phi: f64,
    pub alpha: f64,
    pub phi_horizon: f64,
    /// `exp(-mu_min ln(n) / alpha)`, the agreement bound between the two.
    pub tolerance: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MeanFieldReport {
    pub backend: &'static str,
    pub lambda: f64,
    pub mu_star: f64,
    pub slow_horizon: f64,
    pub initial_rates: Vec<f64>,
    pub final_rates: Vec<f64>,
    pub final_busy_fraction: f64,
    pub clamps: u64,
}

/// Number of trajectory times at which `c_values.csv` is evaluated.
const C_VALUE_POINTS: usize = 11;

/// Limit ODE from the configured initial rates over `horizon / m` slow time.
pub fn mean_field(
    spec: &ExperimentSpec,
    backend: &IdleBackend,
    step: f64,
) -> Result<MeanFieldReport, CliError> {
    let model = spec.model.build()?;
    let mut cfg = spec.config_at(spec.points()[0]);
    cfg.seed = spec.seed;
    let mu0 = clamped_initial_rates(&cfg, &model);
    let slow_horizon = cfg.horizon / cfg.m;
    let traj = integrate_limit_ode(&model, cfg.lambda, &mu0, slow_horizon, step, backend)?;

    let rows: Vec<MeanFieldRow> = traj
        .times
        .iter()
        .zip(&traj.rates)
        .zip(&traj.busy_fraction)
        .map(|((&time, rates), &busy_fraction)| MeanFieldRow {
            time,
            busy_fraction,
            mean_rate: rates.iter().sum::<f64>() / rates.len() as f64,
            min_rate: rates.iter().copied().fold(f64::INFINITY, f64::min),
            max_rate: rates.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
        .collect();

    let last_index = traj.times.len() - 1;
    let mut c_rows = Vec::with_capacity(C_VALUE_POINTS);
    for k in 0..C_VALUE_POINTS {
        let i = k * last_index / (C_VALUE_POINTS - 1);
        if k > 0 && c_rows.last().is_some_and(|r: &CValueRow| r.time == traj.times[i]) {
            continue;
        }
        let rates = &traj.rates[i];
        let fixed = busy_fraction_fixed_point(rates, cfg.lambda)?;
        let phi = compute_c_paper(rates, cfg.lambda, None)?;
        let lo = rates.iter().copied().fold(f64::INFINITY, f64::min);
        let (alpha, tolerance) = match phi.params {
            Some(p) => (p.alpha, (-lo * (rates.len() as f64).ln() / p.alpha).exp()),
            None => (f64::NAN, 0.0),
        };
        c_rows.push(CValueRow {
            time: traj.times[i],
            n: rates.len(),
            c_fixed_point: fixed,
            c_phi: phi.c,
            alpha,
            phi_horizon: phi.horizon,
            tolerance,
        });
    }

    let report = MeanFieldReport {
        backend: backend.tag(),
        lambda: cfg.lambda,
        mu_star: model.solve_mu_star(cfg.lambda)?.mu_star,
        slow_horizon,
        initial_rates: mu0,
        final_rates: traj.last().to_vec(),
        final_busy_fraction: *traj.busy_fraction.last().unwrap_or(&f64::NAN),
        clamps: traj.clamps,
    };
    std::fs::create_dir_all(&spec.out)?;
    write_csv(&spec.out.join("trajectory.csv"), &rows)?;
    write_csv(&spec.out.join("c_values.csv"), &c_rows)?;
    write_json(&spec.out.join("mean_field.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct CouplingRow {
    pub time: f64,
    pub discrepancy: f64,
    pub std_error: f64,
    /// Pair average of `exp(-min_v mu_v t)`.
    pub bound: f64,
    pub dominance_ok: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct CouplingReport {
    pub pairs: usize,
    pub events: u64,
    pub dominance_ok: bool,
    /// Whether the mean discrepancy stays below `bound + 3 SE` at every time.
    pub within_bound: bool,
    pub rows: Vec<CouplingRow>,
}

/// Horizon of `couple` when none is configured.
pub const COUPLE_HORIZON: f64 = 10.0;
/// Discrepancy sample times per coupled pair, excluding zero.
pub const COUPLE_SAMPLES: usize = 50;

/// Frozen-rate setup of coupled pair `pair`.
fn coupling_config(spec: &ExperimentSpec, pair: usize) -> SimConfig {
    let mut cfg = spec.config_at(spec.points()[0]);
    cfg.horizon = spec.horizon.unwrap_or(COUPLE_HORIZON);
    cfg.seed = run_seed(spec.seed, 0, pair);
    cfg.rate_frozen = true;
    cfg.buffer = ratescale::BufferMode::Unit;
    cfg.initial_backlog = 0;
    cfg.sample_interval = None;
    if !matches!(cfg.initial_rates, InitialRates::Explicit { .. }) {
        cfg.initial_rates = InitialRates::Explicit {
            rates: initial_rate_vector(&cfg),
        };
    }
    cfg
}

/// `replications` coupled pairs from all-idle versus all-busy.
pub fn couple(spec: &ExperimentSpec) -> Result<CouplingReport, CliError> {
    spec.validate()?;
    let horizon = spec.horizon.unwrap_or(COUPLE_HORIZON);
    let times: Vec<f64> = (0..=COUPLE_SAMPLES)
        .map(|k| horizon * k as f64 / COUPLE_SAMPLES as f64)
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.workers)
        .build()
        .map_err(|e| CliError::Config(format!("worker pool: {e}")))?;
    let runs: Vec<Result<(Vec<f64>, f64, u64, bool), CliError>> = pool.install(|| {
        (0..spec.replications)
            .into_par_iter()
            .map(|pair| {
                let cfg = coupling_config(spec, pair);
                let n = cfg.n;
                let lo = match &cfg.initial_rates {
                    InitialRates::Explicit { rates } => {
                        rates.iter().copied().fold(f64::INFINITY, f64::min)
                    }
                    _ => unreachable!("coupling rates are explicit"),
                };
                let opts = CoupleOptions {
                    sample_times: times.clone(),
                    record_events: false,
                };
                let trace = run_coupled(&cfg, &vec![false; n], &vec![true; n], &opts)?;
                let disc: Vec<f64> = trace.samples.iter().map(|s| s.discrepancy).collect();
                let ok = trace.samples.iter().all(|s| s.dominance_ok) && trace.discrepancy_monotone;
                Ok((disc, lo, trace.event_count, ok))
            })
            .collect()
    });
    let runs = runs.into_iter().collect::<Result<Vec<_>, _>>()?;
    let k = runs.len() as f64;
    let mut rows = Vec::with_capacity(times.len());
    let mut within = true;
    for (i, &t) in times.iter().enumerate() {
        let xs: Vec<f64> = runs.iter().map(|r| r.0[i]).collect();
        let mean = xs.iter().sum::<f64>() / k;
        let var = if runs.len() > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0)
        } else {
            0.0
        };
        let se = (var / k).sqrt();
        let bound = runs.iter().map(|r| (-r.1 * t).exp()).sum::<f64>() / k;
        within &= mean <= bound + 3.0 * se;
        rows.push(CouplingRow {
            time: t,
            discrepancy: mean,
            std_error: se,
            bound,
            dominance_ok: runs.iter().all(|r| r.3),
        });
    }
    let report = CouplingReport {
        pairs: runs.len(),
        events: runs.iter().map(|r| r.2).sum(),
        dominance_ok: runs.iter().all(|r| r.3),
        within_bound: within,
        rows,
    };
    std::fs::create_dir_all(&spec.out)?;
    write_csv(&spec.out.join("coupling.csv"), &report.rows)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.into(),
            passed,
            detail,
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {}: {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail
        )
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
    pub identities: IdentityReport,
    pub renewal: Vec<RenewalResidual>,
    pub little_residual: f64,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Servers in the frozen heterogeneous run of `verify`.
pub const VERIFY_SERVERS: usize = 20;
/// Horizon of that run when none is configured.
pub const VERIFY_HORIZON: f64 = 20_000.0;

/// Invariant suite; writes `identity_report.json`.
pub fn verify(spec: &ExperimentSpec) -> Result<VerifyReport, CliError> {
    let model = spec.model.build()?;
    let lambda = spec.base.lambda;
    let mut checks = Vec::new();

    let validation = model.validate(lambda)?;
    let failed: Vec<String> = validation
        .failures()
        .map(|c| format!("{:?}: {}", c.assumption, c.detail))
        .collect();
    checks.push(Check::new(
        "cost assumptions",
        failed.is_empty(),
        if failed.is_empty() {
            format!("all hold at lambda = {lambda}")
        } else {
            failed.join("; ")
        },
    ));

    let opt = model.solve_mu_star(lambda)?;
    checks.push(Check::new(
        "optimal rate",
        opt.first_order_residual <= 1e-9,
        format!("mu* = {}, residual {:e}", opt.mu_star, opt.first_order_residual),
    ));

    // frozen heterogeneous rates spread over [1.2, 2.0]
    let rates: Vec<f64> = (0..VERIFY_SERVERS)
        .map(|v| 1.2 + 0.8 * v as f64 / (VERIFY_SERVERS - 1) as f64)
        .collect();
    let mut cfg = SimConfig::frozen(rates.clone(), lambda, spec.horizon.unwrap_or(VERIFY_HORIZON));
    cfg.seed = spec.seed;
    let mut acc = SteadyStateAccumulator::new(&model, spec.burn_in, spec.batches)?.without_percentiles();
    let outcome = run_with_observer(&cfg, &model, &mut acc)?;
    let est = acc.finish()?;
    let identities = acc.identities()?;
    let d = &outcome.diagnostics;
    checks.push(Check::new(
        "conservation",
        d.arrivals + d.initial_backlog == d.departures + d.drops + d.in_system,
        format!(
            "{} arrivals, {} departures, {} drops, {} in system",
            d.arrivals, d.departures, d.drops, d.in_system
        ),
    ));
    let all_three = identities.fraction_within(3.0);
    checks.push(Check::new(
        "stationary identities",
        all_three >= 0.95,
        format!("{:.0}% of servers within 3 SE", 100.0 * all_three),
    ));
    let renewal = check_renewal_identity(&est, &rates);
    let renewal_ok = renewal.iter().filter(|r| r.z.abs() <= 3.0).count() as f64 / rates.len() as f64;
    checks.push(Check::new(
        "renewal identity",
        renewal_ok >= 0.95,
        format!("{:.0}% of servers within 3 SE", 100.0 * renewal_ok),
    ));
    let little = est.little_residual();
    let little_tol =
        est.mean_in_system.half_width + est.effective_lambda.half_width + est.mean_sojourn.half_width;
    checks.push(Check::new(
        "little's law",
        little.abs() <= little_tol,
        format!("residual {little:e}, tolerance {little_tol:e}"),
    ));

    let c = busy_fraction_fixed_point(&rates, lambda)?;
    let sandwich = c >= lambda / 2.0 - 1e-12 && c <= lambda / 1.2 + 1e-12;
    checks.push(Check::new(
        "busy fraction bounds",
        sandwich,
        format!("c = {c} in [{}, {}]", lambda / 2.0, lambda / 1.2),
    ));

    let law = birth_death_stationary(1.5, 0, 199)?;
    let worst = (0..200)
        .map(|i| (law.prob(i) - supercritical_prob(1.5, 199, i)).abs())
        .fold(0.0, f64::max);
    checks.push(Check::new(
        "birth-death closed form",
        worst <= 1e-10,
        format!("max deviation {worst:e}"),
    ));

    let mut couple_cfg = SimConfig::frozen(rates.clone(), lambda, 2_000.0);
    couple_cfg.seed = spec.seed;
    let n = rates.len();
    let coupled = run_coupled(
        &couple_cfg,
        &vec![false; n],
        &vec![true; n],
        &CoupleOptions::default(),
    );
    let (ok, detail) = match &coupled {
        Ok(t) => (
            t.discrepancy_monotone,
            format!("{} coupled events, discrepancy non-increasing: {}", t.event_count, t.discrepancy_monotone),
        ),
        Err(e) => (false, e.to_string()),
    };
    checks.push(Check::new("coupling dominance", ok, detail));

    let report = VerifyReport {
        checks,
        identities,
        renewal,
        little_residual: little,
    };
    std::fs::create_dir_all(&spec.out)?;
    write_json(&spec.out.join("identity_report.json"), &report)?;
    Ok(report)
}
