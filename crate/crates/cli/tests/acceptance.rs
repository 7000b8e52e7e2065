//! Acceptance suite: one line per criterion, non-zero exit if any fails.

use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use ratescale::cost::CostModel;
use ratescale::coupling::{run_coupled, CoupleOptions};
use ratescale::engine::{run_simulation, run_with_observer, stream_rng, InitialRates, SimConfig};
use ratescale::meanfield::{
    birth_death_stationary, busy_fraction_fixed_point, compute_c_paper, integrate_limit_ode,
    integrate_phi, phi_envelope, subcritical_prob, supercritical_prob, AtomMeasure, IdleBackend,
};
use ratescale::stats::{ks_exponential, SteadyStateAccumulator, SteadyStateEstimate};
use ratescale_cli::commands::couple;
use ratescale_cli::config::SweepAxis;
use ratescale_cli::experiment::{execute, ExperimentResult, SummaryRow};
use ratescale_cli::output::write_experiment;
use ratescale_cli::{ExperimentSpec, Recipe};

type Outcome = Result<String, String>;

fn model() -> CostModel {
    CostModel::inverse_quadratic(0.1, 0.5, 3.0)
}

fn cube_root_5_lambda(lambda: f64) -> f64 {
    (5.0 * lambda).cbrt()
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn recipe_run(recipe: Recipe) -> ExperimentResult {
    let mut spec = recipe.spec();
    spec.seed = 2024;
    spec.workers = 1;
    execute(&spec).expect("recipe runs")
}

fn frozen_estimate(rates: Vec<f64>, lambda: f64, horizon: f64, seed: u64) -> SteadyStateEstimate {
    let mut cfg = SimConfig::frozen(rates, lambda, horizon);
    cfg.seed = seed;
    let mut acc = SteadyStateAccumulator::new(&model(), 0.2, 32)
        .unwrap()
        .without_percentiles();
    run_with_observer(&cfg, &model(), &mut acc).unwrap();
    acc.finish().unwrap()
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|v| lo + (hi - lo) * v as f64 / (n - 1).max(1) as f64)
        .collect()
}

fn c01_optimal_rate() -> Outcome {
    let start = Instant::now();
    let mu = model().solve_mu_star(0.8).map_err(|e| e.to_string())?.mu_star;
    let err = (mu - 4f64.cbrt()).abs();
    let secs = start.elapsed().as_secs_f64();
    check(
        err <= 1e-9 && secs < 1.0,
        format!("mu* = {mu}, |mu* - 4^(1/3)| = {err:e}, {secs:.4} s"),
    )
}

fn c02_servers() -> Outcome {
    let res = recipe_run(Recipe::FigServers);
    let s = &res.summary;
    let last = s.last().unwrap();
    let mut ok = last.relative_gap <= 0.05;
    for w in s.windows(2) {
        ok &= w[1].gap <= w[0].gap + w[0].mean_rate_ci + w[1].mean_rate_ci;
    }
    let gaps: Vec<String> = s
        .iter()
        .map(|r| format!("n={}: {:.4}±{:.4}", r.value, r.gap, r.mean_rate_ci))
        .collect();
    check(
        ok,
        format!(
            "relative gap at n=100 {:.4}; |mean - mu*| {}",
            last.relative_gap,
            gaps.join(", ")
        ),
    )
}

fn spreads(rows: &[SummaryRow]) -> Vec<f64> {
    rows.iter().map(|r| r.spread).collect()
}

fn c03_step_size() -> Outcome {
    let res = recipe_run(Recipe::FigStepSize);
    let sp = spreads(&res.summary);
    let ok = sp.windows(2).all(|w| w[1] < w[0]);
    check(ok, format!("p95 - p5 for m = 10, 50, 500: {sp:?}"))
}

fn c04_lambda() -> Outcome {
    let res = recipe_run(Recipe::FigLambda);
    let mut ok = true;
    let mut parts = Vec::new();
    for r in &res.summary {
        let target = cube_root_5_lambda(r.value);
        let rel = (r.mean_rate - target).abs() / target;
        ok &= rel <= 0.10;
        parts.push(format!("lambda={}: mean {:.4} vs {:.4}", r.value, r.mean_rate, target));
    }
    let sp = spreads(&res.summary);
    ok &= sp.windows(2).all(|w| w[1] < w[0]);
    check(ok, format!("{}; spreads {sp:?}", parts.join(", ")))
}

fn c05_identities() -> Outcome {
    let rates = linspace(1.2, 2.0, 20);
    let mut cfg = SimConfig::frozen(rates, 0.8, 20_000.0);
    cfg.seed = 505;
    let mut acc = SteadyStateAccumulator::new(&model(), 0.2, 32)
        .unwrap()
        .without_percentiles();
    let out = run_with_observer(&cfg, &model(), &mut acc).unwrap();
    let events = out.diagnostics.arrivals + out.diagnostics.drops + out.diagnostics.departures;
    acc.finish().unwrap();
    let report = acc.identities().unwrap();
    let frac = report.fraction_within(3.0);
    let worst = report
        .servers
        .iter()
        .flat_map(|s| [s.a.z.abs(), s.b.z.abs(), s.c.z.abs()])
        .fold(0.0, f64::max);
    check(
        frac >= 0.95 && events >= 100_000,
        format!("{events} events, {:.0}% of servers within 3 SE, worst |z| {worst:.2}", 100.0 * frac),
    )
}

fn c06_idle_concentration() -> Outcome {
    let lambda = 0.8;
    let mut devs = Vec::new();
    for (k, n) in [10usize, 50, 200].into_iter().enumerate() {
        let rates = linspace(1.2, 2.0, n);
        let c = busy_fraction_fixed_point(&rates, lambda).unwrap();
        let target = (1.0 - c) / lambda;
        let est = frozen_estimate(rates, lambda, 400_000.0, 600 + k as u64);
        let dev = est
            .servers
            .iter()
            .map(|s| (s.mean_idle.mean - target).abs())
            .fold(0.0, f64::max);
        devs.push(dev);
    }
    let ok = devs.windows(2).all(|w| w[1] < w[0]) && devs[2] <= 0.05;
    check(ok, format!("max_v |E[I_v] - (1-c)/lambda| for n = 10, 50, 200: {devs:?}"))
}

fn c07_supercritical() -> Outcome {
    let n = 200;
    let rates = vec![0.7; n];
    let c = busy_fraction_fixed_point(&rates, 0.8).unwrap();
    let est = frozen_estimate(rates, 0.8, 2_000.0, 707);
    let worst = est
        .servers
        .iter()
        .map(|s| s.mean_idle.mean)
        .fold(0.0, f64::max);
    check(
        worst <= 0.05 && c == 1.0,
        format!("c = {c}, max_v E[I_v] = {worst:.5}"),
    )
}

fn generator_solve(rho: f64, len: usize) -> Vec<f64> {
    let mut a = DMatrix::<f64>::zeros(len, len);
    // transposed generator: column i holds the outflow of state i
    for i in 0..len {
        if i + 1 < len {
            a[(i + 1, i)] += rho;
            a[(i, i)] -= rho;
        }
        if i > 0 {
            a[(i - 1, i)] += 1.0;
            a[(i, i)] -= 1.0;
        }
    }
    for j in 0..len {
        a[(len - 1, j)] = 1.0;
    }
    let mut b = DVector::<f64>::zeros(len);
    b[len - 1] = 1.0;
    a.lu().solve(&b).unwrap().iter().copied().collect()
}

fn c08_birth_death() -> Outcome {
    let mut worst: f64 = 0.0;
    for &(rho, len) in &[(1.5, 1000usize), (1.01, 1000), (0.9, 1000), (0.5, 600), (2.0, 100)] {
        let exact = generator_solve(rho, len);
        let law = birth_death_stationary(rho, 0, len - 1).unwrap();
        for i in 0..len {
            worst = worst.max((law.prob(i) - exact[i]).abs());
            if rho > 1.0 {
                worst = worst.max((supercritical_prob(rho, len - 1, i) - exact[i]).abs());
            }
        }
    }
    let (lo, hi) = (300, 999);
    let exact = generator_solve(0.95, hi - lo + 1);
    for i in lo..=hi {
        worst = worst.max((subcritical_prob(0.95, lo, hi, i) - exact[i - lo]).abs());
    }
    let small = birth_death_stationary(2.0, 0, 3).unwrap();
    let expected = [1.0 / 15.0, 2.0 / 15.0, 4.0 / 15.0, 8.0 / 15.0];
    let small_err = (0..4)
        .map(|i| (small.prob(i) - expected[i]).abs())
        .fold(0.0, f64::max);
    check(
        worst <= 1e-10 && small_err <= 1e-15,
        format!("max deviation from generator solve {worst:e}; 4-state case {small_err:e}"),
    )
}

fn c09_coupling() -> Outcome {
    let n = 50;
    let mut long = SimConfig::frozen(linspace(1.0, 2.0, n), 0.8, 10_000.0);
    long.seed = 909;
    let trace = run_coupled(&long, &vec![false; n], &vec![true; n], &CoupleOptions::default())
        .map_err(|e| e.to_string())?;
    let events_ok = trace.event_count >= 1_000_000 && trace.discrepancy_monotone;

    let mut spec = ExperimentSpec::default();
    spec.base.n = n;
    spec.base.lambda = 0.8;
    spec.base.initial_rates = InitialRates::Uniform { lo: 1.0, hi: 2.0 };
    spec.horizon = Some(5.0);
    spec.replications = 200;
    spec.seed = 99;
    spec.out = tempfile::tempdir().unwrap().keep();
    let report = couple(&spec).map_err(|e| e.to_string())?;
    let at5 = report.rows.last().unwrap();
    let bound = (-5.0f64).exp();
    let ok = events_ok && report.dominance_ok && at5.time == 5.0 && at5.discrepancy <= bound + 3.0 * at5.std_error;
    check(
        ok,
        format!(
            "{} events with dominance held; mean discrepancy at t=5 {:.5} (SE {:.5}) vs e^-5 = {bound:.5}",
            trace.event_count, at5.discrepancy, at5.std_error
        ),
    )
}

fn c10_limit_ode() -> Outcome {
    let m = model();
    let mu_star = m.solve_mu_star(0.8).unwrap().mu_star;
    let homog = integrate_limit_ode(&m, 0.8, &[1.0; 10], 200.0, 0.05, &IdleBackend::FixedPoint)
        .map_err(|e| e.to_string())?;
    let err = homog
        .last()
        .iter()
        .map(|r| (r - mu_star).abs())
        .fold(0.0, f64::max);
    let het = integrate_limit_ode(
        &m,
        0.8,
        &linspace(0.6, 2.4, 10),
        200.0,
        0.05,
        &IdleBackend::FixedPoint,
    )
    .map_err(|e| e.to_string())?;
    let spread = het.spread(het.times.len() - 1);
    check(
        err <= 1e-4 && spread <= 1e-4,
        format!("|mu(200) - mu*| = {err:e}; heterogeneous spread at 200 = {spread:e}"),
    )
}

fn c11_phi() -> Outcome {
    let lambda = 0.8;
    let mut rng = stream_rng(1111, 0);
    let mut inside = 0;
    for _ in 0..20 {
        let n = rng.random_range(2..40);
        let rates: Vec<f64> = (0..n).map(|_| rng.random_range(1.0..2.5)).collect();
        let m0 = rng.random_range(0.0..0.3);
        let phi0 = AtomMeasure {
            rates: rates.clone(),
            mass: vec![m0 / n as f64; n],
        };
        let traj = integrate_phi(lambda, &phi0, 15.0, 0.01, 10, false).map_err(|e| e.to_string())?;
        let ok = traj.times.iter().zip(&traj.total_mass).all(|(t, mass)| {
            let (lo, hi) = phi_envelope(&rates, lambda, m0, *t);
            *mass >= lo - 1e-9 && *mass <= hi + 1e-9
        });
        inside += ok as usize;
    }
    let mut parts = Vec::new();
    let mut agree = true;
    for n in [100usize, 10_000, 1_000_000] {
        let rates = linspace(1.2, 2.0, n);
        let fixed = busy_fraction_fixed_point(&rates, lambda).unwrap();
        let phi = compute_c_paper(&rates, lambda, None).map_err(|e| e.to_string())?;
        let alpha = phi.params.unwrap().alpha;
        let tol = (-1.2 * (n as f64).ln() / alpha).exp();
        let diff = (phi.c - fixed).abs();
        agree &= diff <= tol;
        parts.push(format!("n={n}: |diff| {diff:.2e} <= {tol:.3}"));
    }
    check(
        inside == 20 && agree,
        format!("{inside}/20 trajectories inside envelopes; {}", parts.join(", ")),
    )
}

fn c12_backlog() -> Outcome {
    let res = recipe_run(Recipe::FigInfBufferBig);
    let mu_star = res.summary[0].mu_star;
    let n = res.spec.base.n as f64;
    let rows: Vec<_> = res.trajectory().copied().collect();
    let drain = rows
        .iter()
        .find(|r| r.in_system <= n)
        .map(|r| r.time)
        .ok_or("backlog never drained")?;
    let peak_mean = rows
        .iter()
        .filter(|r| r.in_system > 2.0 * n)
        .map(|r| r.mean_rate)
        .fold(0.0, f64::max);
    let peak_max = rows
        .iter()
        .filter(|r| r.time > 0.0 && r.in_system > 2.0 * n)
        .map(|r| r.max_rate)
        .fold(0.0, f64::max);
    let settle = drain + 4_000.0;
    let late: Vec<_> = rows.iter().filter(|r| r.time >= settle).collect();
    let worst = late
        .iter()
        .flat_map(|r| [r.min_rate, r.max_rate])
        .map(|x| (x - mu_star).abs() / mu_star)
        .fold(0.0, f64::max);
    check(
        peak_max > mu_star && peak_mean > mu_star && !late.is_empty() && worst <= 0.05,
        format!(
            "drained at t={drain}; peak mean rate {peak_mean:.4} and max rate {peak_max:.4} during backlog vs mu* {mu_star:.4}; after t={settle} worst relative deviation {worst:.4}"
        ),
    )
}

fn c13_cost() -> Outcome {
    let n = 100;
    let mu_star = model().solve_mu_star(0.8).unwrap().mu_star;
    let horizon = 6_000.0;
    let base = frozen_estimate(vec![mu_star; n], 0.8, horizon, 1313).cost;
    let mut rng = stream_rng(1313, 1);
    let mut lower_or_overlap = 0;
    let mut below = 0;
    for _ in 0..10 {
        let rates: Vec<f64> = (0..n)
            .map(|_| mu_star * (1.0 + rng.random_range(-0.1..0.1)))
            .collect();
        // common random numbers: every run shares the arrival stream
        let cost = frozen_estimate(rates, 0.8, horizon, 1313).cost;
        below += (base.mean <= cost.mean) as usize;
        lower_or_overlap += (base.mean <= cost.mean || base.overlaps(&cost)) as usize;
    }
    check(
        lower_or_overlap == 10,
        format!(
            "cost at mu* {:.5}±{:.5}; {below}/10 perturbations cost more, {lower_or_overlap}/10 more or overlapping",
            base.mean, base.half_width
        ),
    )
}

fn c14_hazard() -> Outcome {
    let n = 50;
    let lambda = 1.0;
    let mut parts = Vec::new();
    let mut ok = true;
    for (k, mu) in [0.5f64, 1.5, 3.0].into_iter().enumerate() {
        let horizon = 1.3e5 / (n as f64 * mu.min(lambda) * 0.9);
        let mut cfg = SimConfig::frozen(vec![mu; n], lambda, horizon);
        cfg.seed = 1400 + k as u64;
        let trace = run_simulation(&cfg, &model()).unwrap();
        let xs: Vec<f64> = trace
            .tasks
            .iter()
            .filter_map(|t| t.completion.map(|c| c - t.arrival))
            .take(100_000)
            .collect();
        let ks = ks_exponential(&xs, mu);
        ok &= xs.len() == 100_000 && ks.p_value > 0.01;
        parts.push(format!("mu={mu}: D={:.5}, p={:.3}", ks.statistic, ks.p_value));
    }
    check(ok, parts.join(", "))
}

fn files_of(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .map(|e| {
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

fn c15_determinism() -> Outcome {
    let mut compared = 0;
    for recipe in Recipe::ALL {
        let mut spec = recipe.spec();
        spec.seed = 15;
        spec.horizon = Some(800.0);
        spec.replications = 2;
        if spec.axis == SweepAxis::N {
            spec.values = vec![2.0, 10.0];
        }
        let mut snapshots = Vec::new();
        for workers in [1, 3, 1] {
            let dir = tempfile::tempdir().unwrap();
            spec.workers = workers;
            let res = execute(&spec).map_err(|e| format!("{recipe}: {e}"))?;
            write_experiment(dir.path(), &res).map_err(|e| e.to_string())?;
            snapshots.push(files_of(dir.path()));
        }
        if snapshots[0] != snapshots[1] || snapshots[0] != snapshots[2] {
            return Err(format!("{recipe} output differs across reruns"));
        }
        compared += snapshots[0].len();
    }
    check(
        true,
        format!("{} recipes, {compared} files byte-identical across reruns with 1 and 3 workers", Recipe::ALL.len()),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 15] = [
        ("optimal rate solver", c01_optimal_rate),
        ("server-count sweep", c02_servers),
        ("step-size sweep", c03_step_size),
        ("arrival-rate sweep", c04_lambda),
        ("stationary identities", c05_identities),
        ("idle-time concentration", c06_idle_concentration),
        ("supercritical regime", c07_supercritical),
        ("birth-death oracle", c08_birth_death),
        ("coupling", c09_coupling),
        ("limit ODE", c10_limit_ode),
        ("phi envelopes", c11_phi),
        ("infinite-buffer backlog", c12_backlog),
        ("cost optimality", c13_cost),
        ("hazard correctness", c14_hazard),
        ("determinism", c15_determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS {name}: {detail} [{secs:.1} s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL {name}: {detail} [{secs:.1} s]", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
