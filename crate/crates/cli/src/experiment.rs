//! Sweep execution with replication fan-out.

use rayon::prelude::*;
use serde::Serialize;

use ratescale::cost::CostModel;
use ratescale::engine::{
    initial_rate_vector, run_with_observer, Event, EventKind, Observer, RunStart, SimConfig,
};
use ratescale::meanfield::{integrate_limit_ode, IdleBackend};
use ratescale::stats::{quantile_sorted, t_quantile, SteadyStateAccumulator, SteadyStateEstimate};

use crate::config::{ExperimentSpec, RunBackend};
use crate::output;
use crate::seeds::run_seed;
use crate::CliError;

/// Limit-ODE step in slow time.
const MEANFIELD_STEP: f64 = 0.05;

/// One snapshot of the rate vector and queues.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrajectoryRow {
    pub point: usize,
    pub replication: usize,
    pub time: f64,
    pub mean_rate: f64,
    pub min_rate: f64,
    pub p5: f64,
    pub p50: f64,
    pub p95: f64,
    pub max_rate: f64,
    pub max_queue: f64,
    pub in_system: f64,
}

fn rate_row(point: usize, replication: usize, time: f64, rates: &[f64]) -> TrajectoryRow {
    let mut sorted = rates.to_vec();
    sorted.sort_by(f64::total_cmp);
    TrajectoryRow {
        point,
        replication,
        time,
        mean_rate: rates.iter().sum::<f64>() / rates.len() as f64,
        min_rate: sorted[0],
        p5: quantile_sorted(&sorted, 0.05),
        p50: quantile_sorted(&sorted, 0.5),
        p95: quantile_sorted(&sorted, 0.95),
        max_rate: sorted[sorted.len() - 1],
        max_queue: f64::NAN,
        in_system: f64::NAN,
    }
}

/// Records a [`TrajectoryRow`] at every rate sample.
#[derive(Debug, Default)]
pub struct TrajectoryObserver {
    point: usize,
    replication: usize,
    enabled: bool,
    queue: Vec<usize>,
    in_system: usize,
    pub rows: Vec<TrajectoryRow>,
}

impl TrajectoryObserver {
    pub fn new(point: usize, replication: usize, enabled: bool) -> Self {
        Self {
            point,
            replication,
            enabled,
            ..Self::default()
        }
    }
}

impl Observer for TrajectoryObserver {
    fn on_start(&mut self, start: &RunStart<'_>) {
        self.queue = start.initial_queue.to_vec();
        self.in_system = self.queue.iter().sum();
    }

    fn on_event(&mut self, event: &Event) {
        match (event.kind, event.server) {
            (EventKind::Arrival, Some(v)) => {
                self.queue[v] += 1;
                self.in_system += 1;
            }
            (EventKind::Departure, Some(v)) => {
                self.queue[v] -= 1;
                self.in_system -= 1;
            }
            _ => {}
        }
    }

    fn on_rate_sample(&mut self, time: f64, rates: &[f64]) {
        if !self.enabled {
            return;
        }
        let mut row = rate_row(self.point, self.replication, time, rates);
        row.max_queue = self.queue.iter().copied().max().unwrap_or(0) as f64;
        row.in_system = self.in_system as f64;
        self.rows.push(row);
    }
}

/// Outcome of one (sweep point, replication) run; one row of `sweep.csv`.
#[derive(Debug, Clone, Serialize)]
pub struct PointResult {
    pub point: usize,
    pub value: f64,
    pub replication: usize,
    pub seed: u64,
    pub n: usize,
    pub m: f64,
    pub lambda: f64,
    pub horizon: f64,
    pub mu_star: f64,
    pub mean_rate: f64,
    pub mean_rate_se: f64,
    pub p5: f64,
    pub p50: f64,
    pub p95: f64,
    pub busy_fraction: f64,
    pub mean_idle: f64,
    pub mean_sojourn: f64,
    pub drop_fraction: f64,
    pub cost: f64,
    pub cost_se: f64,
    pub final_min_rate: f64,
    pub final_max_rate: f64,
    #[serde(skip)]
    pub estimate: Option<SteadyStateEstimate>,
    #[serde(skip)]
    pub final_rates: Vec<f64>,
    #[serde(skip)]
    pub trajectory: Vec<TrajectoryRow>,
}

/// Per-point aggregate over replications; one row of `sweep_summary.csv`.
#[derive(Debug, Clone, Serialize)]
pub struct SummaryRow {
    pub point: usize,
    pub value: f64,
    pub replications: usize,
    pub mu_star: f64,
    pub mean_rate: f64,
    /// 95% half-width across replications, or the batch-means half-width
    /// of a single replication.
    pub mean_rate_ci: f64,
    pub gap: f64,
    pub relative_gap: f64,
    pub p5: f64,
    pub p50: f64,
    pub p95: f64,
    pub spread: f64,
    pub busy_fraction: f64,
    pub cost: f64,
    pub cost_ci: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub spec: ExperimentSpec,
    pub points: Vec<PointResult>,
    pub summary: Vec<SummaryRow>,
}

impl ExperimentResult {
    pub fn trajectory(&self) -> impl Iterator<Item = &TrajectoryRow> {
        self.points.iter().flat_map(|p| p.trajectory.iter())
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn replication_ci(xs: &[f64], single: f64) -> f64 {
    let k = xs.len();
    if k < 2 {
        return single;
    }
    let m = mean(xs);
    let sd = (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (k - 1) as f64).sqrt();
    t_quantile(k - 1) * sd / (k as f64).sqrt()
}

fn run_engine(
    spec: &ExperimentSpec,
    model: &CostModel,
    cfg: &SimConfig,
    point: usize,
    replication: usize,
) -> Result<(SteadyStateEstimate, Vec<f64>, Vec<TrajectoryRow>), CliError> {
    let mut acc = SteadyStateAccumulator::new(model, spec.burn_in, spec.batches)?;
    let mut traj = TrajectoryObserver::new(point, replication, spec.trajectory);
    let outcome = run_with_observer(cfg, model, (&mut acc, &mut traj))?;
    let est = acc.finish()?;
    Ok((est, outcome.final_rates, traj.rows))
}

/// Initial rates moved into the model's box, with a warning when any moved.
pub fn clamped_initial_rates(cfg: &SimConfig, model: &CostModel) -> Vec<f64> {
    let raw = initial_rate_vector(cfg);
    let moved = raw
        .iter()
        .filter(|&&r| r < model.mu_minus || r > model.mu_plus)
        .count();
    if moved > 0 {
        eprintln!(
            "warning: {moved} of {} initial rates clamped into [{}, {}]",
            raw.len(),
            model.mu_minus,
            model.mu_plus
        );
    }
    raw.iter()
        .map(|r| r.clamp(model.mu_minus, model.mu_plus))
        .collect()
}

fn run_job(
    spec: &ExperimentSpec,
    model: &CostModel,
    point: usize,
    value: f64,
    replication: usize,
) -> Result<PointResult, CliError> {
    let mut cfg = spec.config_at(value);
    cfg.seed = run_seed(spec.seed, point, replication);
    let mu_star = model.solve_mu_star(cfg.lambda)?.mu_star;
    let mut result = PointResult {
        point,
        value,
        replication,
        seed: cfg.seed,
        n: cfg.n,
        m: cfg.m,
        lambda: cfg.lambda,
        horizon: cfg.horizon,
        mu_star,
        mean_rate: f64::NAN,
        mean_rate_se: f64::NAN,
        p5: f64::NAN,
        p50: f64::NAN,
        p95: f64::NAN,
        busy_fraction: f64::NAN,
        mean_idle: f64::NAN,
        mean_sojourn: f64::NAN,
        drop_fraction: f64::NAN,
        cost: f64::NAN,
        cost_se: f64::NAN,
        final_min_rate: f64::NAN,
        final_max_rate: f64::NAN,
        estimate: None,
        final_rates: Vec::new(),
        trajectory: Vec::new(),
    };
    match spec.backend {
        RunBackend::Engine => {
            let (est, final_rates, trajectory) = run_engine(spec, model, &cfg, point, replication)?;
            result.mean_rate = est.mean_rate.mean;
            result.mean_rate_se = est.mean_rate.std_error;
            if let Some(p) = est.rate_percentiles {
                result.p5 = p.p5;
                result.p50 = p.p50;
                result.p95 = p.p95;
            }
            result.busy_fraction = est.mean_busy_fraction();
            result.mean_idle =
                est.servers.iter().map(|s| s.mean_idle.mean).sum::<f64>() / est.servers.len() as f64;
            result.mean_sojourn = est.mean_sojourn.mean;
            result.drop_fraction = est.drop_fraction.mean;
            result.cost = est.cost.mean;
            result.cost_se = est.cost.std_error;
            result.final_rates = final_rates;
            result.trajectory = trajectory;
            result.estimate = Some(est);
        }
        RunBackend::Meanfield => {
            let mu0 = clamped_initial_rates(&cfg, model);
            let slow_horizon = cfg.horizon / cfg.m;
            let traj = integrate_limit_ode(
                model,
                cfg.lambda,
                &mu0,
                slow_horizon,
                MEANFIELD_STEP,
                &IdleBackend::FixedPoint,
            )?;
            let last = traj.last().to_vec();
            let row = rate_row(point, replication, cfg.horizon, &last);
            result.mean_rate = row.mean_rate;
            result.mean_rate_se = 0.0;
            result.p5 = row.p5;
            result.p50 = row.p50;
            result.p95 = row.p95;
            result.busy_fraction = *traj.busy_fraction.last().unwrap_or(&f64::NAN);
            result.mean_idle = (1.0 - result.busy_fraction) / cfg.lambda;
            if spec.trajectory {
                let every = (traj.times.len() / spec.samples.max(1)).max(1);
                result.trajectory = traj
                    .times
                    .iter()
                    .zip(&traj.rates)
                    .step_by(every)
                    .map(|(t, r)| rate_row(point, replication, t * cfg.m, r))
                    .collect();
            }
            result.final_rates = last;
        }
    }
    result.final_min_rate = result.final_rates.iter().copied().fold(f64::INFINITY, f64::min);
    result.final_max_rate = result.final_rates.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(result)
}

fn summarize(spec: &ExperimentSpec, points: &[PointResult]) -> Vec<SummaryRow> {
    spec.points()
        .iter()
        .enumerate()
        .map(|(p, &value)| {
            let reps: Vec<&PointResult> = points.iter().filter(|r| r.point == p).collect();
            let col = |f: fn(&PointResult) -> f64| reps.iter().map(|r| f(r)).collect::<Vec<f64>>();
            let rates = col(|r| r.mean_rate);
            let costs = col(|r| r.cost);
            let single_hw = |se: f64| se * t_quantile(spec.batches - 1);
            let mean_rate = mean(&rates);
            let mu_star = reps[0].mu_star;
            let (p5, p50, p95) = (mean(&col(|r| r.p5)), mean(&col(|r| r.p50)), mean(&col(|r| r.p95)));
            SummaryRow {
                point: p,
                value,
                replications: reps.len(),
                mu_star,
                mean_rate,
                mean_rate_ci: replication_ci(&rates, single_hw(reps[0].mean_rate_se)),
                gap: (mean_rate - mu_star).abs(),
                relative_gap: (mean_rate - mu_star).abs() / mu_star,
                p5,
                p50,
                p95,
                spread: p95 - p5,
                busy_fraction: mean(&col(|r| r.busy_fraction)),
                cost: mean(&costs),
                cost_ci: replication_ci(&costs, single_hw(reps[0].cost_se)),
            }
        })
        .collect()
}

/// Runs every (point, replication) pair without writing anything.
pub fn execute(spec: &ExperimentSpec) -> Result<ExperimentResult, CliError> {
    spec.validate()?;
    let model = spec.model.build()?;
    let jobs: Vec<(usize, f64, usize)> = spec
        .points()
        .iter()
        .enumerate()
        .flat_map(|(p, &v)| (0..spec.replications).map(move |r| (p, v, r)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.workers)
        .build()
        .map_err(|e| CliError::Config(format!("worker pool: {e}")))?;
    let outcomes: Vec<Result<PointResult, CliError>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(p, v, r)| run_job(spec, &model, p, v, r))
            .collect()
    });
    let points = outcomes.into_iter().collect::<Result<Vec<_>, _>>()?;
    let summary = summarize(spec, &points);
    Ok(ExperimentResult {
        spec: spec.clone(),
        points,
        summary,
    })
}

/// Runs the experiment and writes its data files into `spec.out`.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentResult, CliError> {
    let result = execute(spec)?;
    output::write_experiment(&spec.out, &result)?;
    Ok(result)
}
