//! Steady-state estimation and stationary-identity checks.
//!
//! [`SteadyStateAccumulator`] is an [`Observer`]: it can run alongside the
//! engine without storing a trace, or be replayed over a recorded
//! [`SimTrace`]. After a burn-in prefix the remaining window is cut into
//! equal time batches; every reported quantity carries a batch-means 95%
//! confidence interval.
//!
//! Per server the accumulator integrates the busy indicator `X_v`, the idle
//! observation `I_v`, `mu_v X_v I_v`, and the dispatch intensity
//! `lambda n (1 - X_v) / N_idle` (taken as zero when no server is idle),
//! plain and weighted by `I_v`. The last two are evaluated lazily through the
//! running integrals `G(t) = int lambda n / N_idle` and
//! `G1(t) = int (s - t0) lambda n / N_idle ds`.

use std::collections::VecDeque;

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::cost::CostModel;
use crate::engine::{Event, EventKind, Observer, RunStart, SimTrace};

pub const DEFAULT_BURN_IN: f64 = 0.2;
pub const DEFAULT_BATCHES: usize = 32;
/// Events required per batch.
const MIN_EVENTS_PER_BATCH: u64 = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("insufficient data: {events} events after burn-in, {needed} needed; try a horizon of at least {required_horizon}")]
    InsufficientData {
        events: u64,
        needed: u64,
        required_horizon: f64,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid argument: {0}")]
    Domain(String),
}

/// Point estimate with a batch-means standard error and 95% half-width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Interval {
    pub mean: f64,
    pub std_error: f64,
    pub half_width: f64,
}

impl Interval {
    pub fn lo(&self) -> f64 {
        self.mean - self.half_width
    }
    pub fn hi(&self) -> f64 {
        self.mean + self.half_width
    }
    pub fn overlaps(&self, other: &Interval) -> bool {
        self.lo() <= other.hi() && other.lo() <= self.hi()
    }
}

/// Two-sided 95% Student-t quantile with `df` degrees of freedom.
pub fn t_quantile(df: usize) -> f64 {
    StudentsT::new(0.0, 1.0, df.max(1) as f64)
        .expect("valid degrees of freedom")
        .inverse_cdf(0.975)
}

fn sample_sd(values: &[f64]) -> f64 {
    let k = values.len();
    if k < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / k as f64;
    let ss = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
    (ss / (k - 1) as f64).sqrt()
}

/// Batch-means interval around `point`, with spread taken from the batches.
pub fn batch_interval(point: f64, batches: &[f64]) -> Interval {
    let k = batches.len();
    let se = if k < 2 {
        f64::INFINITY
    } else {
        sample_sd(batches) / (k as f64).sqrt()
    };
    Interval {
        mean: point,
        std_error: se,
        half_width: t_quantile(k.saturating_sub(1)) * se,
    }
}

/// Batch-means interval with the plain average as point estimate.
pub fn batch_means(batches: &[f64]) -> Interval {
    let mean = batches.iter().sum::<f64>() / batches.len().max(1) as f64;
    batch_interval(mean, batches)
}

#[derive(Debug, Clone, Copy, Default)]
struct ServerAcc {
    busy: f64,
    idle_obs: f64,
    mu_x_i: f64,
    intensity: f64,
    weighted: f64,
    dispatches: u64,
    idle_length: f64,
    idle_periods: u64,
}

#[derive(Debug, Clone, Copy, Default)]
struct GlobalAcc {
    arrivals: u64,
    drops: u64,
    events: u64,
    sojourn_sum: f64,
    sojourn_count: u64,
    in_system: f64,
    rate_sum: f64,
    power_sum: f64,
    samples: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ServerEstimate {
    pub server: usize,
    pub busy_fraction: Interval,
    /// Time average of the idle observation `I_v(t)`.
    pub mean_idle: Interval,
    /// Mean length of idle periods ending in the window; zero if none ended.
    pub mean_idle_period: Interval,
    /// Dispatches to the server per unit time.
    pub arrival_intensity: Interval,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RatePercentiles {
    pub p5: f64,
    pub p50: f64,
    pub p95: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SteadyStateEstimate {
    pub window_start: f64,
    pub window_end: f64,
    pub batches: usize,
    pub servers: Vec<ServerEstimate>,
    pub mean_sojourn: Interval,
    /// Accepted arrivals per server per unit time, `lambda * (1 - drop_fraction)`.
    pub effective_lambda: Interval,
    pub drop_fraction: Interval,
    pub cost: Interval,
    /// Tasks in system per server, time-averaged.
    pub mean_in_system: Interval,
    pub mean_rate: Interval,
    pub rate_percentiles: Option<RatePercentiles>,
    #[serde(skip)]
    pub batch_busy: Vec<Vec<f64>>,
    /// Per-batch mean idle-period length.
    #[serde(skip)]
    pub batch_idle: Vec<Vec<f64>>,
}

impl SteadyStateEstimate {
    pub fn mean_busy_fraction(&self) -> f64 {
        self.servers.iter().map(|s| s.busy_fraction.mean).sum::<f64>()
            / self.servers.len() as f64
    }

    /// `lambda_eff * E[S] - mean tasks in system per server`.
    pub fn little_residual(&self) -> f64 {
        self.effective_lambda.mean * self.mean_sojourn.mean - self.mean_in_system.mean
    }
}

/// One identity at one server.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Residual {
    pub estimate: f64,
    pub target: f64,
    pub std_error: f64,
    pub z: f64,
}

impl Residual {
    fn from_batches(est: &[f64], target: &[f64]) -> Self {
        let diff: Vec<f64> = est.iter().zip(target).map(|(a, b)| a - b).collect();
        let k = diff.len() as f64;
        let mean_diff = diff.iter().sum::<f64>() / k;
        let se = sample_sd(&diff) / k.sqrt();
        let z = if se > 0.0 {
            mean_diff / se
        } else if mean_diff.abs() <= 1e-12 {
            0.0
        } else {
            f64::INFINITY.copysign(mean_diff)
        };
        Residual {
            estimate: est.iter().sum::<f64>() / k,
            target: target.iter().sum::<f64>() / k,
            std_error: se,
            z,
        }
    }

    pub fn within(&self, sigmas: f64) -> bool {
        self.z.abs() <= sigmas
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ServerIdentities {
    pub server: usize,
    pub rate: f64,
    /// Dispatch intensity equals `mu_v E[X_v]`.
    pub a: Residual,
    /// `E[mu_v X_v I_v] = 1 - E[X_v]`.
    pub b: Residual,
    /// Intensity-weighted idle time equals `1 - E[X_v]`.
    pub c: Residual,
}

#[derive(Debug, Clone, Serialize)]
pub struct IdentityReport {
    pub servers: Vec<ServerIdentities>,
}

impl IdentityReport {
    /// Fraction of servers whose three residuals are all within `sigmas`.
    pub fn fraction_within(&self, sigmas: f64) -> f64 {
        let ok = self
            .servers
            .iter()
            .filter(|s| s.a.within(sigmas) && s.b.within(sigmas) && s.c.within(sigmas))
            .count();
        ok as f64 / self.servers.len() as f64
    }
}

/// Streaming estimator; see the module documentation.
#[derive(Debug, Clone)]
pub struct SteadyStateAccumulator {
    model: CostModel,
    burn_in_fraction: f64,
    batches: usize,

    n: usize,
    lambda: f64,
    horizon: f64,
    window_start: f64,
    batch_len: f64,
    frozen: Option<Vec<f64>>,

    queue: Vec<usize>,
    idle_since: Vec<f64>,
    last_idle: Vec<f64>,
    n_idle: usize,
    in_system: usize,
    fifo: Vec<VecDeque<f64>>,

    origin: f64,
    g: f64,
    g1: f64,
    last_t: f64,
    flush_t: Vec<f64>,
    flush_g: Vec<f64>,
    flush_g1: Vec<f64>,

    /// `None` during burn-in.
    batch: Option<usize>,
    next_boundary: f64,
    cur: Vec<ServerAcc>,
    cur_global: GlobalAcc,
    history: Vec<Vec<ServerAcc>>,
    global_history: Vec<GlobalAcc>,
    rate_pool: Vec<f64>,
    keep_rates: bool,
    finished: bool,
}

impl SteadyStateAccumulator {
    pub fn new(model: &CostModel, burn_in_fraction: f64, batches: usize) -> Result<Self, StatsError> {
        if !(0.0..1.0).contains(&burn_in_fraction) {
            return Err(StatsError::Domain(format!(
                "burn-in fraction {burn_in_fraction} outside [0, 1)"
            )));
        }
        if batches < 2 {
            return Err(StatsError::Domain(format!("need at least 2 batches, got {batches}")));
        }
        Ok(Self {
            model: model.clone(),
            burn_in_fraction,
            batches,
            n: 0,
            lambda: 0.0,
            horizon: 0.0,
            window_start: 0.0,
            batch_len: 0.0,
            frozen: None,
            queue: Vec::new(),
            idle_since: Vec::new(),
            last_idle: Vec::new(),
            n_idle: 0,
            in_system: 0,
            fifo: Vec::new(),
            origin: 0.0,
            g: 0.0,
            g1: 0.0,
            last_t: 0.0,
            flush_t: Vec::new(),
            flush_g: Vec::new(),
            flush_g1: Vec::new(),
            batch: None,
            next_boundary: 0.0,
            cur: Vec::new(),
            cur_global: GlobalAcc::default(),
            history: Vec::new(),
            global_history: Vec::new(),
            rate_pool: Vec::new(),
            keep_rates: true,
            finished: false,
        })
    }

    /// Skip pooling rate samples for percentiles.
    pub fn without_percentiles(mut self) -> Self {
        self.keep_rates = false;
        self
    }

    fn advance_global(&mut self, t: f64) {
        if t > self.last_t {
            if self.n_idle > 0 {
                let k = self.lambda * self.n as f64 / self.n_idle as f64;
                let (a, b) = (self.last_t - self.origin, t - self.origin);
                self.g += k * (b - a);
                self.g1 += k * 0.5 * (b - a) * (b + a);
            }
            self.cur_global.in_system += self.in_system as f64 * (t - self.last_t);
            self.last_t = t;
        }
    }

    fn flush(&mut self, v: usize, t: f64) {
        let f = self.flush_t[v];
        let dt = t - f;
        let acc = &mut self.cur[v];
        if self.queue[v] > 0 {
            let i = self.last_idle[v];
            acc.busy += dt;
            acc.idle_obs += i * dt;
            if let Some(rates) = &self.frozen {
                acc.mu_x_i += rates[v] * i * dt;
            }
        } else {
            let a = self.idle_since[v];
            acc.idle_obs += dt * 0.5 * ((t - a) + (f - a));
            let dg = self.g - self.flush_g[v];
            acc.intensity += dg;
            acc.weighted += (self.g1 - self.flush_g1[v]) - (a - self.origin) * dg;
        }
        self.flush_t[v] = t;
        self.flush_g[v] = self.g;
        self.flush_g1[v] = self.g1;
    }

    fn close_batch(&mut self, boundary: f64) {
        self.advance_global(boundary);
        for v in 0..self.n {
            self.flush(v, boundary);
        }
        let servers = std::mem::replace(&mut self.cur, vec![ServerAcc::default(); self.n]);
        let global = std::mem::take(&mut self.cur_global);
        if self.batch.is_some() {
            self.history.push(servers);
            self.global_history.push(global);
        }
        self.origin = boundary;
        self.g = 0.0;
        self.g1 = 0.0;
        for v in 0..self.n {
            self.flush_g[v] = 0.0;
            self.flush_g1[v] = 0.0;
        }
        let next = self.batch.map_or(0, |b| b + 1);
        self.batch = Some(next);
        self.next_boundary = self.window_start + (next + 1) as f64 * self.batch_len;
        if next + 1 == self.batches {
            self.next_boundary = self.horizon;
        }
    }

    fn roll_to(&mut self, t: f64) {
        while t >= self.next_boundary && self.history.len() < self.batches {
            let b = self.next_boundary;
            self.close_batch(b);
        }
    }

    fn in_window(&self) -> bool {
        self.batch.is_some() && self.history.len() < self.batches
    }

    /// Closes the run and produces the estimate.
    pub fn finish(&mut self) -> Result<SteadyStateEstimate, StatsError> {
        if !self.finished {
            self.on_finish(self.horizon);
        }
        let events: u64 = self.global_history.iter().map(|g| g.events).sum();
        let needed = MIN_EVENTS_PER_BATCH * self.batches as u64;
        if self.global_history.len() < self.batches || events < needed {
            let span = self.horizon - self.window_start;
            let rate = events.max(1) as f64 / span.max(f64::MIN_POSITIVE);
            let required_horizon = (needed as f64 / rate) / (1.0 - self.burn_in_fraction);
            return Err(StatsError::InsufficientData {
                events,
                needed,
                required_horizon,
            });
        }
        let k = self.batches;
        let lens: Vec<f64> = (0..k).map(|b| self.batch_length(b)).collect();
        let span: f64 = lens.iter().sum();

        let mut servers = Vec::with_capacity(self.n);
        let mut batch_busy = Vec::with_capacity(self.n);
        let mut batch_idle = Vec::with_capacity(self.n);
        for v in 0..self.n {
            let busy: Vec<f64> = (0..k).map(|b| self.history[b][v].busy / lens[b]).collect();
            let idle: Vec<f64> = (0..k).map(|b| self.history[b][v].idle_obs / lens[b]).collect();
            let period = |len: f64, count: u64| if count > 0 { len / count as f64 } else { 0.0 };
            let periods: Vec<f64> = (0..k)
                .map(|b| period(self.history[b][v].idle_length, self.history[b][v].idle_periods))
                .collect();
            let all_periods = period(
                self.history.iter().map(|h| h[v].idle_length).sum(),
                self.history.iter().map(|h| h[v].idle_periods).sum(),
            );
            let disp: Vec<f64> = (0..k)
                .map(|b| self.history[b][v].dispatches as f64 / lens[b])
                .collect();
            let total = |f: &dyn Fn(&ServerAcc) -> f64| {
                self.history.iter().map(|h| f(&h[v])).sum::<f64>() / span
            };
            servers.push(ServerEstimate {
                server: v,
                busy_fraction: batch_interval(total(&|a| a.busy), &busy),
                mean_idle: batch_interval(total(&|a| a.idle_obs), &idle),
                mean_idle_period: batch_interval(all_periods, &periods),
                arrival_intensity: batch_interval(total(&|a| a.dispatches as f64), &disp),
            });
            batch_busy.push(busy);
            batch_idle.push(periods);
        }

        let gh = &self.global_history;
        let sum = |f: &dyn Fn(&GlobalAcc) -> f64| gh.iter().map(f).sum::<f64>();
        let ratio = |num: f64, den: f64| if den > 0.0 { num / den } else { f64::NAN };

        let sojourn_batches: Vec<f64> = gh
            .iter()
            .filter(|g| g.sojourn_count > 0)
            .map(|g| g.sojourn_sum / g.sojourn_count as f64)
            .collect();
        let mean_sojourn = batch_interval(
            ratio(sum(&|g| g.sojourn_sum), sum(&|g| g.sojourn_count as f64)),
            &sojourn_batches,
        );

        let drop_batches: Vec<f64> = gh
            .iter()
            .filter(|g| g.arrivals > 0)
            .map(|g| g.drops as f64 / g.arrivals as f64)
            .collect();
        let drop_fraction = batch_interval(
            ratio(sum(&|g| g.drops as f64), sum(&|g| g.arrivals as f64)),
            &drop_batches,
        );
        let lambda = self.lambda;
        let effective_lambda = Interval {
            mean: lambda * (1.0 - drop_fraction.mean),
            std_error: lambda * drop_fraction.std_error,
            half_width: lambda * drop_fraction.half_width,
        };

        let n = self.n as f64;
        let in_system_batches: Vec<f64> = (0..k)
            .map(|b| gh[b].in_system / (lens[b] * n))
            .collect();
        let mean_in_system = batch_interval(sum(&|g| g.in_system) / (span * n), &in_system_batches);

        let (rate_batches, power_batches): (Vec<f64>, Vec<f64>) = match &self.frozen {
            Some(rates) => {
                let r = rates.iter().sum::<f64>() / n;
                let p = rates.iter().map(|&x| self.model.h(x)).sum::<f64>() / n;
                (vec![r; k], vec![p; k])
            }
            None => gh
                .iter()
                .filter(|g| g.samples > 0)
                .map(|g| (g.rate_sum / g.samples as f64, g.power_sum / g.samples as f64))
                .unzip(),
        };
        let mean_rate = if rate_batches.is_empty() {
            batch_interval(f64::NAN, &[])
        } else {
            batch_means(&rate_batches)
        };
        let cost_of = |sojourn: f64, power: f64| lambda * self.model.g(1.0 / sojourn) + power;
        let cost = if power_batches.is_empty() || sojourn_batches.is_empty() {
            batch_interval(f64::NAN, &[])
        } else {
            let paired: Vec<f64> = gh
                .iter()
                .zip(&power_batches)
                .filter(|(g, _)| g.sojourn_count > 0)
                .map(|(g, &p)| cost_of(g.sojourn_sum / g.sojourn_count as f64, p))
                .collect();
            let power = power_batches.iter().sum::<f64>() / power_batches.len() as f64;
            batch_interval(cost_of(mean_sojourn.mean, power), &paired)
        };

        let rate_percentiles = if self.rate_pool.is_empty() {
            None
        } else {
            let mut pool = self.rate_pool.clone();
            pool.sort_by(f64::total_cmp);
            Some(RatePercentiles {
                p5: quantile_sorted(&pool, 0.05),
                p50: quantile_sorted(&pool, 0.5),
                p95: quantile_sorted(&pool, 0.95),
            })
        };

        Ok(SteadyStateEstimate {
            window_start: self.window_start,
            window_end: self.horizon,
            batches: k,
            servers,
            mean_sojourn,
            effective_lambda,
            drop_fraction,
            cost,
            mean_in_system,
            mean_rate,
            rate_percentiles,
            batch_busy,
            batch_idle,
        })
    }

    fn batch_length(&self, b: usize) -> f64 {
        let start = self.window_start + b as f64 * self.batch_len;
        let end = if b + 1 == self.batches {
            self.horizon
        } else {
            self.window_start + (b + 1) as f64 * self.batch_len
        };
        end - start
    }

    /// Stationary identities at fixed rates; requires a frozen-rate run.
    pub fn identities(&mut self) -> Result<IdentityReport, StatsError> {
        let rates = self
            .frozen
            .clone()
            .ok_or_else(|| StatsError::Contract("identities need a rate-frozen run".into()))?;
        self.finish()?;
        let k = self.batches;
        let lens: Vec<f64> = (0..k).map(|b| self.batch_length(b)).collect();
        let servers = (0..self.n)
            .map(|v| {
                let per = |f: &dyn Fn(&ServerAcc) -> f64| -> Vec<f64> {
                    (0..k).map(|b| f(&self.history[b][v]) / lens[b]).collect()
                };
                let busy = per(&|a| a.busy);
                let free: Vec<f64> = busy.iter().map(|x| 1.0 - x).collect();
                let mu_busy: Vec<f64> = busy.iter().map(|x| rates[v] * x).collect();
                ServerIdentities {
                    server: v,
                    rate: rates[v],
                    a: Residual::from_batches(&per(&|a| a.intensity), &mu_busy),
                    b: Residual::from_batches(&per(&|a| a.mu_x_i), &free),
                    c: Residual::from_batches(&per(&|a| a.weighted), &free),
                }
            })
            .collect();
        Ok(IdentityReport { servers })
    }
}

impl Observer for SteadyStateAccumulator {
    fn on_start(&mut self, start: &RunStart<'_>) {
        let cfg = start.config;
        let n = cfg.n;
        self.n = n;
        self.lambda = cfg.lambda;
        self.horizon = cfg.horizon;
        self.window_start = cfg.horizon * self.burn_in_fraction;
        self.batch_len = (cfg.horizon - self.window_start) / self.batches as f64;
        self.frozen = cfg.rate_frozen.then(|| start.initial_rates.to_vec());
        self.queue = start.initial_queue.to_vec();
        self.idle_since = vec![0.0; n];
        self.last_idle = vec![0.0; n];
        self.n_idle = self.queue.iter().filter(|&&q| q == 0).count();
        self.in_system = self.queue.iter().sum();
        self.fifo = self
            .queue
            .iter()
            .map(|&q| std::iter::repeat_n(0.0, q).collect())
            .collect();
        self.origin = 0.0;
        self.g = 0.0;
        self.g1 = 0.0;
        self.last_t = 0.0;
        self.flush_t = vec![0.0; n];
        self.flush_g = vec![0.0; n];
        self.flush_g1 = vec![0.0; n];
        self.batch = None;
        self.next_boundary = self.window_start;
        self.cur = vec![ServerAcc::default(); n];
        self.cur_global = GlobalAcc::default();
        self.history.clear();
        self.global_history.clear();
        self.rate_pool.clear();
        self.finished = false;
        if self.window_start == 0.0 {
            self.close_batch(0.0);
        }
    }

    fn on_event(&mut self, e: &Event) {
        let t = e.time;
        self.roll_to(t);
        self.advance_global(t);
        let counting = self.in_window();
        if counting {
            self.cur_global.events += 1;
        }
        match (e.kind, e.server) {
            (EventKind::Drop, _) => {
                if counting {
                    self.cur_global.arrivals += 1;
                    self.cur_global.drops += 1;
                }
            }
            (EventKind::Arrival, Some(v)) => {
                self.flush(v, t);
                if counting {
                    self.cur_global.arrivals += 1;
                    self.cur[v].dispatches += 1;
                }
                if self.queue[v] == 0 {
                    self.last_idle[v] = t - self.idle_since[v];
                    if counting {
                        self.cur[v].idle_length += self.last_idle[v];
                        self.cur[v].idle_periods += 1;
                    }
                    self.n_idle -= 1;
                }
                self.queue[v] += 1;
                self.in_system += 1;
                self.fifo[v].push_back(t);
            }
            (EventKind::Departure, Some(v)) => {
                self.flush(v, t);
                self.queue[v] -= 1;
                self.in_system -= 1;
                if self.queue[v] == 0 {
                    self.idle_since[v] = t;
                    self.n_idle += 1;
                } else {
                    self.last_idle[v] = 0.0;
                }
                if let Some(a) = self.fifo[v].pop_front() {
                    if counting {
                        self.cur_global.sojourn_sum += t - a;
                        self.cur_global.sojourn_count += 1;
                    }
                }
            }
            _ => {}
        }
    }

    fn on_rate_sample(&mut self, time: f64, rates: &[f64]) {
        self.roll_to(time);
        if !self.in_window() {
            return;
        }
        let n = rates.len() as f64;
        self.cur_global.rate_sum += rates.iter().sum::<f64>() / n;
        self.cur_global.power_sum += rates.iter().map(|&r| self.model.h(r)).sum::<f64>() / n;
        self.cur_global.samples += 1;
        if self.keep_rates {
            self.rate_pool.extend_from_slice(rates);
        }
    }

    fn on_finish(&mut self, horizon: f64) {
        if self.finished {
            return;
        }
        self.roll_to(horizon);
        self.finished = true;
    }
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn replay(trace: &SimTrace, acc: &mut SteadyStateAccumulator) {
    acc.on_start(&RunStart {
        config: &trace.config,
        initial_rates: &trace.initial_rates,
        initial_queue: &trace.initial_queue,
    });
    let mut samples = trace.rate_samples.iter().peekable();
    for e in &trace.events {
        while let Some(s) = samples.next_if(|s| s.time < e.time) {
            acc.on_rate_sample(s.time, &s.rates);
        }
        acc.on_event(e);
    }
    for s in samples {
        acc.on_rate_sample(s.time, &s.rates);
    }
    acc.on_finish(trace.config.horizon);
}

/// Batch-means steady-state estimate of a recorded trace.
pub fn estimate_steady_state(
    trace: &SimTrace,
    model: &CostModel,
    burn_in_fraction: f64,
    batches: usize,
) -> Result<SteadyStateEstimate, StatsError> {
    let mut acc = SteadyStateAccumulator::new(model, burn_in_fraction, batches)?;
    replay(trace, &mut acc);
    acc.finish()
}

/// Stationary identities of a rate-frozen trace, with default burn-in and batches.
pub fn check_stationary_identities(
    trace: &SimTrace,
    model: &CostModel,
) -> Result<IdentityReport, StatsError> {
    if !trace.config.rate_frozen {
        return Err(StatsError::Contract(
            "stationary identities hold at fixed rates; trace has adaptive rates".into(),
        ));
    }
    let mut acc = SteadyStateAccumulator::new(model, DEFAULT_BURN_IN, DEFAULT_BATCHES)?;
    replay(trace, &mut acc);
    acc.identities()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RenewalResidual {
    pub server: usize,
    pub busy_fraction: f64,
    pub predicted: f64,
    pub std_error: f64,
    pub z: f64,
}

/// `E[X_v] - 1 / (1 + mu_v E[I_v])` per server, in standard-error units.
///
/// `E[I_v]` is the mean idle-period length, for which the identity is exact
/// at every `n`. The time average of `I_v(t)` weights long periods more and
/// agrees only when idle periods are exponential.
///
/// Uses paired batches when the estimate carries them, otherwise the delta
/// method on the two marginal intervals.
pub fn check_renewal_identity(est: &SteadyStateEstimate, rates: &[f64]) -> Vec<RenewalResidual> {
    est.servers
        .iter()
        .zip(rates)
        .map(|(s, &mu)| {
            let v = s.server;
            let x = s.busy_fraction.mean;
            let i = s.mean_idle_period.mean;
            let predicted = 1.0 / (1.0 + mu * i);
            let se = match (est.batch_busy.get(v), est.batch_idle.get(v)) {
                (Some(bx), Some(bi)) if bx.len() >= 2 => {
                    let d: Vec<f64> = bx
                        .iter()
                        .zip(bi)
                        .map(|(x, i)| x - 1.0 / (1.0 + mu * i))
                        .collect();
                    sample_sd(&d) / (d.len() as f64).sqrt()
                }
                _ => {
                    let slope = mu / (1.0 + mu * i).powi(2);
                    (s.busy_fraction.std_error.powi(2) + (slope * s.mean_idle_period.std_error).powi(2))
                        .sqrt()
                }
            };
            let r = x - predicted;
            let z = if se > 0.0 {
                r / se
            } else if r.abs() <= 1e-12 {
                0.0
            } else {
                f64::INFINITY.copysign(r)
            };
            RenewalResidual {
                server: v,
                busy_fraction: x,
                predicted,
                std_error: se,
                z,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
    pub samples: usize,
}

/// One-sample Kolmogorov-Smirnov test against `Exp(rate)`.
pub fn ks_exponential(samples: &[f64], rate: f64) -> KsResult {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let f = 1.0 - (-rate * x).exp();
        d = d.max((i + 1) as f64 / n - f).max(f - i as f64 / n);
    }
    let sqrt_n = n.sqrt();
    KsResult {
        statistic: d,
        p_value: kolmogorov_survival((sqrt_n + 0.12 + 0.11 / sqrt_n) * d),
        samples: xs.len(),
    }
}

/// `P(K > x)` for the Kolmogorov distribution.
pub fn kolmogorov_survival(x: f64) -> f64 {
    if x < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * x * x).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kolmogorov_reference_points() {
        // standard critical values: 1.3581 at 5%, 1.6276 at 1%
        assert!((kolmogorov_survival(1.3581) - 0.05).abs() < 1e-4);
        assert!((kolmogorov_survival(1.6276) - 0.01).abs() < 1e-4);
        assert_eq!(kolmogorov_survival(0.0), 1.0);
    }

    #[test]
    fn ks_rejects_wrong_rate() {
        let xs: Vec<f64> = (1..2000).map(|i| -(1.0 - i as f64 / 2000.0).ln()).collect();
        assert!(ks_exponential(&xs, 1.0).p_value > 0.5);
        assert!(ks_exponential(&xs, 1.5).p_value < 1e-6);
    }

    #[test]
    fn t_quantile_values() {
        assert!((t_quantile(31) - 2.0395).abs() < 1e-3);
        assert!((t_quantile(1_000_000) - 1.95996).abs() < 1e-3);
    }

    #[test]
    fn quantiles() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile_sorted(&xs, 0.5), 3.0);
        assert_eq!(quantile_sorted(&xs, 0.0), 1.0);
        assert!((quantile_sorted(&xs, 0.05) - 1.2).abs() < 1e-12);
    }

    #[test]
    fn residual_flags_constant_offset() {
        let r = Residual::from_batches(&[1.0; 4], &[0.0; 4]);
        assert!(r.z.is_infinite());
        let r = Residual::from_batches(&[0.5; 4], &[0.5; 4]);
        assert_eq!(r.z, 0.0);
    }
}
