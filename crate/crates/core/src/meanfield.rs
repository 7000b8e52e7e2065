//! Deterministic mean-field counterparts of the stochastic system.
//!
//! * [`busy_fraction_fixed_point`]: the equilibrium busy fraction `c` at a
//!   fixed rate vector.
//! * [`integrate_phi`] and [`compute_c_paper`]: the per-server busy-mass
//!   process and its value at the horizon `log(n) / alpha`.
//! * [`integrate_limit_ode`]: the rate dynamics with the idle time replaced
//!   by a stationary surrogate.
//! * [`birth_death_stationary`] and the closed forms of the bounding
//!   birth-death chains.

use serde::Serialize;
use thiserror::Error;

use crate::cost::CostModel;
use crate::engine::{run_with_observer, BufferMode, EngineError, SimConfig};
use crate::stats::{SteadyStateAccumulator, StatsError};

#[derive(Debug, Error)]
pub enum MeanFieldError {
    #[error("invalid argument: {0}")]
    Domain(String),
    #[error("no fixed point in [0, {upper}]: F(upper) - upper = {excess}")]
    Infeasible { upper: f64, excess: f64 },
    #[error("total busy mass {mass} reached 1 at t = {time}")]
    Singular { time: f64, mass: f64 },
    #[error("idle backend {backend}: {message}")]
    Backend {
        backend: &'static str,
        message: String,
    },
    #[error("non-finite rate at t = {time}")]
    NonFinite { time: f64 },
}

fn check_rates(rates: &[f64]) -> Result<(), MeanFieldError> {
    if rates.is_empty() {
        return Err(MeanFieldError::Domain("empty rate vector".into()));
    }
    if let Some(r) = rates.iter().find(|r| !(r.is_finite() && **r > 0.0)) {
        return Err(MeanFieldError::Domain(format!("rates must be positive, got {r}")));
    }
    Ok(())
}

fn check_lambda(lambda: f64) -> Result<(), MeanFieldError> {
    if lambda > 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(MeanFieldError::Domain(format!("lambda must be positive, got {lambda}")))
    }
}

fn min_max(xs: &[f64]) -> (f64, f64) {
    xs.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Equilibrium busy fraction at fixed rates.
///
/// Returns 1 when `mean(rates) <= lambda`; otherwise the root of
/// `F(B) = mean_v lambda / (lambda + mu_v (1 - B))` in
/// `[0, 1 - delta / max(rates)]`, which excludes the spurious root `B = 1`.
pub fn busy_fraction_fixed_point(rates: &[f64], lambda: f64) -> Result<f64, MeanFieldError> {
    check_rates(rates)?;
    check_lambda(lambda)?;
    let delta = mean(rates) - lambda;
    if delta <= 0.0 {
        return Ok(1.0);
    }
    let (_, top) = min_max(rates);
    let excess = |b: f64| {
        rates
            .iter()
            .map(|&mu| lambda / (lambda + mu * (1.0 - b)))
            .sum::<f64>()
            / rates.len() as f64
            - b
    };
    let mut lo = 0.0;
    let mut hi = 1.0 - delta / top;
    let at_hi = excess(hi);
    if at_hi.abs() <= 1e-12 {
        return Ok(hi);
    }
    if at_hi > 0.0 {
        return Err(MeanFieldError::Infeasible {
            upper: hi,
            excess: at_hi,
        });
    }
    loop {
        let mid = 0.5 * (lo + hi);
        let f = excess(mid);
        if f.abs() <= 1e-12 || hi - lo <= f64::EPSILON * hi {
            return Ok(mid);
        }
        if f > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
}

/// Per-server busy mass: atom `v` sits at rate `mu_v` with mass in `[0, 1/n]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AtomMeasure {
    pub rates: Vec<f64>,
    pub mass: Vec<f64>,
}

impl AtomMeasure {
    pub fn zero(rates: &[f64]) -> Self {
        Self {
            rates: rates.to_vec(),
            mass: vec![0.0; rates.len()],
        }
    }

    /// Stationary point `phi_v = (lambda / n) / (lambda + mu_v (1 - B))`.
    pub fn equilibrium(rates: &[f64], lambda: f64) -> Result<Self, MeanFieldError> {
        let b = busy_fraction_fixed_point(rates, lambda)?;
        let n = rates.len() as f64;
        Ok(Self {
            rates: rates.to_vec(),
            mass: rates
                .iter()
                .map(|&mu| (lambda / n) / (lambda + mu * (1.0 - b)))
                .collect(),
        })
    }

    pub fn n(&self) -> usize {
        self.rates.len()
    }

    pub fn total_mass(&self) -> f64 {
        self.mass.iter().sum()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PhiTrajectory {
    pub times: Vec<f64>,
    pub total_mass: Vec<f64>,
    /// Full measures at the recorded times, when requested.
    pub snapshots: Vec<AtomMeasure>,
    pub last: AtomMeasure,
    pub clamps: u64,
}

/// Lower and upper envelopes of the total mass started from `m0`.
pub fn phi_envelope(rates: &[f64], lambda: f64, m0: f64, t: f64) -> (f64, f64) {
    let (lo, hi) = min_max(rates);
    let lower = lambda / hi - (m0 - lambda / hi).abs() * (-hi * t).exp();
    let upper = lambda / lo + (m0 - lambda / lo).abs() * (-lo * t).exp();
    (lower, upper)
}

/// Integrates `d phi_v / dt = lambda (1/n - phi_v) / (1 - sum phi) - mu_v phi_v`
/// with classical RK4 over `[0, horizon]`, recording every `record_every` steps.
pub fn integrate_phi(
    lambda: f64,
    phi0: &AtomMeasure,
    horizon: f64,
    step: f64,
    record_every: usize,
    keep_snapshots: bool,
) -> Result<PhiTrajectory, MeanFieldError> {
    check_rates(&phi0.rates)?;
    check_lambda(lambda)?;
    if !(step > 0.0 && horizon >= 0.0) {
        return Err(MeanFieldError::Domain(format!(
            "step {step} and horizon {horizon} must be positive"
        )));
    }
    let n = phi0.n();
    let cap = 1.0 / n as f64;
    let rates = &phi0.rates;
    let mut phi = phi0.mass.clone();
    let mut stage = vec![0.0; n];
    let mut acc = vec![0.0; n];
    let mut k = vec![0.0; n];

    let rhs = |phi: &[f64], out: &mut [f64], time: f64| -> Result<(), MeanFieldError> {
        let total: f64 = phi.iter().sum();
        let free = 1.0 - total;
        if free <= 1e-12 {
            return Err(MeanFieldError::Singular { time, mass: total });
        }
        let inflow = lambda / free;
        for v in 0..phi.len() {
            out[v] = inflow * (cap - phi[v]) - rates[v] * phi[v];
        }
        Ok(())
    };

    let steps = (horizon / step).ceil().max(1.0) as usize;
    let h = horizon / steps as f64;
    let record_every = record_every.max(1);
    let mut times = vec![0.0];
    let mut totals = vec![phi.iter().sum::<f64>()];
    let mut snapshots = Vec::new();
    if keep_snapshots {
        snapshots.push(phi0.clone());
    }
    let mut clamps = 0;
    for s in 0..steps {
        let t = s as f64 * h;
        rhs(&phi, &mut k, t)?;
        for v in 0..n {
            acc[v] = k[v];
            stage[v] = phi[v] + 0.5 * h * k[v];
        }
        rhs(&stage, &mut k, t + 0.5 * h)?;
        for v in 0..n {
            acc[v] += 2.0 * k[v];
            stage[v] = phi[v] + 0.5 * h * k[v];
        }
        rhs(&stage, &mut k, t + 0.5 * h)?;
        for v in 0..n {
            acc[v] += 2.0 * k[v];
            stage[v] = phi[v] + h * k[v];
        }
        rhs(&stage, &mut k, t + h)?;
        for v in 0..n {
            let raw = phi[v] + h / 6.0 * (acc[v] + k[v]);
            let clamped = raw.clamp(0.0, cap);
            if clamped != raw {
                clamps += 1;
            }
            phi[v] = clamped;
        }
        if (s + 1) % record_every == 0 || s + 1 == steps {
            times.push((s + 1) as f64 * h);
            totals.push(phi.iter().sum());
            if keep_snapshots {
                snapshots.push(AtomMeasure {
                    rates: rates.clone(),
                    mass: phi.clone(),
                });
            }
        }
    }
    Ok(PhiTrajectory {
        times,
        total_mass: totals,
        snapshots,
        last: AtomMeasure {
            rates: rates.clone(),
            mass: phi,
        },
        clamps,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanFieldParams {
    pub lambda: f64,
    /// `mean(rates) - lambda`.
    pub delta: f64,
    pub epsilon: f64,
    pub alpha: f64,
}

/// `2 (mu_minus + 6 lambda mu_plus / (epsilon mu_minus) + mu_plus)`.
pub fn alpha(lambda: f64, epsilon: f64, mu_minus: f64, mu_plus: f64) -> f64 {
    2.0 * (mu_minus + 6.0 * lambda * mu_plus / (epsilon * mu_minus) + mu_plus)
}

/// `min(0.1, 0.9 delta / mu_minus)`.
pub fn default_epsilon(delta: f64, mu_minus: f64) -> f64 {
    (0.9 * delta / mu_minus).min(0.1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PhiHorizonC {
    pub c: f64,
    /// `None` when the mean rate does not exceed `lambda`.
    pub params: Option<MeanFieldParams>,
    pub horizon: f64,
}

/// Total busy mass at `t = log(n) / alpha`, started from the zero measure.
///
/// `mu_minus` and `mu_plus` in `alpha` are the extreme rates of the vector;
/// `epsilon` defaults to [`default_epsilon`].
pub fn compute_c_paper(
    rates: &[f64],
    lambda: f64,
    epsilon: Option<f64>,
) -> Result<PhiHorizonC, MeanFieldError> {
    check_rates(rates)?;
    check_lambda(lambda)?;
    let delta = mean(rates) - lambda;
    if delta <= 0.0 {
        return Ok(PhiHorizonC {
            c: 1.0,
            params: None,
            horizon: 0.0,
        });
    }
    let (lo, hi) = min_max(rates);
    let eps = epsilon.unwrap_or_else(|| default_epsilon(delta, lo));
    if !(eps > 0.0 && eps < delta / lo) {
        return Err(MeanFieldError::Domain(format!(
            "epsilon {eps} outside (0, {})",
            delta / lo
        )));
    }
    let a = alpha(lambda, eps, lo, hi);
    let horizon = (rates.len() as f64).ln() / a;
    let c = if horizon > 0.0 {
        let step = (horizon / 200.0).min(0.01);
        integrate_phi(lambda, &AtomMeasure::zero(rates), horizon, step, usize::MAX, false)?
            .last
            .total_mass()
    } else {
        0.0
    };
    Ok(PhiHorizonC {
        c,
        params: Some(MeanFieldParams {
            lambda,
            delta,
            epsilon: eps,
            alpha: a,
        }),
        horizon,
    })
}

/// Source of the stationary idle time in the limit ODE.
#[derive(Debug, Clone, PartialEq)]
pub enum IdleBackend {
    /// `(1 - c) / lambda` with `c` from [`busy_fraction_fixed_point`].
    FixedPoint,
    /// `(1 - c) / lambda` with `c` from [`compute_c_paper`].
    PhiHorizon { epsilon: Option<f64> },
    /// Per-server idle means from a rate-frozen engine run, re-estimated
    /// once per step.
    MonteCarlo {
        horizon: f64,
        seed: u64,
        burn_in_fraction: f64,
        batches: usize,
    },
}

impl IdleBackend {
    pub fn tag(&self) -> &'static str {
        match self {
            IdleBackend::FixedPoint => "fixed_point",
            IdleBackend::PhiHorizon { .. } => "phi_horizon",
            IdleBackend::MonteCarlo { .. } => "monte_carlo",
        }
    }

    fn idle_means(
        &self,
        model: &CostModel,
        lambda: f64,
        rates: &[f64],
        step_index: usize,
    ) -> Result<Vec<f64>, MeanFieldError> {
        let fail = |message: String| MeanFieldError::Backend {
            backend: self.tag(),
            message,
        };
        let common = |c: f64| vec![(1.0 - c) / lambda; rates.len()];
        match self {
            IdleBackend::FixedPoint => busy_fraction_fixed_point(rates, lambda)
                .map(common)
                .map_err(|e| fail(e.to_string())),
            IdleBackend::PhiHorizon { epsilon } => compute_c_paper(rates, lambda, *epsilon)
                .map(|p| common(p.c))
                .map_err(|e| fail(e.to_string())),
            IdleBackend::MonteCarlo {
                horizon,
                seed,
                burn_in_fraction,
                batches,
            } => {
                let mut cfg = SimConfig::frozen(rates.to_vec(), lambda, *horizon);
                cfg.buffer = BufferMode::Unit;
                cfg.seed = seed.wrapping_add(step_index as u64);
                let mut acc = SteadyStateAccumulator::new(model, *burn_in_fraction, *batches)
                    .map_err(|e: StatsError| fail(e.to_string()))?
                    .without_percentiles();
                run_with_observer(&cfg, model, &mut acc)
                    .map_err(|e: EngineError| fail(e.to_string()))?;
                let est = acc.finish().map_err(|e| fail(e.to_string()))?;
                Ok(est.servers.iter().map(|s| s.mean_idle.mean).collect())
            }
        }
    }
}

/// Time-indexed rate vectors.
#[derive(Debug, Clone, Serialize)]
pub struct RateTrajectory {
    pub times: Vec<f64>,
    pub rates: Vec<Vec<f64>>,
    /// Busy fraction used by the backend at each recorded time.
    pub busy_fraction: Vec<f64>,
    pub clamps: u64,
}

impl RateTrajectory {
    pub fn last(&self) -> &[f64] {
        self.rates.last().expect("trajectory is never empty")
    }

    pub fn spread(&self, k: usize) -> f64 {
        let (lo, hi) = min_max(&self.rates[k]);
        hi - lo
    }
}

/// Integrates `d mu_v / dt = -g'(mu_v) - h'(mu_v) (I_v + 1/mu_v)` with RK4,
/// `I_v` supplied by `backend`, keeping rates in `[mu_minus, mu_plus]`.
pub fn integrate_limit_ode(
    model: &CostModel,
    lambda: f64,
    mu0: &[f64],
    horizon: f64,
    step: f64,
    backend: &IdleBackend,
) -> Result<RateTrajectory, MeanFieldError> {
    check_rates(mu0)?;
    check_lambda(lambda)?;
    if !(step > 0.0 && horizon >= 0.0) {
        return Err(MeanFieldError::Domain(format!(
            "step {step} and horizon {horizon} must be positive"
        )));
    }
    let (lo, hi) = (model.mu_minus, model.mu_plus);
    if let Some(r) = mu0.iter().find(|&&r| r < lo || r > hi) {
        return Err(MeanFieldError::Domain(format!(
            "initial rate {r} outside [{lo}, {hi}]"
        )));
    }
    let n = mu0.len();
    let field = |mu: &[f64], idle: &[f64], out: &mut [f64]| {
        for v in 0..n {
            let x = mu[v];
            out[v] = -model.g1(x) - model.h1(x) * idle[v] - model.h1_over_x(x);
        }
    };
    let frozen_within_step = matches!(backend, IdleBackend::MonteCarlo { .. });
    let busy_of = |idle: &[f64]| 1.0 - lambda * mean(idle);

    let steps = (horizon / step).ceil().max(1.0) as usize;
    let h = horizon / steps as f64;
    let mut mu = mu0.to_vec();
    let mut idle = backend.idle_means(model, lambda, &mu, 0)?;
    let mut out = RateTrajectory {
        times: vec![0.0],
        rates: vec![mu.clone()],
        busy_fraction: vec![busy_of(&idle)],
        clamps: 0,
    };
    let mut k = vec![0.0; n];
    let mut acc = vec![0.0; n];
    let mut stage = vec![0.0; n];
    for s in 0..steps {
        if s > 0 {
            idle = backend.idle_means(model, lambda, &mu, s)?;
        }
        field(&mu, &idle, &mut k);
        for v in 0..n {
            acc[v] = k[v];
            stage[v] = (mu[v] + 0.5 * h * k[v]).clamp(lo, hi);
        }
        let stage_idle = |stage: &[f64]| -> Result<Vec<f64>, MeanFieldError> {
            if frozen_within_step {
                Ok(idle.clone())
            } else {
                backend.idle_means(model, lambda, stage, s)
            }
        };
        let i2 = stage_idle(&stage)?;
        field(&stage, &i2, &mut k);
        for v in 0..n {
            acc[v] += 2.0 * k[v];
            stage[v] = (mu[v] + 0.5 * h * k[v]).clamp(lo, hi);
        }
        let i3 = stage_idle(&stage)?;
        field(&stage, &i3, &mut k);
        for v in 0..n {
            acc[v] += 2.0 * k[v];
            stage[v] = (mu[v] + h * k[v]).clamp(lo, hi);
        }
        let i4 = stage_idle(&stage)?;
        field(&stage, &i4, &mut k);
        for v in 0..n {
            let raw = mu[v] + h / 6.0 * (acc[v] + k[v]);
            if !raw.is_finite() {
                return Err(MeanFieldError::NonFinite { time: (s + 1) as f64 * h });
            }
            let clamped = raw.clamp(lo, hi);
            if clamped != raw {
                out.clamps += 1;
            }
            mu[v] = clamped;
        }
        out.times.push((s + 1) as f64 * h);
        out.rates.push(mu.clone());
        out.busy_fraction.push(busy_of(&idle));
    }
    Ok(out)
}

/// Stationary law of a birth-death chain with ratio `rho` on `{lo..hi}`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BirthDeathLaw {
    pub lo: usize,
    pub probs: Vec<f64>,
    /// `rho == 1`: the law is uniform.
    pub degenerate: bool,
}

impl BirthDeathLaw {
    pub fn prob(&self, i: usize) -> f64 {
        i.checked_sub(self.lo)
            .and_then(|k| self.probs.get(k))
            .copied()
            .unwrap_or(0.0)
    }
}

/// `P(i)` proportional to `rho^i` on `{lo..hi}`, normalized relative to the
/// largest term so that long supports do not overflow.
pub fn birth_death_stationary(rho: f64, lo: usize, hi: usize) -> Result<BirthDeathLaw, MeanFieldError> {
    if !(rho > 0.0 && rho.is_finite()) || lo > hi {
        return Err(MeanFieldError::Domain(format!(
            "need rho > 0 and lo <= hi, got rho = {rho}, support {lo}..={hi}"
        )));
    }
    let len = hi - lo + 1;
    if rho == 1.0 {
        return Ok(BirthDeathLaw {
            lo,
            probs: vec![1.0 / len as f64; len],
            degenerate: true,
        });
    }
    let ln = rho.ln();
    let peak = if rho > 1.0 { (len - 1) as f64 } else { 0.0 };
    let w: Vec<f64> = (0..len).map(|k| ((k as f64 - peak) * ln).exp()).collect();
    let z: f64 = w.iter().sum();
    Ok(BirthDeathLaw {
        lo,
        probs: w.into_iter().map(|x| x / z).collect(),
        degenerate: false,
    })
}

/// Closed form `rho^i (rho - 1) / (rho^(k+1) - 1)` on `{0..k}`.
pub fn supercritical_prob(rho: f64, k: usize, i: usize) -> f64 {
    // divided through by rho^(k+1)
    let top = (rho - 1.0) * rho.powf(i as f64 - (k + 1) as f64);
    top / (1.0 - rho.powf(-((k + 1) as f64)))
}

/// `P(Y <= l)` in closed form: `(rho^(l+1) - 1) / (rho^(k+1) - 1)`.
pub fn supercritical_tail(rho: f64, k: usize, l: usize) -> f64 {
    (rho.powf((l + 1) as f64) - 1.0) / (rho.powf((k + 1) as f64) - 1.0)
}

/// Closed form `rho^i (1 - rho) / (rho^k - rho^(n+1))` on `{k..n}`.
pub fn subcritical_prob(rho: f64, k: usize, n: usize, i: usize) -> f64 {
    // divided through by rho^k
    let top = (1.0 - rho) * rho.powf(i as f64 - k as f64);
    top / (1.0 - rho.powf((n + 1 - k) as f64))
}
