//! The local rate-update rule.
//!
//! Each server moves its rate along
//! `d mu / dt = -(1/m) [g'(mu) + h'(mu) (I + 1/mu)]`, where `I` is the idle
//! observation: the running idle clock while idle, the frozen length of the
//! last idle period while busy.

use thiserror::Error;

use crate::cost::CostModel;

/// Relative rate change allowed within one integration step.
pub const MAX_RELATIVE_CHANGE: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControllerError {
    #[error("non-finite rate {value} while integrating from mu = {mu0}")]
    NonFinite { mu0: f64, value: f64 },
    #[error("invalid step {0}")]
    Step(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriftInput {
    pub mu: f64,
    pub idle_obs: f64,
    pub m: f64,
}

/// `-(1/m) [g'(mu) + h'(mu) I + h'(mu)/mu]`.
#[inline]
pub fn drift(model: &CostModel, input: DriftInput) -> f64 {
    let DriftInput { mu, idle_obs, m } = input;
    -(model.g1(mu) + model.h1(mu) * idle_obs + model.h1_over_x(mu)) / m
}

/// Idle observation along one integration step, as a function of the
/// offset `s` from the step start.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum IdlePath {
    /// Busy: the last idle length, constant.
    Frozen(f64),
    /// Idle: the clock reads `start + s`.
    Growing { start: f64 },
}

impl IdlePath {
    #[inline]
    pub fn at(self, s: f64) -> f64 {
        match self {
            IdlePath::Frozen(v) => v,
            IdlePath::Growing { start } => start + s,
        }
    }

    /// The same path seen from an offset `s` later.
    #[inline]
    pub fn shifted(self, s: f64) -> Self {
        match self {
            IdlePath::Frozen(v) => IdlePath::Frozen(v),
            IdlePath::Growing { start } => IdlePath::Growing { start: start + s },
        }
    }
}

/// Result of one step of the joint (rate, hazard) system.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateStep {
    pub rate: f64,
    /// `integral of mu ds` over the step.
    pub hazard: f64,
    pub clamped: bool,
}

/// One classical fourth-order step of `(mu, H)` with `H' = mu`.
pub fn rk4_step(
    model: &CostModel,
    mu0: f64,
    path: IdlePath,
    m: f64,
    dt: f64,
) -> Result<RateStep, ControllerError> {
    if !(dt >= 0.0) || !dt.is_finite() {
        return Err(ControllerError::Step(dt));
    }
    let f = |mu: f64, s: f64| {
        drift(
            model,
            DriftInput {
                mu: mu.max(0.0),
                idle_obs: path.at(s),
                m,
            },
        )
    };
    let half = 0.5 * dt;
    let k1 = f(mu0, 0.0);
    let m2 = mu0 + half * k1;
    let k2 = f(m2, half);
    let m3 = mu0 + half * k2;
    let k3 = f(m3, half);
    let m4 = mu0 + dt * k3;
    let k4 = f(m4, dt);
    let raw = mu0 + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    let hazard = dt / 6.0 * (mu0 + 2.0 * m2 + 2.0 * m3 + m4);
    if !raw.is_finite() || !hazard.is_finite() {
        return Err(ControllerError::NonFinite { mu0, value: raw });
    }
    let rate = raw.clamp(0.0, model.mu_plus);
    Ok(RateStep {
        rate,
        hazard: hazard.max(0.0),
        clamped: rate != raw,
    })
}

/// One fourth-order step of the rate alone; see [`rk4_step`].
pub fn integrate_rate(
    model: &CostModel,
    mu0: f64,
    path: IdlePath,
    m: f64,
    dt: f64,
) -> Result<RateStep, ControllerError> {
    rk4_step(model, mu0, path, m, dt)
}

/// Largest step not exceeding `cap` over which the rate changes by at most
/// [`MAX_RELATIVE_CHANGE`] at first order.
#[inline]
pub fn limited_step(model: &CostModel, mu: f64, idle_obs: f64, m: f64, cap: f64) -> f64 {
    let d = drift(model, DriftInput { mu, idle_obs, m }).abs();
    let scale = mu.max(1e-9 * model.mu_plus);
    if d * cap <= MAX_RELATIVE_CHANGE * scale {
        cap
    } else {
        MAX_RELATIVE_CHANGE * scale / d
    }
}
