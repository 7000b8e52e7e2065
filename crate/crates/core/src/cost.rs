//! Cost structure of the rate-scaling problem.
//!
//! A [`CostModel`] pairs a sojourn-cost curve `g` (decreasing in the service
//! rate) with a power-cost curve `h` (increasing), together with the rate box
//! `[mu_minus, mu_plus]` in which the adaptive rates live. The global cost of
//! a rate vector is `lambda * g(1 / E[S]) + mean_v h(mu_v)`; restricted to
//! homogeneous vectors it becomes the convex scalar function
//! `lambda * g(mu) + h(mu)`, minimized at `mu_star`.

use std::fmt;
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

/// Default number of grid points used by [`CostModel::validate`].
pub const DEFAULT_GRID_POINTS: usize = 10_000;

/// Bisection stops once the bracket is narrower than this.
const BRACKET_WIDTH: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostError {
    #[error("non-finite value of {function} at x = {x}")]
    NonFinite { function: &'static str, x: f64 },
    #[error("lambda*g'(mu) + h'(mu) has no sign change on (0, {mu_plus}]: value {at_zero} near 0, {at_top} at mu_plus")]
    NoBracket {
        mu_plus: f64,
        at_zero: f64,
        at_top: f64,
    },
    #[error("invalid domain: {0}")]
    Domain(String),
    #[error("custom power curve requires an explicit limit of h'(x)/x at 0")]
    MissingSlopeLimit,
}

/// User-supplied curve: value, first and second derivative.
#[derive(Clone)]
pub struct CustomCurve {
    pub name: String,
    pub value: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    pub d1: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    pub d2: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
}

impl CustomCurve {
    pub fn new<F, D1, D2>(name: impl Into<String>, value: F, d1: D1, d2: D2) -> Self
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
        D1: Fn(f64) -> f64 + Send + Sync + 'static,
        D2: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        Self {
            name: name.into(),
            value: Arc::new(value),
            d1: Arc::new(d1),
            d2: Arc::new(d2),
        }
    }
}

/// A scalar cost curve of the service rate.
#[derive(Clone)]
pub enum CostCurve {
    /// `1 / x`
    Inverse,
    /// `1 / (1 + x)`
    InverseShifted,
    /// `beta * x^exponent`
    Power { beta: f64, exponent: f64 },
    Custom(CustomCurve),
}

impl fmt::Debug for CostCurve {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CostCurve::Inverse => write!(f, "Inverse"),
            CostCurve::InverseShifted => write!(f, "InverseShifted"),
            CostCurve::Power { beta, exponent } => {
                write!(f, "Power {{ beta: {beta}, exponent: {exponent} }}")
            }
            CostCurve::Custom(c) => write!(f, "Custom({})", c.name),
        }
    }
}

#[inline]
fn pow(x: f64, e: f64) -> f64 {
    if e.fract() == 0.0 && e.abs() < 64.0 {
        x.powi(e as i32)
    } else {
        x.powf(e)
    }
}

impl CostCurve {
    pub fn name(&self) -> String {
        match self {
            CostCurve::Inverse => "inverse".into(),
            CostCurve::InverseShifted => "inverse-shifted".into(),
            CostCurve::Power { beta, exponent } => format!("power(beta={beta},p={exponent})"),
            CostCurve::Custom(c) => c.name.clone(),
        }
    }

    #[inline]
    pub fn value(&self, x: f64) -> f64 {
        match self {
            CostCurve::Inverse => 1.0 / x,
            CostCurve::InverseShifted => 1.0 / (1.0 + x),
            CostCurve::Power { beta, exponent } => beta * pow(x, *exponent),
            CostCurve::Custom(c) => (c.value)(x),
        }
    }

    #[inline]
    pub fn d1(&self, x: f64) -> f64 {
        match self {
            CostCurve::Inverse => -1.0 / (x * x),
            CostCurve::InverseShifted => {
                let s = 1.0 + x;
                -1.0 / (s * s)
            }
            CostCurve::Power { beta, exponent } => {
                if *exponent == 1.0 {
                    *beta
                } else {
                    beta * exponent * pow(x, exponent - 1.0)
                }
            }
            CostCurve::Custom(c) => (c.d1)(x),
        }
    }

    #[inline]
    pub fn d2(&self, x: f64) -> f64 {
        match self {
            CostCurve::Inverse => 2.0 / (x * x * x),
            CostCurve::InverseShifted => {
                let s = 1.0 + x;
                2.0 / (s * s * s)
            }
            CostCurve::Power { beta, exponent } => {
                let e = *exponent;
                if e == 1.0 {
                    0.0
                } else if e == 2.0 {
                    2.0 * beta
                } else {
                    beta * e * (e - 1.0) * pow(x, e - 2.0)
                }
            }
            CostCurve::Custom(c) => (c.d2)(x),
        }
    }

    /// `lim_{x -> 0} d1(x) / x` for the built-in curves.
    fn slope_limit_at_zero(&self) -> Option<f64> {
        match self {
            CostCurve::Power { beta, exponent } => {
                let e = *exponent;
                Some(if e == 2.0 {
                    2.0 * beta
                } else if e > 2.0 {
                    0.0
                } else {
                    f64::INFINITY
                })
            }
            CostCurve::Inverse | CostCurve::InverseShifted => None,
            CostCurve::Custom(_) => None,
        }
    }
}

/// Sojourn cost `g`, power cost `h`, and the rate box.
#[derive(Clone, Debug)]
pub struct CostModel {
    g: CostCurve,
    h: CostCurve,
    pub sigma_g: f64,
    pub sigma_h: f64,
    pub mu_minus: f64,
    pub mu_plus: f64,
    pub hprime_over_x_at_zero: f64,
}

impl CostModel {
    /// Builds a model; `sigma_g` and `sigma_h` default to the minimum of
    /// `g''` and `h''` over the validation grid.
    ///
    /// `hprime_over_x_at_zero` may be omitted for the built-in power curve.
    pub fn new(
        g: CostCurve,
        h: CostCurve,
        mu_minus: f64,
        mu_plus: f64,
        hprime_over_x_at_zero: Option<f64>,
    ) -> Result<Self, CostError> {
        if !(mu_minus.is_finite() && mu_plus.is_finite() && mu_plus > 0.0) {
            return Err(CostError::Domain(format!(
                "rate box [{mu_minus}, {mu_plus}] is not a finite positive interval"
            )));
        }
        let slope0 = match hprime_over_x_at_zero {
            Some(v) => v,
            None => h.slope_limit_at_zero().ok_or(CostError::MissingSlopeLimit)?,
        };
        let mut model = Self {
            g,
            h,
            sigma_g: 0.0,
            sigma_h: 0.0,
            mu_minus,
            mu_plus,
            hprime_over_x_at_zero: slope0,
        };
        let (sg, sh) = model.grid(DEFAULT_GRID_POINTS).fold(
            (f64::INFINITY, f64::INFINITY),
            |(sg, sh), x| (sg.min(model.g.d2(x)), sh.min(model.h.d2(x))),
        );
        model.sigma_g = sg;
        model.sigma_h = sh;
        Ok(model)
    }

    /// `g = 1/mu`, `h = beta * mu^2`: the quadratic-power example whose
    /// homogeneous optimum is `cbrt(lambda / beta / 2)`.
    pub fn inverse_quadratic(beta: f64, mu_minus: f64, mu_plus: f64) -> Self {
        Self::new(
            CostCurve::Inverse,
            CostCurve::Power {
                beta,
                exponent: 2.0,
            },
            mu_minus,
            mu_plus,
            None,
        )
        .expect("built-in curves")
    }

    pub fn with_sigmas(mut self, sigma_g: f64, sigma_h: f64) -> Self {
        self.sigma_g = sigma_g;
        self.sigma_h = sigma_h;
        self
    }

    pub fn sojourn_curve(&self) -> &CostCurve {
        &self.g
    }

    pub fn power_curve(&self) -> &CostCurve {
        &self.h
    }

    #[inline]
    pub fn g(&self, x: f64) -> f64 {
        self.g.value(x)
    }
    #[inline]
    pub fn g1(&self, x: f64) -> f64 {
        self.g.d1(x)
    }
    #[inline]
    pub fn g2(&self, x: f64) -> f64 {
        self.g.d2(x)
    }
    #[inline]
    pub fn h(&self, x: f64) -> f64 {
        self.h.value(x)
    }
    #[inline]
    pub fn h1(&self, x: f64) -> f64 {
        self.h.d1(x)
    }
    #[inline]
    pub fn h2(&self, x: f64) -> f64 {
        self.h.d2(x)
    }

    /// `h'(x) / x`, with the supplied limit at `x = 0`.
    #[inline]
    pub fn h1_over_x(&self, x: f64) -> f64 {
        if x == 0.0 {
            self.hprime_over_x_at_zero
        } else {
            self.h.d1(x) / x
        }
    }

    /// Open-at-zero grid `2 mu_plus * i / points`, `i = 1..=points`.
    fn grid(&self, points: usize) -> impl Iterator<Item = f64> + '_ {
        let top = 2.0 * self.mu_plus;
        let points = points.max(2);
        (1..=points).map(move |i| top * i as f64 / points as f64)
    }

    /// Grid check of the standing assumptions at arrival rate `lambda`.
    pub fn validate(&self, lambda: f64) -> Result<ValidationReport, CostError> {
        self.validate_with_grid(lambda, DEFAULT_GRID_POINTS)
    }

    pub fn validate_with_grid(
        &self,
        lambda: f64,
        points: usize,
    ) -> Result<ValidationReport, CostError> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(CostError::Domain(format!("lambda must be positive, got {lambda}")));
        }
        let xs: Vec<f64> = self.grid(points).collect();
        let eval = |name: &'static str, f: &dyn Fn(f64) -> f64, x: f64| {
            let v = f(x);
            if v.is_finite() {
                Ok(v)
            } else {
                Err(CostError::NonFinite { function: name, x })
            }
        };
        let mut g = Vec::with_capacity(xs.len());
        let mut g1 = Vec::with_capacity(xs.len());
        let mut g2 = Vec::with_capacity(xs.len());
        let mut h = Vec::with_capacity(xs.len());
        let mut h1 = Vec::with_capacity(xs.len());
        let mut h2 = Vec::with_capacity(xs.len());
        for &x in &xs {
            g.push(eval("g", &|x| self.g(x), x)?);
            g1.push(eval("g'", &|x| self.g1(x), x)?);
            g2.push(eval("g''", &|x| self.g2(x), x)?);
            h.push(eval("h", &|x| self.h(x), x)?);
            h1.push(eval("h'", &|x| self.h1(x), x)?);
            h2.push(eval("h''", &|x| self.h2(x), x)?);
        }
        let h1_zero = eval("h'", &|x| self.h1(x), 0.0)?;

        let mut checks = Vec::with_capacity(6);

        // (i): derivatives consistent with central differences of the values.
        let smooth_witness = (0..xs.len()).step_by(7).find(|&i| {
            let x = xs[i];
            let dx = 1e-5 * x;
            let central = |f: &dyn Fn(f64) -> f64| (f(x + dx) - f(x - dx)) / (2.0 * dx);
            let off = |fd: f64, exact: f64| {
                !fd.is_finite() || (fd - exact).abs() > 1e-4 * (1e-6 + exact.abs().max(fd.abs()))
            };
            off(central(&|y| self.g(y)), g1[i])
                || off(central(&|y| self.h(y)), h1[i])
                || off(central(&|y| self.g1(y)), g2[i])
                || off(central(&|y| self.h1(y)), h2[i])
        });
        checks.push(AssumptionCheck::new(
            Assumption::Smoothness,
            smooth_witness.map(|i| xs[i]),
            "derivatives agree with central differences",
        ));

        // (ii)
        let convex_witness = if self.sigma_g > 0.0 && self.sigma_h > 0.0 {
            (0..xs.len()).find(|&i| g2[i] < self.sigma_g || h2[i] < self.sigma_h)
        } else {
            Some(0)
        };
        checks.push(AssumptionCheck::new(
            Assumption::StrongConvexity,
            convex_witness.map(|i| xs[i]),
            &format!(
                "g'' >= {} and h'' >= {} with both bounds positive",
                self.sigma_g, self.sigma_h
            ),
        ));

        // (iii)
        let mono_witness = (1..xs.len()).find(|&i| {
            let r_prev = h1[i - 1] / xs[i - 1];
            let r = h1[i] / xs[i];
            g[i] >= g[i - 1] || h[i] <= h[i - 1] || r < r_prev - 1e-12 * r_prev.abs()
        });
        checks.push(AssumptionCheck::new(
            Assumption::Monotonicity,
            mono_witness.map(|i| xs[i]),
            "g decreasing, h increasing, h'(x)/x non-decreasing",
        ));

        // (iv)
        checks.push(AssumptionCheck::new(
            Assumption::FlatPowerAtZero,
            (h1_zero.abs() > 1e-12).then_some(0.0),
            &format!("h'(0) = {h1_zero}"),
        ));

        // (v)
        let at_lambda = lambda * self.g1(lambda) + self.h1(lambda);
        checks.push(AssumptionCheck::new(
            Assumption::Stability,
            (!(at_lambda < 0.0)).then_some(lambda),
            &format!("lambda g'(lambda) + h'(lambda) = {at_lambda}"),
        ));

        // (vi)
        let (lo, hi) = (self.mu_minus, self.mu_plus);
        let top = self.g1(hi) + self.h1_over_x(hi);
        let bottom = self.g1(lo) + self.h1(lo) * (lambda + 1.0 / lo);
        let box_witness = if !(hi > lo && lo > 0.0) {
            Some(lo)
        } else if !(top >= 0.0) {
            Some(hi)
        } else if !(bottom <= 0.0) {
            Some(lo)
        } else {
            None
        };
        checks.push(AssumptionCheck::new(
            Assumption::RateBox,
            box_witness,
            &format!("upper condition {top} >= 0, lower condition {bottom} <= 0"),
        ));

        Ok(ValidationReport { lambda, checks })
    }

    /// Homogeneous optimum: the root of `lambda g'(mu) + h'(mu)` in `(0, mu_plus]`.
    pub fn solve_mu_star(&self, lambda: f64) -> Result<OptimizationResult, CostError> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(CostError::Domain(format!("lambda must be positive, got {lambda}")));
        }
        let foc = |mu: f64| lambda * self.g1(mu) + self.h1(mu);
        let mut lo = 0.0;
        let mut hi = self.mu_plus;
        let f_lo = foc(lo);
        let f_hi = foc(hi);
        if f_lo.is_nan() || f_hi.is_nan() || !(f_lo < 0.0 && f_hi > 0.0) {
            if f_hi == 0.0 {
                return Ok(self.optimum(lambda, hi));
            }
            return Err(CostError::NoBracket {
                mu_plus: hi,
                at_zero: f_lo,
                at_top: f_hi,
            });
        }
        while hi - lo > BRACKET_WIDTH {
            let mid = 0.5 * (lo + hi);
            let f = foc(mid);
            if f.is_nan() {
                return Err(CostError::NonFinite { function: "lambda g' + h'", x: mid });
            }
            if f < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let mid = 0.5 * (lo + hi);
        let slope = lambda * self.g2(mid) + self.h2(mid);
        let polished = mid - foc(mid) / slope;
        let mu = if polished.is_finite()
            && (polished - mid).abs() <= BRACKET_WIDTH
            && foc(polished).abs() <= foc(mid).abs()
        {
            polished
        } else {
            mid
        };
        Ok(self.optimum(lambda, mu))
    }

    fn optimum(&self, lambda: f64, mu: f64) -> OptimizationResult {
        OptimizationResult {
            mu_star: mu,
            objective_value: lambda * self.g(mu) + self.h(mu),
            first_order_residual: (lambda * self.g1(mu) + self.h1(mu)).abs(),
        }
    }

    /// `lambda * g(1 / mean_sojourn) + mean_v h(rate_v)`.
    pub fn evaluate_cost(
        &self,
        lambda: f64,
        mean_sojourn: f64,
        rates: &[f64],
    ) -> Result<f64, CostError> {
        if !(mean_sojourn > 0.0) {
            return Err(CostError::Domain(format!(
                "mean sojourn must be positive, got {mean_sojourn}"
            )));
        }
        if rates.is_empty() {
            return Err(CostError::Domain("empty rate vector".into()));
        }
        if let Some(bad) = rates.iter().find(|r| !(**r >= 0.0)) {
            return Err(CostError::Domain(format!("negative or NaN rate {bad}")));
        }
        let power = rates.iter().map(|&r| self.h(r)).sum::<f64>() / rates.len() as f64;
        Ok(lambda * self.g(1.0 / mean_sojourn) + power)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Assumption {
    /// (i) twice continuously differentiable
    Smoothness,
    /// (ii) second derivatives bounded below by positive constants
    StrongConvexity,
    /// (iii) g decreasing, h increasing, h'(x)/x non-decreasing
    Monotonicity,
    /// (iv) h'(0) = 0
    FlatPowerAtZero,
    /// (v) lambda g'(lambda) + h'(lambda) < 0
    Stability,
    /// (vi) sign conditions at mu_plus and mu_minus
    RateBox,
}

impl Assumption {
    pub fn roman(self) -> &'static str {
        match self {
            Assumption::Smoothness => "i",
            Assumption::StrongConvexity => "ii",
            Assumption::Monotonicity => "iii",
            Assumption::FlatPowerAtZero => "iv",
            Assumption::Stability => "v",
            Assumption::RateBox => "vi",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AssumptionCheck {
    pub assumption: Assumption,
    pub passed: bool,
    /// Grid point at which the check failed.
    pub witness: Option<f64>,
    pub detail: String,
}

impl AssumptionCheck {
    fn new(assumption: Assumption, witness: Option<f64>, detail: &str) -> Self {
        Self {
            assumption,
            passed: witness.is_none(),
            witness,
            detail: detail.to_string(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub lambda: f64,
    pub checks: Vec<AssumptionCheck>,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, which: Assumption) -> &AssumptionCheck {
        self.checks
            .iter()
            .find(|c| c.assumption == which)
            .expect("every assumption is checked")
    }

    pub fn failures(&self) -> impl Iterator<Item = &AssumptionCheck> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OptimizationResult {
    pub mu_star: f64,
    pub objective_value: f64,
    pub first_order_residual: f64,
}
