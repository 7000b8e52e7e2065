//! Experiment configuration.
//!
//! A config file is TOML with three optional tables:
//!
//! ```toml
//! [experiment]
//! recipe = "fig_servers"      # optional; its settings are applied first
//! sweep = "n"                 # n | m | lambda | none
//! values = [2, 10, 25, 100]
//! replications = 10
//! out = "runs/servers"
//! seed = 1
//! burn_in = 0.2               # fraction of the horizon discarded
//! batches = 32
//! workers = 4
//! backend = "engine"          # engine | meanfield
//! trajectory = false          # record rate/queue trajectories
//! samples = 1000              # rate snapshots per run
//!
//! [sim]
//! n = 100
//! lambda = 0.8
//! m = 500
//! horizon = 20000             # omit for max(40 m, 2000)
//! buffer = "unit"             # unit | infinite
//! initial_backlog = 0
//! rate_frozen = false
//! substep = 0.1
//! initial_rates = { kind = "uniform", lo = 0.0, hi = 2.0 }
//!
//! [model]
//! g = "inverse"               # inverse | inverse_shifted
//! h_beta = 0.1
//! h_exponent = 2.0
//! mu_minus = 0.5
//! mu_plus = 3.0
//! ```
//!
//! Unknown keys anywhere are rejected. Settings are layered: recipe, then
//! file, then command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use ratescale::cost::{CostCurve, CostModel};
use ratescale::engine::{BufferMode, InitialRates, SimConfig};

use crate::recipes::Recipe;
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    N,
    M,
    Lambda,
    None,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::N => "n",
            SweepAxis::M => "m",
            SweepAxis::Lambda => "lambda",
            SweepAxis::None => "none",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunBackend {
    Engine,
    Meanfield,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServiceCurve {
    Inverse,
    InverseShifted,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelSpec {
    pub g: ServiceCurve,
    pub h_beta: f64,
    pub h_exponent: f64,
    pub mu_minus: f64,
    pub mu_plus: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            g: ServiceCurve::Inverse,
            h_beta: 0.1,
            h_exponent: 2.0,
            mu_minus: 0.5,
            mu_plus: 3.0,
        }
    }
}

impl ModelSpec {
    pub fn build(&self) -> Result<CostModel, CliError> {
        let g = match self.g {
            ServiceCurve::Inverse => CostCurve::Inverse,
            ServiceCurve::InverseShifted => CostCurve::InverseShifted,
        };
        let h = CostCurve::Power {
            beta: self.h_beta,
            exponent: self.h_exponent,
        };
        Ok(CostModel::new(g, h, self.mu_minus, self.mu_plus, None)?)
    }
}

/// Fully resolved experiment.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentSpec {
    pub base: SimConfig,
    /// `None` picks `max(40 m, 2000)` per run.
    pub horizon: Option<f64>,
    pub model: ModelSpec,
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub replications: usize,
    #[serde(skip)]
    pub out: PathBuf,
    pub recipe: Option<Recipe>,
    pub seed: u64,
    pub burn_in: f64,
    pub batches: usize,
    #[serde(skip)]
    pub workers: usize,
    pub backend: RunBackend,
    pub trajectory: bool,
    pub samples: usize,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            base: SimConfig::new(100, 0.8, 500.0, 0.0),
            horizon: None,
            model: ModelSpec::default(),
            axis: SweepAxis::None,
            values: Vec::new(),
            replications: 1,
            out: PathBuf::from("out"),
            recipe: None,
            seed: 0,
            burn_in: ratescale::stats::DEFAULT_BURN_IN,
            batches: ratescale::stats::DEFAULT_BATCHES,
            workers: 1,
            backend: RunBackend::Engine,
            trajectory: false,
            samples: 1000,
        }
    }
}

/// Horizon used when none is configured.
pub fn default_horizon(m: f64) -> f64 {
    (40.0 * m).max(2000.0)
}

impl ExperimentSpec {
    /// Sweep points; a single point with no axis.
    pub fn points(&self) -> Vec<f64> {
        if self.axis == SweepAxis::None {
            vec![f64::NAN]
        } else {
            self.values.clone()
        }
    }

    /// Simulation config for sweep value `value` (ignored without an axis).
    pub fn config_at(&self, value: f64) -> SimConfig {
        let mut cfg = self.base.clone();
        match self.axis {
            SweepAxis::N => cfg.n = value as usize,
            SweepAxis::M => cfg.m = value,
            SweepAxis::Lambda => cfg.lambda = value,
            SweepAxis::None => {}
        }
        if let InitialRates::Explicit { rates } = &cfg.initial_rates {
            if rates.len() != cfg.n {
                cfg.initial_rates = InitialRates::Explicit {
                    rates: (0..cfg.n).map(|v| rates[v % rates.len()]).collect(),
                };
            }
        }
        cfg.horizon = self.horizon.unwrap_or_else(|| default_horizon(cfg.m));
        if cfg.sample_interval.is_none() && self.samples > 0 {
            cfg.sample_interval = Some(cfg.horizon / self.samples as f64);
        }
        cfg
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if self.replications == 0 {
            return bad("replications must be at least 1".into());
        }
        if self.axis != SweepAxis::None {
            if self.values.is_empty() {
                return bad(format!("sweep over {} has no values", self.axis.name()));
            }
            if let Some(v) = self.values.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
                return bad(format!("sweep value {v} is not positive"));
            }
            if self.axis == SweepAxis::N {
                if let Some(v) = self.values.iter().find(|v| v.fract() != 0.0) {
                    return bad(format!("server count {v} is not an integer"));
                }
            }
        }
        if !(0.0..1.0).contains(&self.burn_in) {
            return bad(format!("burn_in {} outside [0, 1)", self.burn_in));
        }
        if self.batches < 2 {
            return bad(format!("need at least 2 batches, got {}", self.batches));
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        if let Some(h) = self.horizon {
            if !(h.is_finite() && h > 0.0) {
                return bad(format!("horizon {h} is not positive"));
            }
        }
        self.model.build()?;
        for value in self.points() {
            self.config_at(value).validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default)]
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub sim: SimSection,
    #[serde(default)]
    pub model: ModelSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub recipe: Option<String>,
    pub sweep: Option<SweepAxis>,
    pub values: Option<Vec<f64>>,
    pub replications: Option<usize>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub burn_in: Option<f64>,
    pub batches: Option<usize>,
    pub workers: Option<usize>,
    pub backend: Option<RunBackend>,
    pub trajectory: Option<bool>,
    pub samples: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum InitialRatesSection {
    Constant { rate: f64 },
    Uniform { lo: f64, hi: f64 },
    Explicit { rates: Vec<f64> },
}

impl From<InitialRatesSection> for InitialRates {
    fn from(s: InitialRatesSection) -> Self {
        match s {
            InitialRatesSection::Constant { rate } => InitialRates::Constant { rate },
            InitialRatesSection::Uniform { lo, hi } => InitialRates::Uniform { lo, hi },
            InitialRatesSection::Explicit { rates } => InitialRates::Explicit { rates },
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub n: Option<usize>,
    pub lambda: Option<f64>,
    pub m: Option<f64>,
    pub horizon: Option<f64>,
    pub buffer: Option<BufferMode>,
    pub initial_rates: Option<InitialRatesSection>,
    pub initial_backlog: Option<usize>,
    pub substep: Option<f64>,
    pub rate_frozen: Option<bool>,
    pub sample_interval: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub g: Option<ServiceCurve>,
    pub h_beta: Option<f64>,
    pub h_exponent: Option<f64>,
    pub mu_minus: Option<f64>,
    pub mu_plus: Option<f64>,
}

/// Command-line overrides; `None` leaves the setting alone.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub recipe: Option<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
    pub n: Option<usize>,
    pub m: Option<f64>,
    pub lambda: Option<f64>,
    pub horizon: Option<f64>,
    pub buffer: Option<BufferMode>,
    pub replications: Option<usize>,
}

pub fn parse_config(text: &str) -> Result<ConfigFile, CliError> {
    toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
}

pub fn load_config(path: &Path) -> Result<ConfigFile, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text)
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

/// Layers recipe, file and overrides into a validated spec.
pub fn resolve(file: ConfigFile, overrides: &Overrides) -> Result<ExperimentSpec, CliError> {
    let recipe_name = overrides.recipe.clone().or(file.experiment.recipe.clone());
    let mut spec = match recipe_name {
        Some(name) => name.parse::<Recipe>()?.spec(),
        None => ExperimentSpec::default(),
    };

    let e = file.experiment;
    set(&mut spec.axis, e.sweep);
    set(&mut spec.values, e.values);
    set(&mut spec.replications, e.replications);
    set(&mut spec.out, e.out);
    set(&mut spec.seed, e.seed);
    set(&mut spec.burn_in, e.burn_in);
    set(&mut spec.batches, e.batches);
    set(&mut spec.workers, e.workers);
    set(&mut spec.backend, e.backend);
    set(&mut spec.trajectory, e.trajectory);
    set(&mut spec.samples, e.samples);

    let s = file.sim;
    set(&mut spec.base.n, s.n);
    set(&mut spec.base.lambda, s.lambda);
    set(&mut spec.base.m, s.m);
    if s.horizon.is_some() {
        spec.horizon = s.horizon;
    }
    set(&mut spec.base.buffer, s.buffer);
    set(&mut spec.base.initial_rates, s.initial_rates.map(Into::into));
    set(&mut spec.base.initial_backlog, s.initial_backlog);
    if s.substep.is_some() {
        spec.base.substep = s.substep;
    }
    set(&mut spec.base.rate_frozen, s.rate_frozen);
    if s.sample_interval.is_some() {
        spec.base.sample_interval = s.sample_interval;
    }

    let m = file.model;
    set(&mut spec.model.g, m.g);
    set(&mut spec.model.h_beta, m.h_beta);
    set(&mut spec.model.h_exponent, m.h_exponent);
    set(&mut spec.model.mu_minus, m.mu_minus);
    set(&mut spec.model.mu_plus, m.mu_plus);

    set(&mut spec.seed, overrides.seed);
    set(&mut spec.out, overrides.out.clone());
    set(&mut spec.workers, overrides.workers);
    set(&mut spec.base.n, overrides.n);
    set(&mut spec.base.m, overrides.m);
    set(&mut spec.base.lambda, overrides.lambda);
    if overrides.horizon.is_some() {
        spec.horizon = overrides.horizon;
    }
    set(&mut spec.base.buffer, overrides.buffer);
    set(&mut spec.replications, overrides.replications);

    spec.validate()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_schema_parses() {
        let text = r#"
            [experiment]
            sweep = "lambda"
            values = [0.2, 0.8]
            replications = 2
            seed = 5
            backend = "engine"
            [sim]
            n = 10
            m = 20
            buffer = "infinite"
            initial_backlog = 3
            initial_rates = { kind = "constant", rate = 1.0 }
            [model]
            g = "inverse_shifted"
            mu_minus = 0.4
        "#;
        let spec = resolve(parse_config(text).unwrap(), &Overrides::default()).unwrap();
        assert_eq!(spec.axis, SweepAxis::Lambda);
        assert_eq!(spec.base.buffer, BufferMode::Infinite);
        assert_eq!(spec.base.initial_backlog, 3);
        assert_eq!(spec.model.g, ServiceCurve::InverseShifted);
        assert_eq!(spec.config_at(0.2).lambda, 0.2);
        assert_eq!(spec.config_at(0.2).horizon, 2000.0);
    }

    #[test]
    fn unknown_keys_rejected() {
        for text in [
            "[sim]\nlamda = 0.8\n",
            "[experiment]\nreplication = 2\n",
            "[bogus]\n",
            "[sim]\ninitial_rates = { kind = \"uniform\", lo = 0.0, hi = 2.0, mid = 1.0 }\n",
        ] {
            assert!(matches!(parse_config(text), Err(CliError::Config(_))), "{text}");
        }
    }

    #[test]
    fn zero_replications_is_config_error() {
        let file = parse_config("[experiment]\nreplications = 0\n").unwrap();
        let err = resolve(file, &Overrides::default()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn overrides_win() {
        let file = parse_config("[experiment]\nrecipe = \"fig_servers\"\nseed = 3\n").unwrap();
        let o = Overrides {
            seed: Some(9),
            lambda: Some(0.5),
            ..Default::default()
        };
        let spec = resolve(file, &o).unwrap();
        assert_eq!(spec.seed, 9);
        assert_eq!(spec.base.lambda, 0.5);
        assert_eq!(spec.axis, SweepAxis::N);
    }

    #[test]
    fn bad_sweep_values() {
        for text in [
            "[experiment]\nsweep = \"n\"\nvalues = [2.5]\n",
            "[experiment]\nsweep = \"m\"\nvalues = [-1.0]\n",
            "[experiment]\nsweep = \"m\"\nvalues = []\n",
        ] {
            assert!(resolve(parse_config(text).unwrap(), &Overrides::default()).is_err());
        }
    }
}
