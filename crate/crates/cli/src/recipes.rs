//! Named experiment presets.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use ratescale::engine::{BufferMode, InitialRates};

use crate::config::{ExperimentSpec, SweepAxis};
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Recipe {
    /// Server count sweep at `lambda = 0.8`, `m = 500`.
    FigServers,
    /// Step-size sweep at `n = 100`, `lambda = 0.8`.
    FigStepSize,
    /// Arrival-rate sweep at `n = 100`, `m = 100`.
    FigLambda,
    /// Rate and queue trajectories, unit buffers, starting empty.
    FigUnitBuffer,
    /// Same with infinite buffers.
    FigInfBuffer,
    /// Infinite buffers starting from a large backlog.
    FigInfBufferBig,
}

/// Tasks per server at time zero in [`Recipe::FigInfBufferBig`].
pub const BIG_BACKLOG: usize = 1000;

impl Recipe {
    pub const ALL: [Recipe; 6] = [
        Recipe::FigServers,
        Recipe::FigStepSize,
        Recipe::FigLambda,
        Recipe::FigUnitBuffer,
        Recipe::FigInfBuffer,
        Recipe::FigInfBufferBig,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Recipe::FigServers => "fig_servers",
            Recipe::FigStepSize => "fig_step_size",
            Recipe::FigLambda => "fig_lambda",
            Recipe::FigUnitBuffer => "fig_unit_buffer",
            Recipe::FigInfBuffer => "fig_inf_buffer",
            Recipe::FigInfBufferBig => "fig_inf_buffer_big",
        }
    }

    pub fn spec(self) -> ExperimentSpec {
        let mut spec = ExperimentSpec {
            recipe: Some(self),
            out: format!("out/{}", self.name()).into(),
            ..ExperimentSpec::default()
        };
        spec.base.lambda = 0.8;
        spec.base.initial_rates = InitialRates::Uniform { lo: 0.0, hi: 2.0 };
        match self {
            Recipe::FigServers => {
                spec.base.m = 500.0;
                spec.axis = SweepAxis::N;
                spec.values = vec![2.0, 10.0, 25.0, 100.0];
                spec.replications = 10;
            }
            Recipe::FigStepSize => {
                spec.base.n = 100;
                spec.axis = SweepAxis::M;
                spec.values = vec![10.0, 50.0, 500.0];
                spec.replications = 3;
            }
            Recipe::FigLambda => {
                spec.base.n = 100;
                spec.base.m = 100.0;
                spec.axis = SweepAxis::Lambda;
                spec.values = vec![0.2, 0.8, 1.5];
                spec.replications = 3;
            }
            Recipe::FigUnitBuffer | Recipe::FigInfBuffer | Recipe::FigInfBufferBig => {
                spec.base.n = 50;
                spec.base.m = 500.0;
                spec.trajectory = true;
                spec.samples = 2000;
                if self != Recipe::FigUnitBuffer {
                    spec.base.buffer = BufferMode::Infinite;
                }
                if self == Recipe::FigInfBufferBig {
                    spec.base.initial_backlog = BIG_BACKLOG;
                    spec.horizon = Some(16_000.0);
                }
            }
        }
        spec
    }
}

impl fmt::Display for Recipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Recipe {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Recipe::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Recipe::ALL.iter().map(|r| r.name()).collect();
                CliError::Config(format!(
                    "unknown recipe '{s}'; valid names: {}",
                    names.join(", ")
                ))
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for r in Recipe::ALL {
            assert_eq!(r.name().parse::<Recipe>().unwrap(), r);
            r.spec().validate().unwrap();
        }
    }

    #[test]
    fn unknown_recipe_lists_names() {
        let err = "fig_nope".parse::<Recipe>().unwrap_err();
        let msg = err.to_string();
        assert_eq!(err.exit_code(), 2);
        for r in Recipe::ALL {
            assert!(msg.contains(r.name()), "{msg}");
        }
    }
}
