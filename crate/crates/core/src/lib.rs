//! Decentralized service-rate scaling under join-idle-queue dispatch.
//!
//! Every server tunes its own service rate from the idle times it observes,
//! trading a power cost `h(mu)` against a delay cost `g`. The crate provides
//! the cost model and its homogeneous optimum ([`cost`]), the local update
//! rule ([`controller`]), a discrete-event simulator ([`engine`]), mean-field
//! counterparts ([`meanfield`]), steady-state estimation and identity checks
//! ([`stats`]) and a monotone coupling of two fixed-rate systems
//! ([`coupling`]).

pub mod controller;
pub mod cost;
pub mod coupling;
pub mod engine;
pub mod meanfield;
pub mod stats;

pub use controller::{drift, integrate_rate, DriftInput, IdlePath};
pub use cost::{CostCurve, CostError, CostModel, OptimizationResult, ValidationReport};
pub use coupling::{run_coupled, CoupledTrace};
pub use engine::{run_simulation, run_with_observer, BufferMode, EngineError, SimConfig, SimTrace};
pub use meanfield::{busy_fraction_fixed_point, compute_c_paper, integrate_limit_ode, IdleBackend};
pub use stats::{estimate_steady_state, SteadyStateAccumulator, SteadyStateEstimate};
