//! Monotone coupling of two fixed-rate unit-buffer systems.
//!
//! Both replicas see the same arrival epochs and the same potential-departure
//! epochs: every server carries a Poisson clock of rate `mu_v` that ticks
//! whether or not it is busy, and a tick empties the server in both replicas.
//! Dispatch shares one uniform `U`. With `S2` the idle set of the more loaded
//! replica and `D = S1 \ S2`, replica 1 orders its idle servers as `S2` then
//! `D` and takes slot `floor(U |S1|)`. When that slot falls in `S2` replica 2
//! takes the same server; otherwise `U` is rescaled to `[0, 1)` and replica 2
//! picks uniformly from `S2`. Each replica still dispatches uniformly over its
//! own idle set, and `X1 <= X2` is preserved at every event.

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::Serialize;
use thiserror::Error;

use crate::engine::{stream_rng, BufferMode, InitialRates, SimConfig};

#[derive(Debug, Error)]
pub enum CouplingError {
    #[error("invalid coupling setup: {0}")]
    Config(String),
    #[error("dominance violated at {0:?}")]
    Dominance(CoupledEvent),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CoupledKind {
    Arrival,
    Departure,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CoupledEvent {
    pub time: f64,
    pub kind: CoupledKind,
    /// Server that changed in replica 1 (none for a drop or a no-op tick).
    pub server1: Option<usize>,
    pub server2: Option<usize>,
    pub dominance_ok: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DiscrepancySample {
    pub time: f64,
    /// `(1/n) sum |X2_v - X1_v|`.
    pub discrepancy: f64,
    pub dominance_ok: bool,
}

#[derive(Debug, Clone, Default)]
pub struct CoupleOptions {
    /// Times at which the discrepancy is recorded, ascending.
    pub sample_times: Vec<f64>,
    pub record_events: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct CoupledTrace {
    pub events: Vec<CoupledEvent>,
    pub event_count: u64,
    pub samples: Vec<DiscrepancySample>,
    /// Whether `sum (X2 - X1)` never increased.
    pub discrepancy_monotone: bool,
    pub final1: Vec<bool>,
    pub final2: Vec<bool>,
}

fn remove_sorted(set: &mut Vec<usize>, v: usize) {
    if let Ok(pos) = set.binary_search(&v) {
        set.remove(pos);
    }
}

fn insert_sorted(set: &mut Vec<usize>, v: usize) {
    if let Err(pos) = set.binary_search(&v) {
        set.insert(pos, v);
    }
}

/// Split-interval dispatch: servers taken by replicas 1 and 2 for draw `u`.
pub fn split_dispatch(s2: &[usize], d: &[usize], u: f64) -> (Option<usize>, Option<usize>) {
    let size1 = s2.len() + d.len();
    if size1 == 0 {
        return (None, None);
    }
    let scaled = u * size1 as f64;
    let j = (scaled as usize).min(size1 - 1);
    if j < s2.len() {
        return (Some(s2[j]), Some(s2[j]));
    }
    let first = d[j - s2.len()];
    if s2.is_empty() {
        return (Some(first), None);
    }
    let rescaled = ((scaled - s2.len() as f64) / d.len() as f64).clamp(0.0, 1.0 - f64::EPSILON);
    let k = ((rescaled * s2.len() as f64) as usize).min(s2.len() - 1);
    (Some(first), Some(s2[k]))
}

/// Runs two coupled replicas from occupancies `init1 <= init2`.
pub fn run_coupled(
    config: &SimConfig,
    init1: &[bool],
    init2: &[bool],
    options: &CoupleOptions,
) -> Result<CoupledTrace, CouplingError> {
    config
        .validate()
        .map_err(|e| CouplingError::Config(e.to_string()))?;
    if !config.rate_frozen || config.buffer != BufferMode::Unit {
        return Err(CouplingError::Config(
            "coupling needs frozen rates and unit buffers".into(),
        ));
    }
    let n = config.n;
    if init1.len() != n || init2.len() != n {
        return Err(CouplingError::Config(format!(
            "initial occupancies must have length {n}"
        )));
    }
    if init1.iter().zip(init2).any(|(&a, &b)| a && !b) {
        return Err(CouplingError::Config("initial occupancies must satisfy X1 <= X2".into()));
    }
    let rates: Vec<f64> = match &config.initial_rates {
        InitialRates::Explicit { rates } => rates.clone(),
        InitialRates::Constant { rate } => vec![*rate; n],
        InitialRates::Uniform { .. } => crate::engine::initial_rate_vector(config),
    };
    let total_rate: f64 = rates.iter().sum();
    if !(total_rate > 0.0) {
        return Err(CouplingError::Config("all service rates are zero".into()));
    }
    let mut cumulative = Vec::with_capacity(n);
    let mut run = 0.0;
    for &r in &rates {
        run += r;
        cumulative.push(run);
    }

    let mut x1 = init1.to_vec();
    let mut x2 = init2.to_vec();
    let mut s2: Vec<usize> = (0..n).filter(|&v| !x2[v]).collect();
    let mut d: Vec<usize> = (0..n).filter(|&v| !x1[v] && x2[v]).collect();

    let mut arrivals = stream_rng(config.seed, 0);
    let mut ticks = stream_rng(config.seed, 1);
    let arrival_gap = Exp::new(config.lambda * n as f64)
        .map_err(|e| CouplingError::Config(e.to_string()))?;
    let tick_gap = Exp::new(total_rate).map_err(|e| CouplingError::Config(e.to_string()))?;
    let mut next_arrival = arrival_gap.sample(&mut arrivals);
    let mut next_tick = tick_gap.sample(&mut ticks);

    let mut trace = CoupledTrace {
        events: Vec::new(),
        event_count: 0,
        samples: Vec::with_capacity(options.sample_times.len()),
        discrepancy_monotone: true,
        final1: Vec::new(),
        final2: Vec::new(),
    };
    let mut samples = options.sample_times.iter().copied().peekable();
    let mut dominance_ok = true;

    loop {
        let t = next_arrival.min(next_tick);
        while let Some(ts) = samples.next_if(|&ts| ts < t && ts <= config.horizon) {
            trace.samples.push(DiscrepancySample {
                time: ts,
                discrepancy: d.len() as f64 / n as f64,
                dominance_ok,
            });
        }
        if t > config.horizon {
            break;
        }
        let before = d.len();
        let (kind, touched1, touched2) = if next_arrival <= next_tick {
            let u: f64 = arrivals.random();
            next_arrival = t + arrival_gap.sample(&mut arrivals);
            let (a, b) = split_dispatch(&s2, &d, u);
            match (a, b) {
                (Some(v), Some(w)) if v == w => {
                    remove_sorted(&mut s2, v);
                    x1[v] = true;
                    x2[v] = true;
                }
                (Some(v), second) => {
                    remove_sorted(&mut d, v);
                    x1[v] = true;
                    if let Some(w) = second {
                        remove_sorted(&mut s2, w);
                        insert_sorted(&mut d, w);
                        x2[w] = true;
                    }
                }
                (None, _) => {}
            }
            (CoupledKind::Arrival, a, b)
        } else {
            let u: f64 = ticks.random::<f64>() * total_rate;
            next_tick = t + tick_gap.sample(&mut ticks);
            let v = cumulative.partition_point(|&c| c <= u).min(n - 1);
            let changed1 = x1[v];
            let changed2 = x2[v];
            if x2[v] {
                if !x1[v] {
                    remove_sorted(&mut d, v);
                }
                insert_sorted(&mut s2, v);
            }
            x1[v] = false;
            x2[v] = false;
            (
                CoupledKind::Departure,
                changed1.then_some(v),
                changed2.then_some(v),
            )
        };
        trace.event_count += 1;
        let ok = [touched1, touched2]
            .into_iter()
            .flatten()
            .all(|v| !x1[v] || x2[v]);
        let event = CoupledEvent {
            time: t,
            kind,
            server1: touched1,
            server2: touched2,
            dominance_ok: ok,
        };
        if !ok {
            return Err(CouplingError::Dominance(event));
        }
        dominance_ok &= ok;
        if d.len() > before {
            trace.discrepancy_monotone = false;
        }
        if options.record_events {
            trace.events.push(event);
        }
    }
    for ts in samples.filter(|&ts| ts <= config.horizon) {
        trace.samples.push(DiscrepancySample {
            time: ts,
            discrepancy: d.len() as f64 / n as f64,
            dominance_ok,
        });
    }
    trace.final1 = x1;
    trace.final2 = x2;
    Ok(trace)
}
