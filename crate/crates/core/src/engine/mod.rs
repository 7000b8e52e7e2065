//! Event-driven simulator of the n-server system.
//!
//! Arrivals form a Poisson process of rate `lambda * n` and go to an idle
//! server chosen uniformly at random. With unit buffers an arrival that finds
//! no idle server is dropped; with infinite buffers it joins the queue of a
//! uniformly chosen server. Each task carries unit-mean exponential work,
//! served at the server's current rate, so a service completes once the
//! integrated rate crosses an `Exp(1)` threshold.
//!
//! Servers are advanced lazily: the rate of a server depends only on its own
//! idle observations, so its state is integrated forward only when it is
//! touched. Because the idle observation is frozen during service, the
//! departure epoch of a task is fixed as soon as the task enters service.

mod io;

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Exp1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{self, ControllerError, IdlePath};
use crate::cost::CostModel;

pub use io::{read_trace, write_trace, TraceSummary};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite rate at server {server}, time {time}: {source}")]
    Numerical {
        server: usize,
        time: f64,
        source: ControllerError,
    },
    #[error("rate {rate} of server {server} left [0, {mu_plus}] at time {time}")]
    RateBox {
        server: usize,
        time: f64,
        rate: f64,
        mu_plus: f64,
    },
    #[error("invalid argument: {0}")]
    Domain(String),
    #[error("inconsistent transition at server {server}: {reason}")]
    State { server: usize, reason: String },
    #[error("trace i/o: {0}")]
    Io(String),
}

impl EngineError {
    fn numerical(server: usize, time: f64, source: ControllerError) -> Self {
        EngineError::Numerical {
            server,
            time,
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BufferMode {
    Unit,
    Infinite,
}

/// Initial service rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum InitialRates {
    Constant { rate: f64 },
    Uniform { lo: f64, hi: f64 },
    Explicit { rates: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n: usize,
    pub lambda: f64,
    pub m: f64,
    pub horizon: f64,
    pub buffer: BufferMode,
    pub initial_rates: InitialRates,
    /// Tasks per server at time 0; infinite buffers only.
    pub initial_backlog: usize,
    pub seed: u64,
    /// Integration step cap; `None` means `min(0.05 m, 0.1)`.
    pub substep: Option<f64>,
    pub rate_frozen: bool,
    /// Rate vectors are sampled at multiples of this; `None` disables sampling.
    pub sample_interval: Option<f64>,
}

impl SimConfig {
    pub fn new(n: usize, lambda: f64, m: f64, horizon: f64) -> Self {
        Self {
            n,
            lambda,
            m,
            horizon,
            buffer: BufferMode::Unit,
            initial_rates: InitialRates::Uniform { lo: 0.0, hi: 2.0 },
            initial_backlog: 0,
            seed: 0,
            substep: None,
            rate_frozen: false,
            sample_interval: None,
        }
    }

    /// Fixed-rate configuration with the given rates.
    pub fn frozen(rates: Vec<f64>, lambda: f64, horizon: f64) -> Self {
        let mut cfg = Self::new(rates.len(), lambda, 1.0, horizon);
        cfg.initial_rates = InitialRates::Explicit { rates };
        cfg.rate_frozen = true;
        cfg
    }

    pub fn effective_substep(&self) -> f64 {
        self.substep.unwrap_or_else(|| (0.05 * self.m).min(0.1))
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |msg: String| Err(EngineError::Config(msg));
        if self.n == 0 {
            return bad("n must be at least 1".into());
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be positive, got {}", self.lambda));
        }
        if !(self.m > 0.0 && self.m.is_finite()) {
            return bad(format!("m must be positive, got {}", self.m));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return bad(format!("horizon must be positive, got {}", self.horizon));
        }
        let substep = self.effective_substep();
        if !(substep > 0.0) {
            return bad(format!("substep must be positive, got {substep}"));
        }
        if substep > self.horizon {
            return bad(format!(
                "substep {substep} exceeds horizon {}",
                self.horizon
            ));
        }
        if self.buffer == BufferMode::Unit && self.initial_backlog > 0 {
            return bad("initial backlog requires infinite buffers".into());
        }
        if let Some(dt) = self.sample_interval {
            if !(dt > 0.0) {
                return bad(format!("sample interval must be positive, got {dt}"));
            }
        }
        match &self.initial_rates {
            InitialRates::Constant { rate } if !(*rate >= 0.0) => {
                bad(format!("initial rate must be non-negative, got {rate}"))
            }
            InitialRates::Uniform { lo, hi } if !(*lo >= 0.0 && hi >= lo) => {
                bad(format!("invalid initial rate interval [{lo}, {hi}]"))
            }
            InitialRates::Explicit { rates } if rates.len() != self.n => bad(format!(
                "{} explicit rates for {} servers",
                rates.len(),
                self.n
            )),
            InitialRates::Explicit { rates } if rates.iter().any(|r| !(*r >= 0.0)) => {
                bad("explicit rates must be non-negative".into())
            }
            _ => Ok(()),
        }
    }
}

/// One server's dynamic state, integrated up to `anchor`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServerState {
    pub id: usize,
    pub busy: bool,
    /// Tasks at the server, including the one in service.
    pub queue_len: usize,
    pub rate: f64,
    pub idle_since: f64,
    pub last_idle_len: f64,
    pub hazard_threshold: f64,
    pub hazard_accum: f64,
    pub anchor: f64,
}

impl ServerState {
    pub fn idle(id: usize, rate: f64) -> Self {
        Self {
            id,
            busy: false,
            queue_len: 0,
            rate,
            idle_since: 0.0,
            last_idle_len: 0.0,
            hazard_threshold: 0.0,
            hazard_accum: 0.0,
            anchor: 0.0,
        }
    }

    /// Idle observation fed to the controller at the anchor time.
    pub fn idle_obs(&self) -> f64 {
        if self.busy {
            self.last_idle_len
        } else {
            self.anchor - self.idle_since
        }
    }

    fn path(&self) -> IdlePath {
        if self.busy {
            IdlePath::Frozen(self.last_idle_len)
        } else {
            IdlePath::Growing {
                start: self.anchor - self.idle_since,
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdvanceParams {
    pub m: f64,
    pub substep: f64,
    pub rate_frozen: bool,
    /// Accumulate hazard and stop at a completion; off for pure rate sampling.
    pub track_hazard: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Advance {
    /// State at `anchor + dt`, or at the completion instant.
    pub state: ServerState,
    pub completion: Option<f64>,
    pub clamps: u64,
}

/// Integrates one server over `[anchor, anchor + dt]`.
///
/// While busy the hazard `integral of mu ds` accumulates; if it crosses the
/// threshold inside the interval the crossing offset is located by bisection
/// within the substep and the returned state sits at the completion instant
/// with the accumulator reset.
pub fn advance_server(
    state: &ServerState,
    dt: f64,
    model: &CostModel,
    params: &AdvanceParams,
) -> Result<Advance, EngineError> {
    if !(dt >= 0.0) {
        return Err(EngineError::Domain(format!("negative advance {dt}")));
    }
    let tracking = params.track_hazard && state.busy;
    let mut s = *state;
    let start = state.anchor;

    if params.rate_frozen {
        if tracking && s.rate > 0.0 {
            let needed = (s.hazard_threshold - s.hazard_accum) / s.rate;
            if needed <= dt {
                let offset = needed.max(0.0);
                s.anchor = start + offset;
                s.hazard_accum = 0.0;
                return Ok(Advance {
                    state: s,
                    completion: Some(offset),
                    clamps: 0,
                });
            }
        }
        if tracking {
            s.hazard_accum += s.rate * dt;
        }
        s.anchor = start + dt;
        return Ok(Advance {
            state: s,
            completion: None,
            clamps: 0,
        });
    }

    let mut elapsed = 0.0;
    let mut clamps = 0;
    while elapsed < dt {
        let cap = params.substep.min(dt - elapsed);
        let h = controller::limited_step(model, s.rate, s.path().at(0.0), params.m, cap);
        let path = s.path();
        let step = controller::rk4_step(model, s.rate, path, params.m, h)
            .map_err(|e| EngineError::numerical(s.id, start + elapsed, e))?;
        if tracking && s.hazard_accum + step.hazard >= s.hazard_threshold {
            let target = s.hazard_threshold - s.hazard_accum;
            let (mut lo, mut hi) = (0.0, h);
            let mut at_hi = step;
            while hi - lo > 1e-9 * h {
                let mid = 0.5 * (lo + hi);
                let trial = controller::rk4_step(model, s.rate, path, params.m, mid)
                    .map_err(|e| EngineError::numerical(s.id, start + elapsed, e))?;
                if trial.hazard >= target {
                    hi = mid;
                    at_hi = trial;
                } else {
                    lo = mid;
                }
            }
            let offset = elapsed + hi;
            s.rate = at_hi.rate;
            s.anchor = start + offset;
            s.hazard_accum = 0.0;
            return Ok(Advance {
                state: s,
                completion: Some(offset),
                clamps: clamps + u64::from(at_hi.clamped),
            });
        }
        if tracking {
            s.hazard_accum += step.hazard;
        }
        clamps += u64::from(step.clamped);
        s.rate = step.rate;
        elapsed += h;
        s.anchor = start + elapsed;
    }
    s.anchor = start + dt;
    Ok(Advance {
        state: s,
        completion: None,
        clamps,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transition {
    /// A task enters service at an idle server.
    BeginBusy,
    /// A service completes; the server idles unless tasks remain queued.
    BeginIdle,
}

/// Idle-time bookkeeping at a busy/idle boundary.
pub fn record_idle_transition(
    state: &ServerState,
    now: f64,
    kind: Transition,
) -> Result<ServerState, EngineError> {
    let mut s = *state;
    let fail = |reason: &str| EngineError::State {
        server: state.id,
        reason: reason.to_string(),
    };
    match kind {
        Transition::BeginBusy => {
            if s.busy {
                return Err(fail("begin_busy on a busy server"));
            }
            if now < s.idle_since {
                return Err(fail("begin_busy before the idle period started"));
            }
            s.busy = true;
            s.queue_len += 1;
            s.last_idle_len = now - s.idle_since;
            s.hazard_accum = 0.0;
        }
        Transition::BeginIdle => {
            if !s.busy || s.queue_len == 0 {
                return Err(fail("begin_idle on an idle server"));
            }
            s.queue_len -= 1;
            s.hazard_accum = 0.0;
            if s.queue_len > 0 {
                s.last_idle_len = 0.0;
            } else {
                s.busy = false;
                s.idle_since = now;
            }
        }
    }
    Ok(s)
}

/// Picks the idle server whose slot `[(j-1)/|S|, j/|S|)` contains `u`.
pub fn dispatch_arrival(idle_set: &[usize], u: f64) -> Result<Option<usize>, EngineError> {
    if !(0.0..1.0).contains(&u) {
        return Err(EngineError::Domain(format!("uniform draw {u} outside [0, 1)")));
    }
    if idle_set.is_empty() {
        return Ok(None);
    }
    let j = ((u * idle_set.len() as f64) as usize).min(idle_set.len() - 1);
    Ok(Some(idle_set[j]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Arrival,
    Drop,
    Departure,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Arrival => "arrival",
            EventKind::Drop => "drop",
            EventKind::Departure => "departure",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub time: f64,
    pub kind: EventKind,
    pub server: Option<usize>,
    pub seq: u64,
}

/// What an observer sees before the first event.
#[derive(Debug, Clone, Copy)]
pub struct RunStart<'a> {
    pub config: &'a SimConfig,
    pub initial_rates: &'a [f64],
    pub initial_queue: &'a [usize],
}

pub trait Observer {
    fn on_start(&mut self, _start: &RunStart<'_>) {}
    fn on_event(&mut self, _event: &Event) {}
    fn on_rate_sample(&mut self, _time: f64, _rates: &[f64]) {}
    fn on_finish(&mut self, _horizon: f64) {}
}

impl<A: Observer, B: Observer> Observer for (A, B) {
    fn on_start(&mut self, start: &RunStart<'_>) {
        self.0.on_start(start);
        self.1.on_start(start);
    }
    fn on_event(&mut self, event: &Event) {
        self.0.on_event(event);
        self.1.on_event(event);
    }
    fn on_rate_sample(&mut self, time: f64, rates: &[f64]) {
        self.0.on_rate_sample(time, rates);
        self.1.on_rate_sample(time, rates);
    }
    fn on_finish(&mut self, horizon: f64) {
        self.0.on_finish(horizon);
        self.1.on_finish(horizon);
    }
}

impl<O: Observer + ?Sized> Observer for &mut O {
    fn on_start(&mut self, start: &RunStart<'_>) {
        (**self).on_start(start);
    }
    fn on_event(&mut self, event: &Event) {
        (**self).on_event(event);
    }
    fn on_rate_sample(&mut self, time: f64, rates: &[f64]) {
        (**self).on_rate_sample(time, rates);
    }
    fn on_finish(&mut self, horizon: f64) {
        (**self).on_finish(horizon);
    }
}

/// Counters gathered over a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub arrivals: u64,
    pub drops: u64,
    pub departures: u64,
    pub in_system: u64,
    pub initial_backlog: u64,
    /// Integration steps whose result was clamped into `[0, mu_plus]`.
    pub clamps: u64,
    /// Events at which some server that started at or above `mu_minus`
    /// was observed below it.
    pub below_mu_minus: u64,
    pub min_rate: f64,
    pub max_rate: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub final_rates: Vec<f64>,
    pub initial_rates: Vec<f64>,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskRecord {
    pub arrival: f64,
    pub server: usize,
    pub completion: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateSample {
    pub time: f64,
    pub rates: Vec<f64>,
}

/// Completed idle periods of one server.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IdleStats {
    pub periods: u64,
    pub total: f64,
    pub total_sq: f64,
    pub max: f64,
}

#[derive(Debug, Clone)]
pub struct SimTrace {
    pub config: SimConfig,
    pub initial_rates: Vec<f64>,
    pub initial_queue: Vec<usize>,
    pub events: Vec<Event>,
    pub rate_samples: Vec<RateSample>,
    pub tasks: Vec<TaskRecord>,
    pub idle_stats: Vec<IdleStats>,
    pub final_rates: Vec<f64>,
    pub diagnostics: Diagnostics,
}

impl SimTrace {
    /// Per-server sequence of completed idle period lengths.
    pub fn idle_periods(&self) -> Vec<Vec<f64>> {
        let n = self.config.n;
        let mut queue = self.initial_queue.clone();
        let mut since = vec![0.0; n];
        let mut out = vec![Vec::new(); n];
        for e in &self.events {
            match (e.kind, e.server) {
                (EventKind::Arrival, Some(v)) => {
                    if queue[v] == 0 {
                        out[v].push(e.time - since[v]);
                    }
                    queue[v] += 1;
                }
                (EventKind::Departure, Some(v)) => {
                    queue[v] -= 1;
                    if queue[v] == 0 {
                        since[v] = e.time;
                    }
                }
                _ => {}
            }
        }
        out
    }
}

/// Observer that keeps everything needed for a [`SimTrace`].
#[derive(Debug, Default)]
pub struct TraceRecorder {
    events: Vec<Event>,
    rate_samples: Vec<RateSample>,
    tasks: Vec<TaskRecord>,
    open: Vec<std::collections::VecDeque<usize>>,
    initial_queue: Vec<usize>,
    idle: Vec<IdleStats>,
    idle_since: Vec<f64>,
    queue: Vec<usize>,
}

impl TraceRecorder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Assembles the trace once the run that fed this recorder has returned.
    pub fn into_trace(self, config: &SimConfig, outcome: RunOutcome) -> SimTrace {
        SimTrace {
            config: config.clone(),
            initial_rates: outcome.initial_rates,
            initial_queue: self.initial_queue,
            events: self.events,
            rate_samples: self.rate_samples,
            tasks: self.tasks,
            idle_stats: self.idle,
            final_rates: outcome.final_rates,
            diagnostics: outcome.diagnostics,
        }
    }
}

impl Observer for TraceRecorder {
    fn on_start(&mut self, start: &RunStart<'_>) {
        let n = start.config.n;
        self.initial_queue = start.initial_queue.to_vec();
        self.queue = start.initial_queue.to_vec();
        self.idle = vec![IdleStats::default(); n];
        self.idle_since = vec![0.0; n];
        self.open = vec![Default::default(); n];
        for (v, &q) in start.initial_queue.iter().enumerate() {
            for _ in 0..q {
                self.open[v].push_back(self.tasks.len());
                self.tasks.push(TaskRecord {
                    arrival: 0.0,
                    server: v,
                    completion: None,
                });
            }
        }
    }

    fn on_event(&mut self, event: &Event) {
        self.events.push(*event);
        match (event.kind, event.server) {
            (EventKind::Arrival, Some(v)) => {
                if self.queue[v] == 0 {
                    let len = event.time - self.idle_since[v];
                    let st = &mut self.idle[v];
                    st.periods += 1;
                    st.total += len;
                    st.total_sq += len * len;
                    st.max = st.max.max(len);
                }
                self.queue[v] += 1;
                self.open[v].push_back(self.tasks.len());
                self.tasks.push(TaskRecord {
                    arrival: event.time,
                    server: v,
                    completion: None,
                });
            }
            (EventKind::Departure, Some(v)) => {
                self.queue[v] -= 1;
                if self.queue[v] == 0 {
                    self.idle_since[v] = event.time;
                }
                if let Some(k) = self.open[v].pop_front() {
                    self.tasks[k].completion = Some(event.time);
                }
            }
            _ => {}
        }
    }

    fn on_rate_sample(&mut self, time: f64, rates: &[f64]) {
        self.rate_samples.push(RateSample {
            time,
            rates: rates.to_vec(),
        });
    }
}

/// Observer that ignores everything.
#[derive(Debug, Default, Clone, Copy)]
pub struct NullObserver;

impl Observer for NullObserver {}

/// Runs one replication and records the full trace.
pub fn run_simulation(config: &SimConfig, model: &CostModel) -> Result<SimTrace, EngineError> {
    let mut recorder = TraceRecorder::new();
    let outcome = run_with_observer(config, model, &mut recorder)?;
    Ok(recorder.into_trace(config, outcome))
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Pending {
    time: f64,
    server: usize,
}

impl Eq for Pending {}

impl Ord for Pending {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on (time, server)
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.server.cmp(&self.server))
    }
}

impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// RNG stream layout under the master seed.
pub mod streams {
    pub const ARRIVALS: u64 = 0;
    pub fn server(v: usize) -> u64 {
        1 + v as u64
    }
    pub fn initial_rates(n: usize) -> u64 {
        1 + n as u64
    }
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draws the initial rate vector of a configuration.
pub fn initial_rate_vector(config: &SimConfig) -> Vec<f64> {
    match &config.initial_rates {
        InitialRates::Constant { rate } => vec![*rate; config.n],
        InitialRates::Explicit { rates } => rates.clone(),
        InitialRates::Uniform { lo, hi } => {
            let mut rng = stream_rng(config.seed, streams::initial_rates(config.n));
            (0..config.n)
                .map(|_| if hi > lo { rng.random_range(*lo..*hi) } else { *lo })
                .collect()
        }
    }
}

struct Engine<'a> {
    cfg: &'a SimConfig,
    model: &'a CostModel,
    params: AdvanceParams,
    servers: Vec<ServerState>,
    /// State at the scheduled completion of the task in service.
    completion: Vec<Option<ServerState>>,
    idle: Vec<usize>,
    heap: BinaryHeap<Pending>,
    server_rng: Vec<ChaCha8Rng>,
    guard_low: Vec<bool>,
    diag: Diagnostics,
    seq: u64,
}

impl Engine<'_> {
    fn check_rate(&mut self, v: usize, time: f64) -> Result<(), EngineError> {
        let rate = self.servers[v].rate;
        if !(0.0..=self.model.mu_plus).contains(&rate) {
            return Err(EngineError::RateBox {
                server: v,
                time,
                rate,
                mu_plus: self.model.mu_plus,
            });
        }
        if self.guard_low[v] && rate < self.model.mu_minus {
            self.diag.below_mu_minus += 1;
        }
        self.diag.min_rate = self.diag.min_rate.min(rate);
        self.diag.max_rate = self.diag.max_rate.max(rate);
        Ok(())
    }

    fn advance_to(&mut self, v: usize, now: f64) -> Result<(), EngineError> {
        let s = self.servers[v];
        let dt = now - s.anchor;
        if dt > 0.0 {
            let params = AdvanceParams {
                track_hazard: false,
                ..self.params
            };
            let adv = advance_server(&s, dt, self.model, &params)?;
            self.diag.clamps += adv.clamps;
            self.servers[v] = adv.state;
        }
        Ok(())
    }

    /// Starts a fresh service at `v` and schedules its completion.
    fn start_service(&mut self, v: usize) -> Result<(), EngineError> {
        let threshold: f64 = Exp1.sample(&mut self.server_rng[v]);
        let s = &mut self.servers[v];
        s.hazard_threshold = threshold;
        s.hazard_accum = 0.0;
        let s = *s;
        let adv = advance_server(&s, self.cfg.horizon - s.anchor, self.model, &self.params)?;
        self.diag.clamps += adv.clamps;
        match adv.completion {
            Some(offset) => {
                self.completion[v] = Some(adv.state);
                self.heap.push(Pending {
                    time: s.anchor + offset,
                    server: v,
                });
            }
            None => self.completion[v] = None,
        }
        Ok(())
    }

    fn rates_at(&self, t: f64) -> Result<Vec<f64>, EngineError> {
        let params = AdvanceParams {
            track_hazard: false,
            ..self.params
        };
        self.servers
            .iter()
            .map(|s| {
                let dt = t - s.anchor;
                if dt <= 0.0 || self.params.rate_frozen {
                    Ok(s.rate)
                } else {
                    advance_server(s, dt, self.model, &params).map(|a| a.state.rate)
                }
            })
            .collect()
    }

    fn next_seq(&mut self) -> u64 {
        let s = self.seq;
        self.seq += 1;
        s
    }
}

/// Runs one replication, streaming events to `observer`.
pub fn run_with_observer<O: Observer>(
    config: &SimConfig,
    model: &CostModel,
    mut observer: O,
) -> Result<RunOutcome, EngineError> {
    config.validate()?;
    let n = config.n;
    let initial_rates = initial_rate_vector(config);
    let guard_low: Vec<bool> = initial_rates.iter().map(|&r| r >= model.mu_minus).collect();
    let mut servers: Vec<ServerState> = initial_rates
        .iter()
        .enumerate()
        .map(|(v, &r)| ServerState::idle(v, r.min(model.mu_plus)))
        .collect();
    let backlog = match config.buffer {
        BufferMode::Unit => 0,
        BufferMode::Infinite => config.initial_backlog,
    };
    for s in servers.iter_mut() {
        if backlog > 0 {
            s.busy = true;
            s.queue_len = backlog;
        }
    }
    let initial_queue = vec![backlog; n];

    let mut engine = Engine {
        cfg: config,
        model,
        params: AdvanceParams {
            m: config.m,
            substep: config.effective_substep(),
            rate_frozen: config.rate_frozen,
            track_hazard: true,
        },
        servers,
        completion: vec![None; n],
        idle: if backlog > 0 { Vec::new() } else { (0..n).collect() },
        heap: BinaryHeap::new(),
        server_rng: (0..n)
            .map(|v| stream_rng(config.seed, streams::server(v)))
            .collect(),
        guard_low,
        diag: Diagnostics {
            initial_backlog: (backlog * n) as u64,
            min_rate: f64::INFINITY,
            max_rate: f64::NEG_INFINITY,
            ..Diagnostics::default()
        },
        seq: 0,
    };
    for v in 0..n {
        engine.check_rate(v, 0.0)?;
    }

    observer.on_start(&RunStart {
        config,
        initial_rates: &initial_rates,
        initial_queue: &initial_queue,
    });

    if backlog > 0 {
        for v in 0..n {
            engine.start_service(v)?;
        }
    }

    let mut arrival_rng = stream_rng(config.seed, streams::ARRIVALS);
    let interarrival = Exp::new(config.lambda * n as f64)
        .map_err(|e| EngineError::Config(format!("arrival rate: {e}")))?;
    let mut next_arrival = interarrival.sample(&mut arrival_rng);
    let mut next_sample = config.sample_interval.map(|_| 0.0);
    let mut sample_index: u64 = 0;
    let horizon = config.horizon;

    loop {
        let next_dep = engine.heap.peek().map(|p| p.time);
        let (t, is_arrival) = match next_dep {
            Some(d) if d < next_arrival => (d, false),
            _ => (next_arrival, true),
        };
        let t_stop = t.min(horizon);
        while let (Some(ts), Some(dt)) = (next_sample, config.sample_interval) {
            if ts > t_stop || (ts == t_stop && t <= horizon) {
                break;
            }
            let rates = engine.rates_at(ts)?;
            observer.on_rate_sample(ts, &rates);
            sample_index += 1;
            next_sample = Some(sample_index as f64 * dt);
        }
        if t > horizon {
            break;
        }

        if is_arrival {
            let u: f64 = arrival_rng.random();
            next_arrival = t + interarrival.sample(&mut arrival_rng);
            engine.diag.arrivals += 1;
            let target = dispatch_arrival(&engine.idle, u)?;
            let event = match (target, config.buffer) {
                (Some(v), _) => {
                    let pos = engine.idle.binary_search(&v).expect("idle set is sorted");
                    engine.idle.remove(pos);
                    engine.advance_to(v, t)?;
                    engine.servers[v] =
                        record_idle_transition(&engine.servers[v], t, Transition::BeginBusy)?;
                    engine.check_rate(v, t)?;
                    engine.start_service(v)?;
                    Event {
                        time: t,
                        kind: EventKind::Arrival,
                        server: Some(v),
                        seq: engine.next_seq(),
                    }
                }
                (None, BufferMode::Unit) => {
                    engine.diag.drops += 1;
                    Event {
                        time: t,
                        kind: EventKind::Drop,
                        server: None,
                        seq: engine.next_seq(),
                    }
                }
                (None, BufferMode::Infinite) => {
                    let v = ((u * n as f64) as usize).min(n - 1);
                    engine.servers[v].queue_len += 1;
                    Event {
                        time: t,
                        kind: EventKind::Arrival,
                        server: Some(v),
                        seq: engine.next_seq(),
                    }
                }
            };
            observer.on_event(&event);
        } else {
            let Pending { server: v, .. } = engine.heap.pop().expect("peeked");
            let mut done = engine.completion[v].take().expect("scheduled completion");
            done.queue_len = engine.servers[v].queue_len;
            let after = record_idle_transition(&done, t, Transition::BeginIdle)?;
            engine.servers[v] = after;
            engine.diag.departures += 1;
            engine.check_rate(v, t)?;
            if after.busy {
                engine.start_service(v)?;
            } else {
                let pos = engine.idle.binary_search(&v).unwrap_err();
                engine.idle.insert(pos, v);
            }
            let event = Event {
                time: t,
                kind: EventKind::Departure,
                server: Some(v),
                seq: engine.next_seq(),
            };
            observer.on_event(&event);
        }
    }

    let final_rates = engine.rates_at(horizon)?;
    for (v, &r) in final_rates.iter().enumerate() {
        engine.servers[v].rate = r;
        engine.check_rate(v, horizon)?;
    }
    engine.diag.in_system = engine.servers.iter().map(|s| s.queue_len as u64).sum();
    observer.on_finish(horizon);
    Ok(RunOutcome {
        final_rates,
        initial_rates,
        diagnostics: engine.diag,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> CostModel {
        CostModel::inverse_quadratic(0.1, 0.5, 3.0)
    }

    fn frozen_params() -> AdvanceParams {
        AdvanceParams {
            m: 1.0,
            substep: 0.1,
            rate_frozen: true,
            track_hazard: true,
        }
    }

    #[test]
    fn dispatch_examples() {
        assert_eq!(dispatch_arrival(&[2, 5], 0.6).unwrap(), Some(5));
        assert_eq!(dispatch_arrival(&[2, 5], 0.49).unwrap(), Some(2));
        assert_eq!(dispatch_arrival(&[7], 0.0).unwrap(), Some(7));
        assert_eq!(dispatch_arrival(&[], 0.3).unwrap(), None);
        assert!(dispatch_arrival(&[1], 1.0).is_err());
        assert!(dispatch_arrival(&[1], -0.1).is_err());
    }

    #[test]
    fn constant_hazard_inversion() {
        let mut s = ServerState::idle(0, 2.0);
        s.busy = true;
        s.queue_len = 1;
        s.hazard_threshold = 1.0;
        let adv = advance_server(&s, 1.0, &model(), &frozen_params()).unwrap();
        assert_eq!(adv.completion, Some(0.5));
        assert_eq!(adv.state.hazard_accum, 0.0);
        assert_eq!(adv.state.anchor, 0.5);
    }

    #[test]
    fn adaptive_hazard_matches_frozen_at_equilibrium() {
        let model = model();
        let mu = model.solve_mu_star(0.8).unwrap().mu_star;
        let mut s = ServerState::idle(0, mu);
        s.busy = true;
        s.queue_len = 1;
        s.last_idle_len = (1.0 - 0.8 / mu) / 0.8;
        s.hazard_threshold = 1.3;
        let params = AdvanceParams {
            m: 5.0,
            substep: 0.1,
            rate_frozen: false,
            track_hazard: true,
        };
        let adv = advance_server(&s, 10.0, &model, &params).unwrap();
        let offset = adv.completion.unwrap();
        assert!((offset - 1.3 / mu).abs() < 1e-8, "{offset}");
    }

    #[test]
    fn idle_clock_grows() {
        let s = ServerState::idle(0, 1.0);
        let params = AdvanceParams {
            m: 10.0,
            substep: 0.1,
            rate_frozen: false,
            track_hazard: true,
        };
        let adv = advance_server(&s, 0.3, &model(), &params).unwrap();
        assert_eq!(adv.completion, None);
        assert_eq!(adv.state.idle_obs(), 0.3);
        assert!(advance_server(&s, -0.1, &model(), &params).is_err());
    }

    #[test]
    fn transitions() {
        let mut s = ServerState::idle(3, 1.0);
        s.idle_since = 3.0;
        let busy = record_idle_transition(&s, 5.0, Transition::BeginBusy).unwrap();
        assert_eq!(busy.last_idle_len, 2.0);
        assert!(record_idle_transition(&busy, 5.5, Transition::BeginBusy).is_err());

        let mut queued = busy;
        queued.queue_len = 2;
        let b2b = record_idle_transition(&queued, 6.0, Transition::BeginIdle).unwrap();
        assert!(b2b.busy);
        assert_eq!(b2b.last_idle_len, 0.0);
        assert_eq!(b2b.queue_len, 1);

        let idle = record_idle_transition(&b2b, 7.0, Transition::BeginIdle).unwrap();
        assert!(!idle.busy);
        assert_eq!(idle.idle_since, 7.0);
        assert!(record_idle_transition(&idle, 7.1, Transition::BeginIdle).is_err());
        let mut later = idle;
        later.anchor = 7.4;
        assert!((later.idle_obs() - 0.4).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let mut cfg = SimConfig::new(4, 0.8, 1.0, 0.01);
        assert!(matches!(cfg.validate(), Err(EngineError::Config(_))));
        cfg.horizon = 10.0;
        assert!(cfg.validate().is_ok());
        cfg.initial_backlog = 3;
        assert!(cfg.validate().is_err());
        cfg.buffer = BufferMode::Infinite;
        assert!(cfg.validate().is_ok());
        cfg.n = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn drops_when_all_busy() {
        let mut cfg = SimConfig::frozen(vec![0.01], 5.0, 20.0);
        cfg.seed = 3;
        let trace = run_simulation(&cfg, &model()).unwrap();
        let first = trace.events.iter().position(|e| e.kind == EventKind::Arrival);
        let drop = trace.events.iter().position(|e| e.kind == EventKind::Drop);
        assert!(first.is_some() && drop.is_some());
        assert!(trace.events[drop.unwrap()].server.is_none());
    }

    #[test]
    fn conservation_and_ordering() {
        let mut cfg = SimConfig::new(8, 0.9, 20.0, 200.0);
        cfg.buffer = BufferMode::Infinite;
        cfg.initial_backlog = 5;
        cfg.seed = 11;
        let trace = run_simulation(&cfg, &model()).unwrap();
        let d = &trace.diagnostics;
        assert_eq!(d.arrivals + d.initial_backlog, d.departures + d.drops + d.in_system);
        for w in trace.events.windows(2) {
            assert!(w[0].time <= w[1].time);
            assert!(w[0].seq < w[1].seq);
        }
    }
}
