//! Trace export and import.
//!
//! A trace directory holds `events.csv` (time,kind,server,seq), `rates.csv`
//! (time,server,rate), `tasks.csv` (arrival,server,completion) and
//! `summary.json`. Floats are written in shortest round-trip form, so a trace
//! read back is bit-identical to the one written.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    Diagnostics, EngineError, Event, EventKind, IdleStats, RateSample, SimConfig, SimTrace,
    TaskRecord,
};

/// Contents of `summary.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceSummary {
    pub config: SimConfig,
    pub initial_rates: Vec<f64>,
    pub initial_queue: Vec<usize>,
    pub final_rates: Vec<f64>,
    pub diagnostics: Diagnostics,
    pub idle_stats: Vec<IdleStats>,
    /// Steady-state estimate attached by the caller, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimate: Option<serde_json::Value>,
}

fn io_err(e: impl std::fmt::Display) -> EngineError {
    EngineError::Io(e.to_string())
}

fn writer(dir: &Path, name: &str) -> Result<csv::Writer<BufWriter<File>>, EngineError> {
    let file = File::create(dir.join(name)).map_err(io_err)?;
    Ok(csv::Writer::from_writer(BufWriter::new(file)))
}

pub fn write_trace(
    dir: &Path,
    trace: &SimTrace,
    estimate: Option<serde_json::Value>,
) -> Result<(), EngineError> {
    std::fs::create_dir_all(dir).map_err(io_err)?;

    let mut w = writer(dir, "events.csv")?;
    w.write_record(["time", "kind", "server", "seq"]).map_err(io_err)?;
    for e in &trace.events {
        let server = e.server.map(|v| v.to_string()).unwrap_or_default();
        w.write_record([
            e.time.to_string(),
            e.kind.as_str().to_string(),
            server,
            e.seq.to_string(),
        ])
        .map_err(io_err)?;
    }
    w.flush().map_err(io_err)?;

    let mut w = writer(dir, "rates.csv")?;
    w.write_record(["time", "server", "rate"]).map_err(io_err)?;
    for s in &trace.rate_samples {
        let t = s.time.to_string();
        for (v, r) in s.rates.iter().enumerate() {
            w.write_record([t.as_str(), &v.to_string(), &r.to_string()])
                .map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)?;

    let mut w = writer(dir, "tasks.csv")?;
    w.write_record(["arrival", "server", "completion"]).map_err(io_err)?;
    for t in &trace.tasks {
        let done = t.completion.map(|c| c.to_string()).unwrap_or_default();
        w.write_record([t.arrival.to_string(), t.server.to_string(), done])
            .map_err(io_err)?;
    }
    w.flush().map_err(io_err)?;

    let summary = TraceSummary {
        config: trace.config.clone(),
        initial_rates: trace.initial_rates.clone(),
        initial_queue: trace.initial_queue.clone(),
        final_rates: trace.final_rates.clone(),
        diagnostics: trace.diagnostics.clone(),
        idle_stats: trace.idle_stats.clone(),
        estimate,
    };
    let mut f = BufWriter::new(File::create(dir.join("summary.json")).map_err(io_err)?);
    serde_json::to_writer_pretty(&mut f, &summary).map_err(io_err)?;
    f.write_all(b"\n").map_err(io_err)?;
    f.flush().map_err(io_err)
}

fn reader(dir: &Path, name: &str) -> Result<csv::Reader<BufReader<File>>, EngineError> {
    let file = File::open(dir.join(name)).map_err(io_err)?;
    Ok(csv::Reader::from_reader(BufReader::new(file)))
}

fn parse<T: std::str::FromStr>(field: &str, what: &str) -> Result<T, EngineError> {
    field
        .parse()
        .map_err(|_| EngineError::Io(format!("bad {what} field {field:?}")))
}

fn optional<T: std::str::FromStr>(field: &str, what: &str) -> Result<Option<T>, EngineError> {
    if field.is_empty() {
        Ok(None)
    } else {
        parse(field, what).map(Some)
    }
}

pub fn read_trace(dir: &Path) -> Result<SimTrace, EngineError> {
    let f = File::open(dir.join("summary.json")).map_err(io_err)?;
    let summary: TraceSummary = serde_json::from_reader(BufReader::new(f)).map_err(io_err)?;

    let mut events = Vec::new();
    for rec in reader(dir, "events.csv")?.records() {
        let rec = rec.map_err(io_err)?;
        let kind = match &rec[1] {
            "arrival" => EventKind::Arrival,
            "drop" => EventKind::Drop,
            "departure" => EventKind::Departure,
            other => return Err(EngineError::Io(format!("unknown event kind {other:?}"))),
        };
        events.push(Event {
            time: parse(&rec[0], "time")?,
            kind,
            server: optional(&rec[2], "server")?,
            seq: parse(&rec[3], "seq")?,
        });
    }

    let n = summary.config.n;
    let mut rate_samples: Vec<RateSample> = Vec::new();
    for rec in reader(dir, "rates.csv")?.records() {
        let rec = rec.map_err(io_err)?;
        let time: f64 = parse(&rec[0], "time")?;
        let v: usize = parse(&rec[1], "server")?;
        let rate: f64 = parse(&rec[2], "rate")?;
        if v == 0 {
            rate_samples.push(RateSample {
                time,
                rates: Vec::with_capacity(n),
            });
        }
        match rate_samples.last_mut() {
            Some(s) if s.rates.len() == v && s.time == time => s.rates.push(rate),
            _ => return Err(EngineError::Io(format!("rates.csv out of order at time {time}"))),
        }
    }

    let mut tasks = Vec::new();
    for rec in reader(dir, "tasks.csv")?.records() {
        let rec = rec.map_err(io_err)?;
        tasks.push(TaskRecord {
            arrival: parse(&rec[0], "arrival")?,
            server: parse(&rec[1], "server")?,
            completion: optional(&rec[2], "completion")?,
        });
    }

    Ok(SimTrace {
        config: summary.config,
        initial_rates: summary.initial_rates,
        initial_queue: summary.initial_queue,
        events,
        rate_samples,
        tasks,
        idle_stats: summary.idle_stats,
        final_rates: summary.final_rates,
        diagnostics: summary.diagnostics,
    })
}
