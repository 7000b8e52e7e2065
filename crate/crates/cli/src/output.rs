//! Data-file writers. Floats are written in shortest round-trip form.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::experiment::ExperimentResult;
use crate::CliError;

pub fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// CSV with an explicit header, for row types that may be empty.
pub fn write_csv_with_header<T: Serialize>(
    path: &Path,
    header: &[&str],
    rows: impl IntoIterator<Item = T>,
) -> Result<(), CliError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// `experiment.json`, `sweep.csv`, `sweep_summary.csv` and, for trajectory
/// runs, `trajectory.csv`.
pub fn write_experiment(dir: &Path, result: &ExperimentResult) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join("experiment.json"), &result.spec)?;
    write_csv(&dir.join("sweep.csv"), &result.points)?;
    write_csv(&dir.join("sweep_summary.csv"), &result.summary)?;
    if result.spec.trajectory {
        write_csv_with_header(
            &dir.join("trajectory.csv"),
            &[
                "point",
                "replication",
                "time",
                "mean_rate",
                "min_rate",
                "p5",
                "p50",
                "p95",
                "max_rate",
                "max_queue",
                "in_system",
            ],
            result.trajectory(),
        )?;
    }
    Ok(())
}
