//! Artifact writers: CSV tables, the streaming training log, and the run
//! manifest. Whole files are written to a temporary sibling and renamed into
//! place.

use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use specfair_core::fairness::{fmt_float, TaskMetrics, METRICS_CSV_HEADER};
use specfair_core::mitigation::{MixResult, StepRecord, SweepRow, TrainLogRow, TrainLogSink, SWEEP_HEADER, TRAIN_LOG_HEADER};

use crate::config::ExperimentConfig;

pub const UNFAIRNESS_TRACE_HEADER: [&str; 5] = ["step", "u", "alpha_variance", "d_min", "star_task"];
pub const BALANCE_HEADER: [&str; 6] = ["mix", "d_a", "d_b", "alpha_a", "alpha_b", "u"];
pub const REPRESENTATION_HEADER: [&str; 4] = ["rank", "task", "probability", "count"];
pub const SIMULATE_HEADER: [&str; 6] = [
    "task",
    "steps",
    "first_draft_acceptance",
    "mean_accepted",
    "mean_emitted",
    "exact_alpha",
];

/// ISO-8601 UTC with millisecond precision.
pub fn now_utc() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

/// Writes `bytes` to `path` via a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut builder = tempfile::Builder::new();
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        builder.permissions(std::fs::Permissions::from_mode(0o644));
    }
    let mut tmp = builder.tempfile_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

fn csv_bytes<I, R>(header: &[&str], rows: I) -> io::Result<Vec<u8>>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator,
    R::Item: AsRef<[u8]>,
{
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.into_inner().map_err(|e| e.into_error())
}

pub fn write_csv<I, R>(path: &Path, header: &[&str], rows: I) -> io::Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator,
    R::Item: AsRef<[u8]>,
{
    write_atomic(path, &csv_bytes(header, rows)?)
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_float).unwrap_or_default()
}

pub fn write_metrics(path: &Path, metrics: &[TaskMetrics]) -> io::Result<()> {
    write_csv(path, &METRICS_CSV_HEADER, metrics.iter().map(|m| m.csv_fields()))
}

pub fn write_sweep(path: &Path, rows: &[SweepRow]) -> io::Result<()> {
    write_csv(
        path,
        &SWEEP_HEADER,
        rows.iter()
            .map(|r| [r.task.clone(), fmt_float(r.temp), fmt_float(r.alpha), opt(r.quality_adjusted)]),
    )
}

pub fn write_balance(path: &Path, rows: &[MixResult]) -> io::Result<()> {
    write_csv(
        path,
        &BALANCE_HEADER,
        rows.iter().map(|r| [r.mix, r.d_a, r.d_b, r.alpha_a, r.alpha_b, r.u].map(fmt_float)),
    )
}

/// `step = 0` is the state before training; step `k` is after update `k`.
pub fn write_unfairness_trace(
    path: &Path,
    initial: (f64, f64, f64),
    history: &[StepRecord],
    task_ids: &[String],
) -> io::Result<()> {
    let first = [
        "0".to_string(),
        fmt_float(initial.0),
        fmt_float(initial.1),
        fmt_float(initial.2),
        String::new(),
    ];
    let rest = history.iter().map(|r| {
        [
            (r.step + 1).to_string(),
            fmt_float(r.exact_u),
            fmt_float(r.alpha_variance),
            fmt_float(r.d_min),
            task_ids[r.star].clone(),
        ]
    });
    write_csv(path, &UNFAIRNESS_TRACE_HEADER, std::iter::once(first).chain(rest))
}

/// Append-only training log, flushed after every step.
pub struct CsvTrainLog {
    writer: csv::Writer<File>,
}

impl CsvTrainLog {
    pub fn create(path: &Path) -> io::Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let mut writer = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(path)?;
        writer.write_record(TRAIN_LOG_HEADER)?;
        writer.flush()?;
        Ok(Self { writer })
    }
}

impl TrainLogSink for CsvTrainLog {
    fn timestamp(&self) -> String {
        now_utc()
    }

    fn write_step(&mut self, rows: &[TrainLogRow]) -> Result<(), String> {
        for r in rows {
            self.writer
                .write_record([
                    r.timestamp.clone(),
                    r.step.to_string(),
                    r.star_task.clone(),
                    r.task.clone(),
                    fmt_float(r.d_hat),
                    fmt_float(r.acceptance),
                    opt(r.tv_q),
                    opt(r.tv_p),
                ])
                .map_err(|e| e.to_string())?;
        }
        self.writer.flush().map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_hash: String,
    pub started_at: String,
    pub finished_at: String,
    pub config: ExperimentConfig,
    pub artifacts: Vec<Artifact>,
}

impl RunManifest {
    pub const FILE: &'static str = "run_manifest.json";

    /// Hashes every listed artifact (paths relative to `dir`) and writes the
    /// manifest atomically.
    pub fn finish(
        dir: &Path,
        command: &str,
        config: &ExperimentConfig,
        started_at: String,
        artifacts: &[PathBuf],
    ) -> io::Result<Self> {
        let mut listed = Vec::with_capacity(artifacts.len());
        for rel in artifacts {
            let bytes = std::fs::read(dir.join(rel))?;
            listed.push(Artifact {
                path: rel.to_string_lossy().replace('\\', "/"),
                bytes: bytes.len() as u64,
                sha256: hex::encode(Sha256::digest(&bytes)),
            });
        }
        let manifest = Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config_hash: config.hash(),
            started_at,
            finished_at: now_utc(),
            config: config.clone(),
            artifacts: listed,
        };
        let mut json = serde_json::to_string_pretty(&manifest).map_err(io::Error::other)?;
        json.push('\n');
        write_atomic(&dir.join(Self::FILE), json.as_bytes())?;
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timestamps_are_iso_utc() {
        let t = now_utc();
        assert!(t.ends_with('Z') && t.contains('T'), "{t}");
        assert!(chrono::DateTime::parse_from_rfc3339(&t).is_ok());
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/x.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }

    #[test]
    fn csv_layout() {
        let bytes = csv_bytes(&["a", "b"], [["1", ""], ["x", "2"]]).unwrap();
        assert_eq!(String::from_utf8(bytes).unwrap(), "a,b\n1,\nx,2\n");
    }
}
