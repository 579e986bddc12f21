//! Renders SVG plots from a run directory's CSV files. Nothing is
//! recomputed: every plotted number is read back from a CSV cell.

use std::io;
use std::path::{Path, PathBuf};

use crate::commands::{CliError, IoContext};
use crate::output::write_atomic;
use crate::svg;

pub const ALPHA_PER_TASK: &str = "alpha_per_task.svg";
pub const UNFAIRNESS_OVER_STEPS: &str = "unfairness_over_steps.svg";
pub const ALPHA_VS_FITNESS: &str = "alpha_vs_fitness.svg";

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn read(path: &Path) -> Result<Self, CliError> {
        let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let header = reader.headers().map_err(|e| csv_err(path, e))?.iter().map(String::from).collect();
        let rows = reader
            .records()
            .map(|r| r.map(|r| r.iter().map(String::from).collect()))
            .collect::<Result<_, _>>()
            .map_err(|e| csv_err(path, e))?;
        Ok(Self { header, rows })
    }

    fn column(&self, name: &str, path: &Path) -> Result<usize, CliError> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Run(format!("{}: missing column {name}", path.display())))
    }

    fn floats(&self, name: &str, path: &Path) -> Result<Vec<Option<f64>>, CliError> {
        let c = self.column(name, path)?;
        self.rows
            .iter()
            .map(|r| {
                let cell = r[c].trim();
                if cell.is_empty() {
                    Ok(None)
                } else {
                    cell.parse()
                        .map(Some)
                        .map_err(|_| CliError::Run(format!("{}: bad number {cell:?} in {name}", path.display())))
                }
            })
            .collect()
    }
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => CliError::Io {
            context: format!("reading {}", path.display()),
            source,
        },
        other => CliError::Run(format!("{}: malformed CSV: {other:?}", path.display())),
    }
}

/// Writes every plot whose source CSV exists in `dir`; returns the file names.
pub fn render(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut written = Vec::new();
    let metrics = ["metrics.csv", "metrics_after.csv"]
        .iter()
        .map(|n| dir.join(n))
        .find(|p| p.exists());
    if let Some(path) = metrics {
        let t = Table::read(&path)?;
        let tc = t.column("task", &path)?;
        let labels: Vec<String> = t.rows.iter().map(|r| r[tc].clone()).collect();
        let alpha: Vec<f64> = t.floats("alpha", &path)?.into_iter().map(|v| v.unwrap_or(f64::NAN)).collect();
        let chart = svg::bar_chart("Acceptance rate per task", &labels, &alpha, "alpha_T");
        put(dir, ALPHA_PER_TASK, &chart, &mut written)?;

        let r_q = t.floats("r_q", &path)?;
        let mut pts = (Vec::new(), Vec::new(), Vec::new());
        for ((label, a), r) in labels.iter().zip(&alpha).zip(&r_q) {
            if let Some(r) = r {
                pts.0.push(label.clone());
                pts.1.push(1.0 - r);
                pts.2.push(*a);
            }
        }
        if !pts.0.is_empty() {
            let chart = svg::scatter("Acceptance vs drafter fitness", &pts.0, &pts.1, &pts.2, "1 - r_q", "alpha_T");
            put(dir, ALPHA_VS_FITNESS, &chart, &mut written)?;
        }
    }
    let trace = dir.join("unfairness_trace.csv");
    if trace.exists() {
        let t = Table::read(&trace)?;
        let steps: Vec<f64> = t.floats("step", &trace)?.into_iter().map(|v| v.unwrap_or(f64::NAN)).collect();
        let u: Vec<f64> = t.floats("u", &trace)?.into_iter().map(|v| v.unwrap_or(f64::NAN)).collect();
        let chart = svg::line_chart("Unfairness during training", &steps, &u, "step", "U");
        put(dir, UNFAIRNESS_OVER_STEPS, &chart, &mut written)?;
    }
    if written.is_empty() {
        return Err(CliError::Io {
            context: format!("{}: nothing to render", dir.display()),
            source: io::Error::new(
                io::ErrorKind::NotFound,
                "no metrics.csv, metrics_after.csv or unfairness_trace.csv",
            ),
        });
    }
    Ok(written)
}

fn put(dir: &Path, name: &str, body: &str, written: &mut Vec<PathBuf>) -> Result<(), CliError> {
    let path = dir.join(name);
    write_atomic(&path, body.as_bytes()).ctx(|| format!("writing {}", path.display()))?;
    written.push(PathBuf::from(name));
    Ok(())
}
