//! Subcommand implementations. Each writes its artifacts under the output
//! directory and returns their relative paths.

use std::io;
use std::path::{Path, PathBuf};

use serde::Serialize;
use specfair_core::engine::{speculative_step, TraceRecord};
use specfair_core::fairness::{
    estimate_representation, task_metrics_sampled, task_metrics_with_floor, unfairness, validate_disparity_condition,
    validate_fitness_bound, ChainReport, TaskMetrics, TokenRangeClassifier,
};
use specfair_core::mitigation::{data_balance_finetune, run_scdf, temperature_sweep};
use specfair_core::stats::variance;
use specfair_core::synthetic::{make_synthetic_family, random_family_spec, SyntheticFamily};
use specfair_core::{RngStreams, SpecConfig};
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig};
use crate::output::{
    write_atomic, write_balance, write_csv, write_metrics, write_sweep, write_unfairness_trace, CsvTrainLog,
    REPRESENTATION_HEADER, SIMULATE_HEADER,
};
use crate::report;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("invalid argument: {0}")]
    Usage(String),
    #[error("{0}")]
    Violation(String),
    #[error("experiment failed: {0}")]
    Run(String),
    #[error("{context}: {source}")]
    Io { context: String, source: io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Violation(_) | CliError::Run(_) => 1,
            CliError::Config(ConfigError::Read { .. }) | CliError::Io { .. } => 3,
            CliError::Config(_) | CliError::Usage(_) => 2,
        }
    }
}

pub(crate) trait IoContext<T> {
    fn ctx(self, context: impl FnOnce() -> String) -> Result<T, CliError>;
}

impl<T> IoContext<T> for io::Result<T> {
    fn ctx(self, context: impl FnOnce() -> String) -> Result<T, CliError> {
        self.map_err(|source| CliError::Io {
            context: context(),
            source,
        })
    }
}

fn run_err(e: impl ToString) -> CliError {
    CliError::Run(e.to_string())
}

/// Writes through [`write_atomic`]-style helpers and records the artifact.
struct Artifacts<'a> {
    dir: &'a Path,
    files: Vec<PathBuf>,
}

impl<'a> Artifacts<'a> {
    fn new(dir: &'a Path) -> Self {
        Self { dir, files: Vec::new() }
    }

    fn put(&mut self, name: &str, write: impl FnOnce(&Path) -> io::Result<()>) -> Result<(), CliError> {
        let path = self.dir.join(name);
        write(&path).ctx(|| format!("writing {}", path.display()))?;
        self.files.push(PathBuf::from(name));
        Ok(())
    }

    fn json(&mut self, name: &str, value: &impl Serialize) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).map_err(run_err)?;
        text.push('\n');
        self.put(name, |p| write_atomic(p, text.as_bytes()))
    }

    fn svgs(&mut self, emit: bool) -> Result<(), CliError> {
        if emit {
            for name in report::render(self.dir)? {
                self.files.push(name);
            }
        }
        Ok(())
    }
}

pub fn build_family(cfg: &ExperimentConfig) -> Result<SyntheticFamily, CliError> {
    make_synthetic_family(&cfg.family_spec(), cfg.seed).map_err(|e| {
        CliError::Config(ConfigError::Invalid {
            field: "family".into(),
            message: e.to_string(),
        })
    })
}

/// Exact metrics per task, or Monte Carlo above `max_exact_support`.
pub fn measure(
    cfg: &ExperimentConfig,
    fam: &SyntheticFamily,
    drafter: &specfair_core::TabularSoftmaxModel,
) -> Result<Vec<TaskMetrics>, CliError> {
    let streams = RngStreams::new(cfg.seed);
    fam.family
        .tasks()
        .iter()
        .enumerate()
        .map(|(i, task)| {
            if task.support_size() > cfg.max_exact_support {
                let mut rng = streams.stream("metrics-mc", i as u64, 0);
                task_metrics_sampled(&fam.verifier, drafter, task, &cfg.spec, cfg.monte_carlo_samples, &mut rng)
            } else {
                task_metrics_with_floor(&fam.verifier, drafter, task, &cfg.spec, cfg.epsilon_floor)
            }
            .map_err(run_err)
        })
        .collect()
}

#[derive(Debug, Serialize)]
struct MetricsSummary {
    unfairness: f64,
    star_task: String,
    alpha_variance: f64,
    jensen_slack: Vec<(String, f64)>,
}

fn summarize(metrics: &[TaskMetrics]) -> Result<MetricsSummary, CliError> {
    let d: Vec<f64> = metrics.iter().map(|m| m.ce).collect();
    let star = specfair_core::fairness::star_index(&d).map_err(run_err)?;
    Ok(MetricsSummary {
        unfairness: unfairness(&d).map_err(run_err)?,
        star_task: metrics[star].task.clone(),
        alpha_variance: variance(&metrics.iter().map(|m| m.alpha).collect::<Vec<_>>()),
        jensen_slack: metrics.iter().map(|m| (m.task.clone(), m.jensen_slack())).collect(),
    })
}

pub fn metrics(cfg: &ExperimentConfig, out: &Path) -> Result<(Vec<PathBuf>, f64), CliError> {
    let fam = build_family(cfg)?;
    let m = measure(cfg, &fam, &fam.drafter)?;
    let summary = summarize(&m)?;
    let mut art = Artifacts::new(out);
    art.put("metrics.csv", |p| write_metrics(p, &m))?;
    art.json("metrics_summary.json", &summary)?;
    art.svgs(cfg.outputs.emit_svg)?;
    Ok((art.files, summary.unfairness))
}

#[derive(Serialize)]
struct TraceLine<'a> {
    task: &'a str,
    #[serde(flatten)]
    record: TraceRecord,
}

pub fn simulate(cfg: &ExperimentConfig, out: &Path, steps: usize) -> Result<Vec<PathBuf>, CliError> {
    if steps == 0 {
        return Err(CliError::Usage("--steps must be >= 1".into()));
    }
    let fam = build_family(cfg)?;
    let exact = measure(cfg, &fam, &fam.drafter)?;
    let streams = RngStreams::new(cfg.seed);
    let mut traces = String::new();
    let mut rows = Vec::new();
    for (ti, task) in fam.family.tasks().iter().enumerate() {
        let mut rng = streams.stream("simulate", ti as u64, 0);
        let (mut first, mut accepted, mut emitted) = (0usize, 0usize, 0usize);
        for step in 0..steps {
            let context = task.sample_prefix(&mut rng).clone();
            let trace = speculative_step(&fam.verifier, &fam.drafter, context.tokens(), &cfg.spec, &mut rng)
                .map_err(run_err)?;
            first += usize::from(trace.accepted_prefix_len >= 1);
            accepted += trace.accepted_prefix_len;
            emitted += trace.emitted.len();
            let line = TraceLine {
                task: task.id(),
                record: TraceRecord::new(step as u64, context.tokens(), &trace),
            };
            traces.push_str(&serde_json::to_string(&line).map_err(run_err)?);
            traces.push('\n');
        }
        let n = steps as f64;
        rows.push([
            task.id().to_string(),
            steps.to_string(),
            fmt(first as f64 / n),
            fmt(accepted as f64 / n),
            fmt(emitted as f64 / n),
            fmt(exact[ti].alpha),
        ]);
    }
    let mut art = Artifacts::new(out);
    art.put("traces.jsonl", |p| write_atomic(p, traces.as_bytes()))?;
    art.put("simulate.csv", |p| write_csv(p, &SIMULATE_HEADER, rows))?;
    Ok(art.files)
}

fn fmt(x: f64) -> String {
    specfair_core::fairness::fmt_float(x)
}

#[derive(Debug, Default, Serialize)]
pub struct VerifyReport {
    pub families: usize,
    pub chain_checks: usize,
    pub chain_violations: Vec<String>,
    pub worst_chain_margin: f64,
    pub fitness_checks: usize,
    pub fitness_skipped: usize,
    pub fitness_violations: Vec<String>,
    pub disparity_pairs: usize,
    pub disparity_violations: Vec<String>,
}

impl VerifyReport {
    pub fn violations(&self) -> usize {
        self.chain_violations.len() + self.fitness_violations.len() + self.disparity_violations.len()
    }

    fn check(&mut self, label: &str, fam: &SyntheticFamily) -> Result<(), CliError> {
        self.families += 1;
        for gamma in [1usize, 2, 4, 8] {
            for c in [0.0, 0.1, 0.5] {
                let spec = SpecConfig::new(gamma, c).map_err(run_err)?;
                let metrics = specfair_core::fairness::family_metrics(&fam.verifier, &fam.drafter, &fam.family, &spec)
                    .map_err(run_err)?;
                for m in &metrics {
                    let r = ChainReport::from_metrics(m, &spec);
                    self.chain_checks += 1;
                    self.worst_chain_margin = self.worst_chain_margin.min(r.worst_margin());
                    if !r.holds() {
                        self.chain_violations
                            .push(format!("{label}/{} gamma={gamma} c={c}: margins {:?}", m.task, r.margins));
                    }
                }
                if gamma == 1 && c == 0.0 {
                    let fit = validate_fitness_bound(&metrics);
                    self.fitness_checks += fit.checked.len();
                    self.fitness_skipped += fit.skipped.len();
                    for v in fit.violations() {
                        self.fitness_violations
                            .push(format!("{label}/{}: margin {:.3e}", v.task, v.margin));
                    }
                }
                for (i, mi) in metrics.iter().enumerate() {
                    for (j, mj) in metrics.iter().enumerate() {
                        if i == j {
                            continue;
                        }
                        let d = validate_disparity_condition(mi, mj, &spec);
                        if d.condition {
                            self.disparity_pairs += 1;
                            if !d.holds() {
                                self.disparity_violations.push(format!(
                                    "{label}/{}>{} gamma={gamma} c={c}: alpha gap {:.3e}, speedup gap {:.3e} < {:.3e}",
                                    mi.task, mj.task, d.alpha_gap, d.speedup_gap, d.required_speedup_gap
                                ));
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Runs every bound validator on the configured family and on `trials`
/// random families.
pub fn verify_theorems(cfg: &ExperimentConfig, trials: usize) -> Result<VerifyReport, CliError> {
    let mut report = VerifyReport {
        worst_chain_margin: f64::MAX,
        ..VerifyReport::default()
    };
    report.check("config", &build_family(cfg)?)?;
    let streams = RngStreams::new(cfg.seed).child("verify", 0);
    for t in 0..trials {
        let mut rng = streams.stream("family-spec", t as u64, 0);
        let spec = random_family_spec(&mut rng, false);
        let fam = make_synthetic_family(&spec, streams.child("family", t as u64).seed()).map_err(run_err)?;
        report.check(&format!("trial{t}"), &fam)?;
    }
    Ok(report)
}

pub fn train_scdf(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let fam = build_family(cfg)?;
    let mut art = Artifacts::new(out);
    let before = measure(cfg, &fam, &fam.drafter)?;
    art.put("metrics_before.csv", |p| write_metrics(p, &before))?;

    let log_path = out.join("train_log.csv");
    let mut sink = CsvTrainLog::create(&log_path).ctx(|| format!("creating {}", log_path.display()))?;
    let outcome = run_scdf(&fam.verifier, &fam.drafter, &fam.family, &cfg.spec, &cfg.trainer, &mut sink)
        .map_err(run_err)?;
    drop(sink);
    art.files.push(PathBuf::from("train_log.csv"));

    let after = measure(cfg, &fam, &outcome.drafter)?;
    art.put("metrics_after.csv", |p| write_metrics(p, &after))?;
    let ids: Vec<String> = fam.family.tasks().iter().map(|t| t.id().to_string()).collect();
    let d0 = outcome.initial.iter().map(|m| m.ce).fold(f64::INFINITY, f64::min);
    art.put("unfairness_trace.csv", |p| {
        write_unfairness_trace(
            p,
            (outcome.initial_u, outcome.initial_alpha_variance, d0),
            &outcome.history,
            &ids,
        )
    })?;
    let model = outcome.drafter.to_json();
    art.put("drafter_final.json", |p| write_atomic(p, model.as_bytes()))?;
    art.json(
        "train_summary.json",
        &serde_json::json!({
            "steps_run": outcome.history.len(),
            "converged": outcome.converged,
            "initial_u": outcome.initial_u,
            "final_u": outcome.final_u(),
            "initial_alpha_variance": outcome.initial_alpha_variance,
            "final_alpha_variance": outcome.history.last().map_or(outcome.initial_alpha_variance, |r| r.alpha_variance),
            "star_counts": ids.iter().cloned().zip(outcome.star_counts(ids.len())).collect::<Vec<_>>(),
            "verifier_hash": fam.verifier.parameter_hash(),
            "drafter_hash": outcome.drafter.parameter_hash(),
        }),
    )?;
    art.svgs(cfg.outputs.emit_svg)?;
    Ok(art.files)
}

/// Reads `task,quality` rows.
pub fn read_quality(path: &Path, task_ids: &[String]) -> Result<Vec<f64>, CliError> {
    let bad = |m: String| CliError::Usage(format!("{}: {m}", path.display()));
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(source) => CliError::Io {
            context: format!("reading {}", path.display()),
            source,
        },
        other => bad(format!("{other:?}")),
    })?;
    let headers = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["task", "quality"] {
        return Err(bad("header must be exactly task,quality".into()));
    }
    let mut found = vec![None; task_ids.len()];
    for rec in reader.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let i = task_ids
            .iter()
            .position(|id| id == &rec[0])
            .ok_or_else(|| bad(format!("unknown task {:?}", &rec[0])))?;
        let beta: f64 = rec[1].trim().parse().map_err(|_| bad(format!("bad quality {:?}", &rec[1])))?;
        found[i] = Some(beta);
    }
    found
        .into_iter()
        .zip(task_ids)
        .map(|(v, id)| v.ok_or_else(|| bad(format!("missing task {id:?}"))))
        .collect()
}

pub fn sweep_temperature(
    cfg: &ExperimentConfig,
    out: &Path,
    temps: &[f64],
    quality: Option<&Path>,
) -> Result<Vec<PathBuf>, CliError> {
    if temps.is_empty() || temps.iter().any(|t| t.is_nan() || *t < 0.0) {
        return Err(CliError::Usage("--temps must be a non-empty list of values >= 0".into()));
    }
    let fam = build_family(cfg)?;
    let ids: Vec<String> = fam.family.tasks().iter().map(|t| t.id().to_string()).collect();
    let betas = quality.map(|p| read_quality(p, &ids)).transpose()?;
    let rows = temperature_sweep(&fam.verifier, &fam.drafter, &fam.family, temps, betas.as_deref(), &cfg.spec)
        .map_err(run_err)?;
    let mut art = Artifacts::new(out);
    art.put("sweep.csv", |p| write_sweep(p, &rows))?;
    Ok(art.files)
}

pub fn balance_data(
    cfg: &ExperimentConfig,
    out: &Path,
    grid: &[f64],
    tasks: Option<(&str, &str)>,
) -> Result<Vec<PathBuf>, CliError> {
    if grid.is_empty() || grid.iter().any(|m| !(0.0..=1.0).contains(m)) {
        return Err(CliError::Usage("--grid must be a non-empty list of values in [0, 1]".into()));
    }
    let fam = build_family(cfg)?;
    let all = fam.family.tasks();
    let pick = |id: &str| {
        fam.family
            .get(id)
            .ok_or_else(|| CliError::Usage(format!("unknown task {id:?}")))
    };
    let (a, b) = match tasks {
        Some((a, b)) => (pick(a)?, pick(b)?),
        None => (&all[0], &all[1]),
    };
    let rows = data_balance_finetune(&fam.verifier, &fam.drafter, a, b, grid, &cfg.trainer, &cfg.spec)
        .map_err(run_err)?;
    let mut art = Artifacts::new(out);
    art.put("balance.csv", |p| write_balance(p, &rows))?;
    Ok(art.files)
}

pub fn estimate_representation_cmd(
    cfg: &ExperimentConfig,
    out: &Path,
    k: usize,
    gen_len: usize,
) -> Result<Vec<PathBuf>, CliError> {
    if k == 0 {
        return Err(CliError::Usage("--k must be >= 1".into()));
    }
    let fam = build_family(cfg)?;
    let classifier = TokenRangeClassifier::new(fam.blocks.clone());
    let mut rng = RngStreams::new(cfg.seed).stream("representation", 0, 0);
    let est = estimate_representation(&fam.drafter, &classifier, k, gen_len, &mut rng).map_err(run_err)?;
    let rows = est.ranked.iter().enumerate().map(|(i, (id, p))| {
        let count = est.counts.iter().find(|(c, _)| c == id).map_or(0, |(_, n)| *n);
        [(i + 1).to_string(), id.clone(), fmt(*p), count.to_string()]
    });
    let rows: Vec<_> = rows.collect();
    let mut art = Artifacts::new(out);
    art.put("representation.csv", |p| write_csv(p, &REPRESENTATION_HEADER, rows))?;
    art.json(
        "representation_summary.json",
        &serde_json::json!({ "k": est.k, "rejected": est.rejected, "gen_len": gen_len }),
    )?;
    Ok(art.files)
}
