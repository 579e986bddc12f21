//! Fairness-weighted drafter fine-tuning and two baselines.
//!
//! The trainer only ever touches drafter logits. Each step samples tasks,
//! estimates every sampled task's cross-entropy and its logit gradient from a
//! mini-batch of prefixes, picks the task with the smallest estimate as the
//! star, and descends along `−(1/m) Σ_T (D̂_T − D̂_min) ∇D̂_T` with `D̂_min`
//! frozen for the step.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dist::{cross_entropy, temperature_scale, total_variation, Categorical, DistError};
use crate::engine::SpecConfig;
use crate::fairness::{family_metrics, star_index, task_metrics, unfairness, FairnessError, TaskMetrics};
use crate::model::{ConditionalModel, Context, LogitGradient, ModelError, TabularSoftmaxModel, Token};
use crate::rng::RngStreams;
use crate::stats::variance;
use crate::task::{Task, TaskFamily};

/// Exact column order of the training log.
pub const TRAIN_LOG_HEADER: [&str; 8] = [
    "timestamp",
    "step",
    "star_task",
    "task",
    "d_hat",
    "acceptance",
    "tv_q",
    "tv_p",
];

/// Column order of the temperature sweep table.
pub const SWEEP_HEADER: [&str; 4] = ["task", "temp", "alpha", "quality_adjusted"];

/// Abort once exact `U` exceeds this multiple of its initial value.
pub const DIVERGENCE_FACTOR: f64 = 10.0;

#[derive(Debug, Error)]
pub enum MitigationError {
    #[error("invalid trainer config: {0}")]
    Config(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("need at least 2 tasks per step, got {0}")]
    TooFewTasks(usize),
    #[error("training diverged at step {step}: U = {u} exceeds {factor} x initial U = {u0}")]
    Diverged { step: usize, u: f64, u0: f64, factor: f64 },
    #[error("verifier parameters changed during training ({before} -> {after})")]
    VerifierMutated { before: String, after: String },
    #[error("mix proportion {0} outside [0, 1]")]
    InvalidMix(f64),
    #[error("temperature {0} is negative or NaN")]
    InvalidTemperature(f64),
    #[error("quality vector has {got} entries for {expected} tasks")]
    QualityLength { got: usize, expected: usize },
    #[error("log sink failed: {0}")]
    Sink(String),
    #[error(transparent)]
    Fairness(#[from] FairnessError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dist(#[from] DistError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Optimizer {
    #[default]
    Sgd,
    Momentum {
        #[serde(default = "default_momentum")]
        momentum: f64,
    },
    AdaptiveMoment {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
}

fn default_momentum() -> f64 {
    0.9
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub steps: usize,
    pub batch_per_task: usize,
    pub step_size: f64,
    pub optimizer: Optimizer,
    /// Maximum gradient norm; 0 disables clipping.
    pub grad_clip: f64,
    /// Tasks sampled per step; `None` uses every task.
    pub tasks_per_step: Option<usize>,
    /// Stop once `|U_t − U_{t−window}| < convergence_tol`; 0 disables.
    pub convergence_tol: f64,
    pub convergence_window: usize,
    pub seed: u64,
    /// Use each task's full weighted prefix support instead of sampled batches.
    pub full_support_batches: bool,
    /// Sample the next token from the verifier instead of taking the exact
    /// expectation over it.
    pub sample_next_token: bool,
    /// Draft width of the logged acceptance proxy.
    pub proxy_gamma: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_per_task: 8,
            step_size: 0.1,
            optimizer: Optimizer::Sgd,
            grad_clip: 0.0,
            tasks_per_step: None,
            convergence_tol: 0.0,
            convergence_window: 50,
            seed: 0,
            full_support_batches: false,
            sample_next_token: false,
            proxy_gamma: 5,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), MitigationError> {
        let bad = |m: &str| Err(MitigationError::Config(m.to_string()));
        if self.steps == 0 {
            return bad("steps must be >= 1");
        }
        if self.batch_per_task == 0 {
            return bad("batch_per_task must be >= 1");
        }
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return bad("step_size must be > 0");
        }
        if !(self.grad_clip.is_finite() && self.grad_clip >= 0.0) {
            return bad("grad_clip must be >= 0");
        }
        if !(self.convergence_tol.is_finite() && self.convergence_tol >= 0.0) {
            return bad("convergence_tol must be >= 0");
        }
        if self.convergence_window == 0 {
            return bad("convergence_window must be >= 1");
        }
        if self.tasks_per_step.is_some_and(|k| k < 2) {
            return bad("tasks_per_step must be >= 2");
        }
        if self.proxy_gamma == 0 {
            return bad("proxy_gamma must be >= 1");
        }
        match self.optimizer {
            Optimizer::Sgd => {}
            Optimizer::Momentum { momentum } => {
                if !(0.0..1.0).contains(&momentum) {
                    return bad("momentum must lie in [0, 1)");
                }
            }
            Optimizer::AdaptiveMoment { beta1, beta2, eps } => {
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps.is_nan() || eps <= 0.0 {
                    return bad("adaptive moment needs beta1, beta2 in [0, 1) and eps > 0");
                }
            }
        }
        Ok(())
    }
}

/// A weighted set of prefixes drawn from one task.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub contexts: Vec<Context>,
    pub weights: Vec<f64>,
}

impl Batch {
    /// Equal weights.
    pub fn uniform(contexts: Vec<Context>) -> Self {
        let w = 1.0 / contexts.len().max(1) as f64;
        let weights = vec![w; contexts.len()];
        Self { contexts, weights }
    }

    /// The task's whole support at its own weights.
    pub fn full_support(task: &Task) -> Self {
        let (contexts, weights) = task.prefixes().iter().cloned().unzip();
        Self { contexts, weights }
    }

    pub fn sampled<R: Rng + ?Sized>(task: &Task, n: usize, rng: &mut R) -> Self {
        Self::uniform(task.sample_batch(n, rng))
    }

    pub fn len(&self) -> usize {
        self.contexts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contexts.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskEstimate {
    pub d_hat: f64,
    pub gradient: LogitGradient,
}

/// Batch estimate of `D_T` and of its gradient in the drafter logits, with
/// the next token integrated out exactly.
pub fn estimate_task_ce(
    q_model: &TabularSoftmaxModel,
    p_model: &impl ConditionalModel,
    batch: &Batch,
) -> Result<TaskEstimate, MitigationError> {
    if batch.is_empty() {
        return Err(MitigationError::EmptyBatch);
    }
    let mut d_hat = 0.0;
    let mut gradient = LogitGradient::new();
    for (context, &w) in batch.contexts.iter().zip(&batch.weights) {
        let p = p_model.predict(context.tokens());
        d_hat += w * cross_entropy(&p, &q_model.predict(context.tokens()))?;
        let row = q_model.ce_gradient(context.tokens(), &p)?;
        gradient.add_row(q_model.key(context.tokens()), &row, w);
    }
    Ok(TaskEstimate { d_hat, gradient })
}

/// Like [`estimate_task_ce`] but with one verifier token sampled per prefix,
/// so the estimate is `−ln q(x|s)` and the gradient row is `q − e_x`.
pub fn estimate_task_ce_sampled<R: Rng + ?Sized>(
    q_model: &TabularSoftmaxModel,
    p_model: &impl ConditionalModel,
    batch: &Batch,
    rng: &mut R,
) -> Result<TaskEstimate, MitigationError> {
    if batch.is_empty() {
        return Err(MitigationError::EmptyBatch);
    }
    let mut d_hat = 0.0;
    let mut gradient = LogitGradient::new();
    for (context, &w) in batch.contexts.iter().zip(&batch.weights) {
        let x = p_model.predict(context.tokens()).sample(rng);
        let q = q_model.predict(context.tokens());
        d_hat -= w * q.prob(x).max(crate::dist::EPSILON_FLOOR).ln();
        let target = Categorical::one_hot(q.len(), x)?;
        let row = q_model.ce_gradient(context.tokens(), &target)?;
        gradient.add_row(q_model.key(context.tokens()), &row, w);
    }
    Ok(TaskEstimate { d_hat, gradient })
}

/// Update direction and the per-task coefficient applied to each gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Direction {
    pub delta: LogitGradient,
    pub star: usize,
    /// `(D̂_T − D̂_min) / m`; the star's entry is exactly zero.
    pub weights: Vec<f64>,
}

/// `Δθ = −(1/m) Σ_T (D̂_T − D̂_min) ∇D̂_T`.
pub fn fairness_weighted_direction(
    d_hats: &[f64],
    gradients: &[LogitGradient],
) -> Result<Direction, MitigationError> {
    if d_hats.len() < 2 {
        return Err(MitigationError::TooFewTasks(d_hats.len()));
    }
    assert_eq!(d_hats.len(), gradients.len(), "one gradient per task");
    let star = star_index(d_hats)?;
    let d_min = d_hats[star];
    let m = d_hats.len() as f64;
    let weights: Vec<f64> = d_hats.iter().map(|d| (d - d_min) / m).collect();
    let mut delta = LogitGradient::new();
    for (g, &w) in gradients.iter().zip(&weights) {
        if w != 0.0 {
            delta.add_scaled(g, -w);
        }
    }
    Ok(Direction { delta, star, weights })
}

/// First-order optimizer state over the sparse logit table.
#[derive(Debug, Clone)]
struct OptimizerState {
    kind: Optimizer,
    first: LogitGradient,
    second: LogitGradient,
    t: i32,
}

impl OptimizerState {
    fn new(kind: Optimizer) -> Self {
        Self {
            kind,
            first: LogitGradient::new(),
            second: LogitGradient::new(),
            t: 0,
        }
    }

    /// Applies one step along descent direction `delta` (already negated).
    fn step(&mut self, model: &mut TabularSoftmaxModel, delta: &LogitGradient, step_size: f64) {
        self.t += 1;
        match self.kind {
            Optimizer::Sgd => model.apply(delta, step_size),
            Optimizer::Momentum { momentum } => {
                self.first.scale(momentum);
                self.first.add_scaled(delta, 1.0);
                model.apply(&self.first, step_size);
            }
            Optimizer::AdaptiveMoment { beta1, beta2, eps } => {
                self.first.scale(beta1);
                self.first.add_scaled(delta, 1.0 - beta1);
                self.second.scale(beta2);
                for (key, row) in delta.rows() {
                    let sq: Vec<f64> = row.iter().map(|x| x * x).collect();
                    self.second.add_row(key.clone(), &sq, 1.0 - beta2);
                }
                let c1 = 1.0 - beta1.powi(self.t);
                let c2 = 1.0 - beta2.powi(self.t);
                let mut update = LogitGradient::new();
                for (key, m) in self.first.rows() {
                    let v = self.second.row(key).expect("second moment tracks first");
                    let row: Vec<f64> = m
                        .iter()
                        .zip(v)
                        .map(|(m, v)| (m / c1) / ((v / c2).sqrt() + eps))
                        .collect();
                    update.add_row(key.clone(), &row, 1.0);
                }
                model.apply(&update, step_size);
            }
        }
    }
}

fn clip(delta: &mut LogitGradient, max_norm: f64) {
    if max_norm > 0.0 {
        let n = delta.norm();
        if n > max_norm {
            delta.scale(max_norm / n);
        }
    }
}

/// Mean contiguous accepted-draft fraction over `n_prefixes` sampled prefixes.
///
/// At each prefix the drafter proposes `gamma` tokens greedily; token `k` is
/// kept while `min(1, p/q)` exceeds a uniform draw.
pub fn acceptance_proxy<R: Rng + ?Sized>(
    p_model: &impl ConditionalModel,
    q_model: &impl ConditionalModel,
    task: &Task,
    gamma: usize,
    n_prefixes: usize,
    rng: &mut R,
) -> f64 {
    let n = n_prefixes.max(1);
    let gamma = gamma.max(1);
    let mut total = 0.0;
    let mut prefix: Vec<Token> = Vec::new();
    for _ in 0..n {
        prefix.clear();
        prefix.extend_from_slice(task.sample_prefix(rng).tokens());
        let mut accepted = 0;
        for _ in 0..gamma {
            let q = q_model.predict(&prefix);
            let x = q.argmax();
            let ratio = (p_model.predict(&prefix).prob(x) / q.prob(x)).min(1.0);
            if ratio > rng.gen::<f64>() {
                accepted += 1;
                prefix.push(x);
            } else {
                break;
            }
        }
        total += accepted as f64 / gamma as f64;
    }
    total / n as f64
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub timestamp: String,
    pub step: usize,
    pub star_task: String,
    pub task: String,
    pub d_hat: f64,
    pub acceptance: f64,
    /// Batch mean of `TV(u, q)`; absent without a posterior.
    pub tv_q: Option<f64>,
    pub tv_p: Option<f64>,
}

/// Receives each step's log rows as soon as the step completes.
pub trait TrainLogSink {
    /// Timestamp stamped onto the rows of the current step.
    fn timestamp(&self) -> String {
        String::new()
    }

    fn write_step(&mut self, rows: &[TrainLogRow]) -> Result<(), String>;
}

/// Keeps every row in memory.
#[derive(Debug, Default)]
pub struct MemorySink {
    pub rows: Vec<TrainLogRow>,
}

impl TrainLogSink for MemorySink {
    fn write_step(&mut self, rows: &[TrainLogRow]) -> Result<(), String> {
        self.rows.extend_from_slice(rows);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Family indices of the tasks sampled this step.
    pub sampled: Vec<usize>,
    /// Family index of the star task.
    pub star: usize,
    pub d_hats: Vec<f64>,
    /// Coefficients applied to each sampled task's gradient.
    pub weights: Vec<f64>,
    pub direction_norm: f64,
    /// Exact `U` after the update.
    pub exact_u: f64,
    /// Variance of exact `{α_T}` after the update.
    pub alpha_variance: f64,
    /// Exact `D_min` after the update.
    pub d_min: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub drafter: TabularSoftmaxModel,
    pub history: Vec<StepRecord>,
    pub initial: Vec<TaskMetrics>,
    pub final_metrics: Vec<TaskMetrics>,
    pub initial_u: f64,
    pub initial_alpha_variance: f64,
    pub converged: bool,
}

impl TrainOutcome {
    pub fn final_u(&self) -> f64 {
        self.history.last().map_or(self.initial_u, |r| r.exact_u)
    }

    /// How often each family task was the star.
    pub fn star_counts(&self, m: usize) -> Vec<usize> {
        let mut counts = vec![0; m];
        for r in &self.history {
            counts[r.star] += 1;
        }
        counts
    }
}

fn ce_values(metrics: &[TaskMetrics]) -> Vec<f64> {
    metrics.iter().map(|m| m.ce).collect()
}

fn alpha_values(metrics: &[TaskMetrics]) -> Vec<f64> {
    metrics.iter().map(|m| m.alpha).collect()
}

fn mean_tv(model: &impl ConditionalModel, task: &Task, batch: &Batch) -> Result<Option<f64>, MitigationError> {
    let Some(u_model) = task.posterior() else {
        return Ok(None);
    };
    let mut total = 0.0;
    for (context, &w) in batch.contexts.iter().zip(&batch.weights) {
        total += w * total_variation(&u_model.predict(context.tokens()), &model.predict(context.tokens()))?;
    }
    Ok(Some(total))
}

/// Runs fairness-weighted fine-tuning of a copy of `q_model` against the
/// frozen verifier.
pub fn run_scdf(
    p_model: &TabularSoftmaxModel,
    q_model: &TabularSoftmaxModel,
    family: &TaskFamily,
    spec: &SpecConfig,
    cfg: &TrainerConfig,
    sink: &mut dyn TrainLogSink,
) -> Result<TrainOutcome, MitigationError> {
    cfg.validate()?;
    let m = family.len();
    let per_step = cfg.tasks_per_step.unwrap_or(m).min(m);
    let verifier_hash = p_model.parameter_hash();
    let streams = RngStreams::new(cfg.seed);
    let mut drafter = q_model.clone();
    let mut optimizer = OptimizerState::new(cfg.optimizer);

    let initial = family_metrics(p_model, &drafter, family, spec)?;
    let initial_u = unfairness(&ce_values(&initial))?;
    let initial_alpha_variance = variance(&alpha_values(&initial));
    let abort_at = DIVERGENCE_FACTOR * initial_u.max(1e-12);

    let mut history: Vec<StepRecord> = Vec::with_capacity(cfg.steps);
    let mut u_trace = vec![initial_u];
    let mut converged = false;
    let mut final_metrics = initial.clone();

    for step in 0..cfg.steps {
        let mut task_rng = streams.stream("scdf-tasks", 0, step as u64);
        let mut sampled: Vec<usize> = if per_step == m {
            (0..m).collect()
        } else {
            sample_indices(&mut task_rng, m, per_step).into_vec()
        };
        sampled.sort_unstable();

        let mut d_hats = Vec::with_capacity(sampled.len());
        let mut gradients = Vec::with_capacity(sampled.len());
        let mut batches = Vec::with_capacity(sampled.len());
        for &ti in &sampled {
            let task = &family.tasks()[ti];
            let mut rng = streams.stream("scdf-batch", ti as u64, step as u64);
            let batch = if cfg.full_support_batches {
                Batch::full_support(task)
            } else {
                Batch::sampled(task, cfg.batch_per_task, &mut rng)
            };
            let est = if cfg.sample_next_token {
                estimate_task_ce_sampled(&drafter, p_model, &batch, &mut rng)?
            } else {
                estimate_task_ce(&drafter, p_model, &batch)?
            };
            d_hats.push(est.d_hat);
            gradients.push(est.gradient);
            batches.push(batch);
        }

        let dir = fairness_weighted_direction(&d_hats, &gradients)?;
        debug_assert_eq!(dir.weights[dir.star], 0.0);
        let star = sampled[dir.star];
        let star_id = family.tasks()[star].id().to_string();

        let timestamp = sink.timestamp();
        let mut rows = Vec::with_capacity(sampled.len());
        for (k, &ti) in sampled.iter().enumerate() {
            let task = &family.tasks()[ti];
            let mut rng = streams.stream("scdf-proxy", ti as u64, step as u64);
            let acceptance = acceptance_proxy(p_model, &drafter, task, cfg.proxy_gamma, cfg.batch_per_task, &mut rng);
            rows.push(TrainLogRow {
                timestamp: timestamp.clone(),
                step,
                star_task: star_id.clone(),
                task: task.id().to_string(),
                d_hat: d_hats[k],
                acceptance,
                tv_q: mean_tv(&drafter, task, &batches[k])?,
                tv_p: mean_tv(p_model, task, &batches[k])?,
            });
        }

        let mut delta = dir.delta;
        clip(&mut delta, cfg.grad_clip);
        let direction_norm = delta.norm();
        optimizer.step(&mut drafter, &delta, cfg.step_size);

        final_metrics = family_metrics(p_model, &drafter, family, spec)?;
        let ce = ce_values(&final_metrics);
        let exact_u = unfairness(&ce)?;
        history.push(StepRecord {
            step,
            sampled,
            star,
            d_hats,
            weights: dir.weights,
            direction_norm,
            exact_u,
            alpha_variance: variance(&alpha_values(&final_metrics)),
            d_min: ce.iter().copied().fold(f64::INFINITY, f64::min),
        });
        sink.write_step(&rows).map_err(MitigationError::Sink)?;

        if exact_u > abort_at {
            return Err(MitigationError::Diverged {
                step,
                u: exact_u,
                u0: initial_u,
                factor: DIVERGENCE_FACTOR,
            });
        }
        u_trace.push(exact_u);
        let w = cfg.convergence_window;
        if cfg.convergence_tol > 0.0 && u_trace.len() > w {
            let n = u_trace.len();
            if (u_trace[n - 1] - u_trace[n - 1 - w]).abs() < cfg.convergence_tol {
                converged = true;
                break;
            }
        }
    }

    let after = p_model.parameter_hash();
    if after != verifier_hash {
        return Err(MitigationError::VerifierMutated {
            before: verifier_hash,
            after,
        });
    }
    Ok(TrainOutcome {
        drafter,
        history,
        initial,
        final_metrics,
        initial_u,
        initial_alpha_variance,
        converged,
    })
}

/// A model whose every prediction is temperature-scaled.
#[derive(Debug, Clone, Copy)]
pub struct TemperatureScaled<M> {
    pub inner: M,
    pub temperature: f64,
}

impl<M: ConditionalModel> ConditionalModel for TemperatureScaled<M> {
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    fn predict(&self, context: &[Token]) -> Categorical {
        temperature_scale(&self.inner.predict(context), self.temperature)
            .expect("temperature validated on construction")
    }
}

impl<M> TemperatureScaled<M> {
    pub fn new(inner: M, temperature: f64) -> Result<Self, MitigationError> {
        if temperature.is_nan() || temperature < 0.0 {
            return Err(MitigationError::InvalidTemperature(temperature));
        }
        Ok(Self { inner, temperature })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub task: String,
    pub temp: f64,
    pub alpha: f64,
    /// `α · β` when a quality scalar was supplied.
    pub quality_adjusted: Option<f64>,
}

/// Exact `α_T` for every task with verifier and drafter scaled to the same
/// temperature.
pub fn temperature_sweep(
    p_model: &impl ConditionalModel,
    q_model: &impl ConditionalModel,
    family: &TaskFamily,
    temps: &[f64],
    quality: Option<&[f64]>,
    spec: &SpecConfig,
) -> Result<Vec<SweepRow>, MitigationError> {
    if let Some(q) = quality {
        if q.len() != family.len() {
            return Err(MitigationError::QualityLength {
                got: q.len(),
                expected: family.len(),
            });
        }
    }
    let mut rows = Vec::with_capacity(temps.len() * family.len());
    for (ti, task) in family.tasks().iter().enumerate() {
        for &t in temps {
            let p = TemperatureScaled::new(p_model, t)?;
            let q = TemperatureScaled::new(q_model, t)?;
            let alpha = task_metrics(&p, &q, task, spec)?.alpha;
            rows.push(SweepRow {
                task: task.id().to_string(),
                temp: t,
                alpha,
                quality_adjusted: quality.map(|b| alpha * b[ti]),
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixResult {
    pub mix: f64,
    pub d_a: f64,
    pub d_b: f64,
    pub alpha_a: f64,
    pub alpha_b: f64,
    pub u: f64,
}

/// Fine-tunes a fresh copy of the drafter on plain cross-entropy for every
/// mixing proportion and reports the resulting per-task metrics.
///
/// Each step draws `2 · batch_per_task` prefixes, `round(mix · n)` of them
/// from `task_b` and the rest from `task_a`.
pub fn data_balance_finetune(
    p_model: &TabularSoftmaxModel,
    q_model: &TabularSoftmaxModel,
    task_a: &Task,
    task_b: &Task,
    mix_grid: &[f64],
    cfg: &TrainerConfig,
    spec: &SpecConfig,
) -> Result<Vec<MixResult>, MitigationError> {
    cfg.validate()?;
    let streams = RngStreams::new(cfg.seed);
    let total = 2 * cfg.batch_per_task;
    let mut out = Vec::with_capacity(mix_grid.len());
    for (gi, &mix) in mix_grid.iter().enumerate() {
        if !(0.0..=1.0).contains(&mix) {
            return Err(MitigationError::InvalidMix(mix));
        }
        let n_b = (mix * total as f64).round() as usize;
        let n_a = total - n_b;
        let mut drafter = q_model.clone();
        let mut optimizer = OptimizerState::new(cfg.optimizer);
        for step in 0..cfg.steps {
            let mut rng = streams.stream("balance", gi as u64, step as u64);
            let mut contexts = task_a.sample_batch(n_a, &mut rng);
            contexts.extend(task_b.sample_batch(n_b, &mut rng));
            let est = estimate_task_ce(&drafter, p_model, &Batch::uniform(contexts))?;
            let mut delta = est.gradient;
            delta.scale(-1.0);
            clip(&mut delta, cfg.grad_clip);
            optimizer.step(&mut drafter, &delta, cfg.step_size);
        }
        let ma = task_metrics(p_model, &drafter, task_a, spec)?;
        let mb = task_metrics(p_model, &drafter, task_b, spec)?;
        out.push(MixResult {
            mix,
            d_a: ma.ce,
            d_b: mb.ce,
            alpha_a: ma.alpha,
            alpha_b: mb.alpha,
            u: unfairness(&[ma.ce, mb.ce])?,
        });
    }
    Ok(out)
}
