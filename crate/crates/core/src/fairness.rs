//! Task-level aggregation of acceptance, divergence and speed-up, the
//! unfairness metric `U`, the certified speed-up envelope, and numeric
//! validators for the bounds that tie them together.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dist::{
    acceptance_overlap, cross_entropy_with_floor, kl_divergence_with_floor, total_variation, DistError,
    EPSILON_FLOOR,
};
use crate::engine::{expected_tokens, speedup, EngineError, SpecConfig};
use crate::model::{ConditionalModel, Token};
use crate::task::{Task, TaskFamily};

/// Slack allowed on every validated inequality.
pub const BOUND_SLACK: f64 = 1e-9;

/// Upper clamp applied to `1 − √(d/2)` before evaluating `f_γ`.
pub const ENVELOPE_CLAMP: f64 = 1.0 - 1e-9;

/// Column order of the per-task metrics snapshot.
pub const METRICS_CSV_HEADER: [&str; 8] = ["task", "alpha", "kl", "ce", "speedup", "r_p", "r_q", "envelope"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FairnessError {
    #[error("unfairness needs at least one divergence value")]
    EmptyDivergences,
    #[error("divergence value {0} is not a finite non-negative number")]
    InvalidDivergence(f64),
    #[error("monte carlo estimation needs at least one sample")]
    NoSamples,
    #[error("representation estimate needs K >= 1")]
    NoGenerations,
    #[error("every one of the {0} generations was unclassifiable")]
    AllRejected(usize),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Dist(#[from] DistError),
}

/// Standard errors of a Monte Carlo metric estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StdErrors {
    pub alpha: f64,
    pub kl: f64,
    pub ce: f64,
    pub speedup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: String,
    pub alpha: f64,
    pub kl: f64,
    /// Expected cross-entropy `D_T`.
    pub ce: f64,
    /// `E_s[speedup(α(s))]`.
    pub speedup: f64,
    /// `speedup(α_T)`; never above `speedup` since `f_γ` is convex.
    pub speedup_at_mean_alpha: f64,
    pub r_p: Option<f64>,
    pub r_q: Option<f64>,
    /// `certified_envelope(ce)`.
    pub envelope: f64,
    pub exact: bool,
    pub std_err: Option<StdErrors>,
}

impl TaskMetrics {
    /// `speedup − speedup_at_mean_alpha`.
    pub fn jensen_slack(&self) -> f64 {
        self.speedup - self.speedup_at_mean_alpha
    }

    /// Cells in [`METRICS_CSV_HEADER`] order; floats carry 17 significant
    /// digits and a missing misfit is an empty cell.
    pub fn csv_fields(&self) -> [String; 8] {
        let opt = |v: Option<f64>| v.map(fmt_float).unwrap_or_default();
        [
            self.task.clone(),
            fmt_float(self.alpha),
            fmt_float(self.kl),
            fmt_float(self.ce),
            fmt_float(self.speedup),
            opt(self.r_p),
            opt(self.r_q),
            fmt_float(self.envelope),
        ]
    }
}

/// Lossless scientific notation with 17 significant digits.
pub fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

struct PrefixValues {
    alpha: f64,
    kl: f64,
    ce: f64,
    speedup: f64,
    r_p: Option<f64>,
    r_q: Option<f64>,
}

fn prefix_values(
    p_model: &impl ConditionalModel,
    q_model: &impl ConditionalModel,
    task: &Task,
    context: &[Token],
    cfg: &SpecConfig,
    floor: f64,
) -> Result<PrefixValues, FairnessError> {
    let p = p_model.predict(context);
    let q = q_model.predict(context);
    let alpha = acceptance_overlap(&p, &q)?;
    let (r_p, r_q) = match task.posterior() {
        Some(u_model) => {
            let u = u_model.predict(context);
            (Some(total_variation(&u, &p)?), Some(total_variation(&u, &q)?))
        }
        None => (None, None),
    };
    Ok(PrefixValues {
        alpha,
        kl: kl_divergence_with_floor(&p, &q, floor)?,
        ce: cross_entropy_with_floor(&p, &q, floor)?,
        speedup: speedup(alpha, cfg)?,
        r_p,
        r_q,
    })
}

pub fn task_metrics(
    p_model: &impl ConditionalModel,
    q_model: &impl ConditionalModel,
    task: &Task,
    cfg: &SpecConfig,
) -> Result<TaskMetrics, FairnessError> {
    task_metrics_with_floor(p_model, q_model, task, cfg, EPSILON_FLOOR)
}

/// Exact expectations over the task's full prefix support.
pub fn task_metrics_with_floor(
    p_model: &impl ConditionalModel,
    q_model: &impl ConditionalModel,
    task: &Task,
    cfg: &SpecConfig,
    floor: f64,
) -> Result<TaskMetrics, FairnessError> {
    cfg.validate()?;
    let mut acc = [0.0; 4];
    let mut r_p = 0.0;
    let mut r_q = 0.0;
    for (context, w) in task.prefixes() {
        let v = prefix_values(p_model, q_model, task, context.tokens(), cfg, floor)?;
        acc[0] += w * v.alpha;
        acc[1] += w * v.kl;
        acc[2] += w * v.ce;
        acc[3] += w * v.speedup;
        r_p += w * v.r_p.unwrap_or(0.0);
        r_q += w * v.r_q.unwrap_or(0.0);
    }
    let has_posterior = task.posterior().is_some();
    finish(
        task,
        acc,
        has_posterior.then_some(r_p),
        has_posterior.then_some(r_q),
        cfg,
        true,
        None,
    )
}

/// Monte Carlo estimate from `n` i.i.d. prefixes, with standard errors.
pub fn task_metrics_sampled<R: Rng + ?Sized>(
    p_model: &impl ConditionalModel,
    q_model: &impl ConditionalModel,
    task: &Task,
    cfg: &SpecConfig,
    n: usize,
    rng: &mut R,
) -> Result<TaskMetrics, FairnessError> {
    cfg.validate()?;
    if n == 0 {
        return Err(FairnessError::NoSamples);
    }
    let mut sum = [0.0; 4];
    let mut sq = [0.0; 4];
    let mut r_p = 0.0;
    let mut r_q = 0.0;
    for _ in 0..n {
        let context = task.sample_prefix(rng);
        let v = prefix_values(p_model, q_model, task, context.tokens(), cfg, EPSILON_FLOOR)?;
        for (i, x) in [v.alpha, v.kl, v.ce, v.speedup].into_iter().enumerate() {
            sum[i] += x;
            sq[i] += x * x;
        }
        r_p += v.r_p.unwrap_or(0.0);
        r_q += v.r_q.unwrap_or(0.0);
    }
    let nf = n as f64;
    let means = sum.map(|s| s / nf);
    let se = |i: usize| {
        if n < 2 {
            f64::NAN
        } else {
            let var = ((sq[i] - nf * means[i] * means[i]) / (nf - 1.0)).max(0.0);
            (var / nf).sqrt()
        }
    };
    let std_err = StdErrors {
        alpha: se(0),
        kl: se(1),
        ce: se(2),
        speedup: se(3),
    };
    let has_posterior = task.posterior().is_some();
    finish(
        task,
        means,
        has_posterior.then_some(r_p / nf),
        has_posterior.then_some(r_q / nf),
        cfg,
        false,
        Some(std_err),
    )
}

fn finish(
    task: &Task,
    [alpha, kl, ce, s]: [f64; 4],
    r_p: Option<f64>,
    r_q: Option<f64>,
    cfg: &SpecConfig,
    exact: bool,
    std_err: Option<StdErrors>,
) -> Result<TaskMetrics, FairnessError> {
    let alpha = alpha.clamp(0.0, 1.0);
    let ce = ce.max(kl);
    Ok(TaskMetrics {
        task: task.id().to_string(),
        alpha,
        kl,
        ce,
        speedup: s,
        speedup_at_mean_alpha: speedup(alpha, cfg)?,
        r_p,
        r_q,
        envelope: certified_envelope(ce, cfg),
        exact,
        std_err,
    })
}

/// Exact metrics for every task of the family, in family order.
pub fn family_metrics(
    p_model: &impl ConditionalModel,
    q_model: &impl ConditionalModel,
    family: &TaskFamily,
    cfg: &SpecConfig,
) -> Result<Vec<TaskMetrics>, FairnessError> {
    family
        .tasks()
        .iter()
        .map(|t| task_metrics(p_model, q_model, t, cfg))
        .collect()
}

/// Index of the smallest divergence; the lowest index wins ties.
pub fn star_index(d_values: &[f64]) -> Result<usize, FairnessError> {
    check_divergences(d_values)?;
    let mut best = 0;
    for (i, &d) in d_values.iter().enumerate().skip(1) {
        if d < d_values[best] {
            best = i;
        }
    }
    Ok(best)
}

fn check_divergences(d_values: &[f64]) -> Result<(), FairnessError> {
    if d_values.is_empty() {
        return Err(FairnessError::EmptyDivergences);
    }
    if let Some(&d) = d_values.iter().find(|d| !d.is_finite() || **d < 0.0) {
        return Err(FairnessError::InvalidDivergence(d));
    }
    Ok(())
}

/// `U = (1/m) Σ_T (D_T − D_min)²`.
pub fn unfairness(d_values: &[f64]) -> Result<f64, FairnessError> {
    let d_min = d_values[star_index(d_values)?];
    Ok(d_values.iter().map(|d| (d - d_min).powi(2)).sum::<f64>() / d_values.len() as f64)
}

/// `f_γ(clamp(1 − √(d/2))) / (1 + γc)`, a lower bound on task speed-up at
/// divergence `d`. Negative or NaN `d` is treated as zero.
pub fn certified_envelope(d: f64, cfg: &SpecConfig) -> f64 {
    let d = if d.is_nan() { 0.0 } else { d.max(0.0) };
    envelope_from_alpha_bound(1.0 - (d / 2.0).sqrt(), cfg)
}

fn envelope_from_alpha_bound(alpha: f64, cfg: &SpecConfig) -> f64 {
    let alpha = alpha.clamp(0.0, ENVELOPE_CLAMP);
    expected_tokens(alpha, cfg.gamma).expect("clamped into domain") / cfg.iteration_cost()
}

/// The four terms of the speed-up chain for one task and the three margins
/// between consecutive terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainReport {
    pub task: String,
    pub speedup: f64,
    pub alpha_bound: f64,
    pub kl_bound: f64,
    pub ce_bound: f64,
    pub margins: [f64; 3],
}

impl ChainReport {
    pub fn from_metrics(m: &TaskMetrics, cfg: &SpecConfig) -> Self {
        let alpha_bound = m.speedup_at_mean_alpha;
        let kl_bound = envelope_from_alpha_bound(1.0 - (m.kl.max(0.0) / 2.0).sqrt(), cfg);
        let ce_bound = certified_envelope(m.ce, cfg);
        Self {
            task: m.task.clone(),
            speedup: m.speedup,
            alpha_bound,
            kl_bound,
            ce_bound,
            margins: [m.speedup - alpha_bound, alpha_bound - kl_bound, kl_bound - ce_bound],
        }
    }

    pub fn holds(&self) -> bool {
        self.margins.iter().all(|&g| g >= -BOUND_SLACK)
    }

    /// Most negative margin.
    pub fn worst_margin(&self) -> f64 {
        self.margins.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

pub fn validate_chain(
    p_model: &impl ConditionalModel,
    q_model: &impl ConditionalModel,
    family: &TaskFamily,
    cfg: &SpecConfig,
) -> Result<Vec<ChainReport>, FairnessError> {
    Ok(family_metrics(p_model, q_model, family, cfg)?
        .iter()
        .map(|m| ChainReport::from_metrics(m, cfg))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitnessCheck {
    pub task: String,
    pub alpha: f64,
    /// `1 − r_q`.
    pub predicted: f64,
    pub r_p: f64,
    /// `r_p − |α_T − (1 − r_q)|`.
    pub margin: f64,
}

impl FitnessCheck {
    pub fn holds(&self) -> bool {
        self.margin >= -BOUND_SLACK
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitnessReport {
    pub checked: Vec<FitnessCheck>,
    /// Tasks without a posterior or with `r_p > r_q`.
    pub skipped: Vec<String>,
}

impl FitnessReport {
    pub fn violations(&self) -> impl Iterator<Item = &FitnessCheck> {
        self.checked.iter().filter(|c| !c.holds())
    }
}

/// Checks `|α_T − (1 − r_q)| ≤ r_p` on every task where `r_p ≤ r_q`.
pub fn validate_fitness_bound(metrics: &[TaskMetrics]) -> FitnessReport {
    let mut report = FitnessReport::default();
    for m in metrics {
        match (m.r_p, m.r_q) {
            (Some(r_p), Some(r_q)) if r_p <= r_q => report.checked.push(FitnessCheck {
                task: m.task.clone(),
                alpha: m.alpha,
                predicted: 1.0 - r_q,
                r_p,
                margin: r_p - (m.alpha - (1.0 - r_q)).abs(),
            }),
            _ => report.skipped.push(m.task.clone()),
        }
    }
    report
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisparityReport {
    /// `r_q^j − r_q^i > r_p^i + r_p^j`.
    pub condition: bool,
    pub alpha_gap: f64,
    pub speedup_gap: f64,
    /// `(α_i − α_j) / (γc + 1)`.
    pub required_speedup_gap: f64,
    /// Same comparison with speed-ups evaluated at the task-mean acceptance.
    pub mean_alpha_speedup_gap: f64,
}

impl DisparityReport {
    /// Strict acceptance gap whenever the condition holds.
    pub fn alpha_holds(&self) -> bool {
        !self.condition || self.alpha_gap > 0.0
    }

    pub fn speedup_holds(&self) -> bool {
        !self.condition || self.speedup_gap >= self.required_speedup_gap - BOUND_SLACK
    }

    pub fn mean_alpha_speedup_holds(&self) -> bool {
        !self.condition || self.mean_alpha_speedup_gap >= self.required_speedup_gap - BOUND_SLACK
    }

    pub fn holds(&self) -> bool {
        self.alpha_holds() && self.speedup_holds()
    }
}

/// Sufficient condition for task `i` to be served strictly better than `j`.
/// Tasks without misfits never satisfy the condition.
pub fn validate_disparity_condition(mi: &TaskMetrics, mj: &TaskMetrics, cfg: &SpecConfig) -> DisparityReport {
    let condition = match (mi.r_p, mi.r_q, mj.r_p, mj.r_q) {
        (Some(pi), Some(qi), Some(pj), Some(qj)) => qj - qi > pi + pj,
        _ => false,
    };
    let alpha_gap = mi.alpha - mj.alpha;
    DisparityReport {
        condition,
        alpha_gap,
        speedup_gap: mi.speedup - mj.speedup,
        required_speedup_gap: alpha_gap / cfg.iteration_cost(),
        mean_alpha_speedup_gap: mi.speedup_at_mean_alpha - mj.speedup_at_mean_alpha,
    }
}

/// Maps a generated sequence to the index of the task it belongs to.
pub trait TaskClassifier {
    fn labels(&self) -> Vec<String>;
    fn classify(&self, tokens: &[Token]) -> Option<usize>;
}

/// Classifies by the token block that contains the first generated token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenRangeClassifier {
    blocks: Vec<(String, Range<usize>)>,
}

impl TokenRangeClassifier {
    pub fn new(blocks: Vec<(String, Range<usize>)>) -> Self {
        Self { blocks }
    }
}

impl TaskClassifier for TokenRangeClassifier {
    fn labels(&self) -> Vec<String> {
        self.blocks.iter().map(|(id, _)| id.clone()).collect()
    }

    fn classify(&self, tokens: &[Token]) -> Option<usize> {
        let first = *tokens.first()?;
        self.blocks.iter().position(|(_, r)| r.contains(&first))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepresentationEstimate {
    /// `(task id, P̂)` sorted by descending probability; ties keep label order.
    pub ranked: Vec<(String, f64)>,
    pub counts: Vec<(String, usize)>,
    pub rejected: usize,
    pub k: usize,
}

/// Samples `k` generations of `gen_len` tokens from the drafter on the empty
/// context and tallies the task each one is classified as.
pub fn estimate_representation<R: Rng + ?Sized>(
    q_model: &impl ConditionalModel,
    classifier: &impl TaskClassifier,
    k: usize,
    gen_len: usize,
    rng: &mut R,
) -> Result<RepresentationEstimate, FairnessError> {
    if k == 0 {
        return Err(FairnessError::NoGenerations);
    }
    let labels = classifier.labels();
    let mut counts = vec![0usize; labels.len()];
    let mut rejected = 0;
    let mut generated = Vec::with_capacity(gen_len.max(1));
    for _ in 0..k {
        generated.clear();
        for _ in 0..gen_len.max(1) {
            let x = q_model.predict(&generated).sample(rng);
            generated.push(x);
        }
        match classifier.classify(&generated) {
            Some(i) => counts[i] += 1,
            None => rejected += 1,
        }
    }
    let accepted = k - rejected;
    if accepted == 0 {
        return Err(FairnessError::AllRejected(k));
    }
    let mut ranked: Vec<(String, f64)> = labels
        .iter()
        .zip(&counts)
        .map(|(id, &c)| (id.clone(), c as f64 / accepted as f64))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(RepresentationEstimate {
        ranked,
        counts: labels.into_iter().zip(counts).collect(),
        rejected,
        k,
    })
}
