//! Speculative decoding: draft `γ` tokens from the drafter, verify them left to
//! right against the verifier, resample from the residual on the first
//! rejection, and emit a bonus verifier token when every draft survives.
//!
//! Wall time is modeled analytically from the acceptance rate, never measured.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dist::{acceptance_overlap, residual, Categorical, DistError};
use crate::model::{ConditionalModel, Token};

/// Largest vocabulary `enumerate_step_distribution` will expand.
pub const MAX_ENUMERATION_VOCAB: usize = 16;
/// Largest speculative width `enumerate_step_distribution` will expand.
pub const MAX_ENUMERATION_GAMMA: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("speculative width must be at least 1, got {0}")]
    InvalidGamma(usize),
    #[error("cost ratio must lie in [0, 1), got {0}")]
    InvalidCostRatio(f64),
    #[error("acceptance rate must lie in [0, 1], got {0}")]
    AlphaOutOfDomain(f64),
    #[error("drafter and verifier vocabularies differ: {drafter} vs {verifier}")]
    VocabularyMismatch { drafter: usize, verifier: usize },
    #[error("enumeration too large: |V| = {vocab} (max {MAX_ENUMERATION_VOCAB}), gamma = {gamma} (max {MAX_ENUMERATION_GAMMA})")]
    EnumerationTooLarge { vocab: usize, gamma: usize },
    #[error("internal invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Dist(#[from] DistError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecConfig {
    pub gamma: usize,
    pub cost_ratio: f64,
}

impl SpecConfig {
    pub fn new(gamma: usize, cost_ratio: f64) -> Result<Self, EngineError> {
        let cfg = Self { gamma, cost_ratio };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if self.gamma == 0 {
            return Err(EngineError::InvalidGamma(self.gamma));
        }
        if !(0.0..1.0).contains(&self.cost_ratio) {
            return Err(EngineError::InvalidCostRatio(self.cost_ratio));
        }
        Ok(())
    }

    /// Relative cost of one speculative iteration, `γc + 1`.
    pub fn iteration_cost(&self) -> f64 {
        self.gamma as f64 * self.cost_ratio + 1.0
    }
}

/// Outcome of one draft/verify iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub drafted: Vec<Token>,
    pub accepted_prefix_len: usize,
    /// Accepted drafts followed by one correction or bonus token.
    pub emitted: Vec<Token>,
    /// `min(1, p(x)/q(x))` for each scanned draft position.
    pub per_token_accept_probs: Vec<f64>,
}

impl StepTrace {
    pub fn fully_accepted(&self) -> bool {
        self.accepted_prefix_len == self.drafted.len()
    }
}

fn check_vocab(p: &impl ConditionalModel, q: &impl ConditionalModel) -> Result<usize, EngineError> {
    if p.vocab_size() != q.vocab_size() {
        return Err(EngineError::VocabularyMismatch {
            drafter: q.vocab_size(),
            verifier: p.vocab_size(),
        });
    }
    Ok(p.vocab_size())
}

fn accept_ratio(p: &Categorical, q: &Categorical, x: Token) -> f64 {
    let qx = q.prob(x);
    if qx <= 0.0 {
        1.0
    } else {
        (p.prob(x) / qx).min(1.0)
    }
}

/// One speculative iteration at `context`.
pub fn speculative_step<R: Rng + ?Sized>(
    p_model: &impl ConditionalModel,
    q_model: &impl ConditionalModel,
    context: &[Token],
    cfg: &SpecConfig,
    rng: &mut R,
) -> Result<StepTrace, EngineError> {
    cfg.validate()?;
    check_vocab(p_model, q_model)?;

    let mut extended = context.to_vec();
    let mut drafted = Vec::with_capacity(cfg.gamma);
    let mut draft_laws = Vec::with_capacity(cfg.gamma);
    for _ in 0..cfg.gamma {
        let q = q_model.predict(&extended);
        let x = q.sample(rng);
        drafted.push(x);
        extended.push(x);
        draft_laws.push(q);
    }

    let mut emitted = Vec::with_capacity(cfg.gamma + 1);
    let mut per_token_accept_probs = Vec::with_capacity(cfg.gamma);
    let mut prefix = context.to_vec();
    for (&x, q) in drafted.iter().zip(&draft_laws) {
        let p = p_model.predict(&prefix);
        let ratio = accept_ratio(&p, q, x);
        per_token_accept_probs.push(ratio);
        if rng.gen::<f64>() < ratio {
            emitted.push(x);
            prefix.push(x);
            continue;
        }
        let correction = residual(&p, q).map_err(|e| match e {
            DistError::DegenerateResidual => EngineError::Invariant(format!(
                "rejected token {x} although p == q at prefix {prefix:?}"
            )),
            other => other.into(),
        })?;
        emitted.push(correction.sample(rng));
        return Ok(StepTrace {
            accepted_prefix_len: emitted.len() - 1,
            drafted,
            emitted,
            per_token_accept_probs,
        });
    }
    emitted.push(p_model.predict(&prefix).sample(rng));
    Ok(StepTrace {
        accepted_prefix_len: cfg.gamma,
        drafted,
        emitted,
        per_token_accept_probs,
    })
}

/// Exact law of every emitted block of one speculative iteration, by
/// summing over all draft, acceptance and resampling branches.
pub fn enumerate_emissions(
    p_model: &impl ConditionalModel,
    q_model: &impl ConditionalModel,
    context: &[Token],
    cfg: &SpecConfig,
) -> Result<BTreeMap<Vec<Token>, f64>, EngineError> {
    cfg.validate()?;
    let vocab = check_vocab(p_model, q_model)?;
    if vocab > MAX_ENUMERATION_VOCAB || cfg.gamma > MAX_ENUMERATION_GAMMA {
        return Err(EngineError::EnumerationTooLarge {
            vocab,
            gamma: cfg.gamma,
        });
    }
    let mut out = BTreeMap::new();
    let mut prefix = context.to_vec();
    let mut accepted = Vec::new();
    expand(p_model, q_model, &mut prefix, &mut accepted, 1.0, cfg.gamma, &mut out);
    Ok(out)
}

fn expand(
    p_model: &impl ConditionalModel,
    q_model: &impl ConditionalModel,
    prefix: &mut Vec<Token>,
    accepted: &mut Vec<Token>,
    mass: f64,
    remaining: usize,
    out: &mut BTreeMap<Vec<Token>, f64>,
) {
    let p = p_model.predict(prefix);
    if remaining == 0 {
        for (y, &py) in p.probs().iter().enumerate() {
            if py > 0.0 {
                let mut block = accepted.clone();
                block.push(y);
                *out.entry(block).or_insert(0.0) += mass * py;
            }
        }
        return;
    }
    let q = q_model.predict(prefix);
    let correction = residual(&p, &q).ok();
    for (x, &qx) in q.probs().iter().enumerate() {
        if qx <= 0.0 {
            continue;
        }
        let a = accept_ratio(&p, &q, x);
        if a > 0.0 {
            prefix.push(x);
            accepted.push(x);
            expand(p_model, q_model, prefix, accepted, mass * qx * a, remaining - 1, out);
            accepted.pop();
            prefix.pop();
        }
        if a < 1.0 {
            let r = correction.as_ref().expect("rejection implies positive residual mass");
            for (y, &ry) in r.probs().iter().enumerate() {
                if ry > 0.0 {
                    let mut block = accepted.clone();
                    block.push(y);
                    *out.entry(block).or_insert(0.0) += mass * qx * (1.0 - a) * ry;
                }
            }
        }
    }
}

/// Exact law of the first emitted token of one iteration; equals `p(·|context)`.
pub fn enumerate_step_distribution(
    p_model: &impl ConditionalModel,
    q_model: &impl ConditionalModel,
    context: &[Token],
    cfg: &SpecConfig,
) -> Result<Categorical, EngineError> {
    let emissions = enumerate_emissions(p_model, q_model, context, cfg)?;
    let mut first = vec![0.0; p_model.vocab_size()];
    for (block, mass) in emissions {
        first[block[0]] += mass;
    }
    Ok(Categorical::new(first)?)
}

/// `f_γ(α) = Σ_{k=0}^{γ} α^k`, the expected tokens per verifier pass.
///
/// The summation form is finite at `α = 1` (value `γ + 1`), which is the
/// perfect-drafter limit.
pub fn expected_tokens(alpha: f64, gamma: usize) -> Result<f64, EngineError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(EngineError::AlphaOutOfDomain(alpha));
    }
    let mut term = 1.0;
    let mut total = 1.0;
    for _ in 0..gamma {
        term *= alpha;
        total += term;
    }
    Ok(total)
}

/// Closed form `(1 − α^{γ+1}) / (1 − α)`; only valid for `α < 1`.
pub fn expected_tokens_rational(alpha: f64, gamma: usize) -> f64 {
    (1.0 - alpha.powi(gamma as i32 + 1)) / (1.0 - alpha)
}

/// Expected wall-time improvement over vanilla decoding at acceptance `alpha`.
pub fn speedup(alpha: f64, cfg: &SpecConfig) -> Result<f64, EngineError> {
    cfg.validate()?;
    Ok(expected_tokens(alpha, cfg.gamma)? / cfg.iteration_cost())
}

/// Plain autoregressive sampling from the verifier.
pub fn vanilla_decode<R: Rng + ?Sized>(
    p_model: &impl ConditionalModel,
    context: &[Token],
    n_tokens: usize,
    rng: &mut R,
) -> Vec<Token> {
    let mut prefix = context.to_vec();
    let mut out = Vec::with_capacity(n_tokens);
    for _ in 0..n_tokens {
        let x = p_model.predict(&prefix).sample(rng);
        out.push(x);
        prefix.push(x);
    }
    out
}

/// Runs speculative iterations until at least `n_tokens` are emitted.
pub fn speculative_decode<R: Rng + ?Sized>(
    p_model: &impl ConditionalModel,
    q_model: &impl ConditionalModel,
    context: &[Token],
    n_tokens: usize,
    cfg: &SpecConfig,
    rng: &mut R,
) -> Result<(Vec<Token>, Vec<StepTrace>), EngineError> {
    let mut prefix = context.to_vec();
    let mut traces = Vec::new();
    let start = prefix.len();
    while prefix.len() - start < n_tokens {
        let trace = speculative_step(p_model, q_model, &prefix, cfg, rng)?;
        prefix.extend_from_slice(&trace.emitted);
        traces.push(trace);
    }
    Ok((prefix[start..].to_vec(), traces))
}

/// Per-step acceptance `α(s)` of the model pair at a context.
pub fn acceptance_at(
    p_model: &impl ConditionalModel,
    q_model: &impl ConditionalModel,
    context: &[Token],
) -> Result<f64, EngineError> {
    check_vocab(p_model, q_model)?;
    Ok(acceptance_overlap(&p_model.predict(context), &q_model.predict(context))?)
}

/// One line of the optional trace dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: u64,
    pub context: Vec<Token>,
    pub drafted: Vec<Token>,
    pub accepted_prefix_len: usize,
    pub emitted: Vec<Token>,
}

impl TraceRecord {
    pub fn new(step: u64, context: &[Token], trace: &StepTrace) -> Self {
        Self {
            step,
            context: context.to_vec(),
            drafted: trace.drafted.clone(),
            accepted_prefix_len: trace.accepted_prefix_len,
            emitted: trace.emitted.clone(),
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("trace serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ContextKey, Role, TabularSoftmaxModel};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn constant_model(probs: &[f64]) -> TabularSoftmaxModel {
        let mut m = TabularSoftmaxModel::new(probs.len(), 0, Role::Verifier).unwrap();
        let d = Categorical::new(probs.to_vec()).unwrap();
        let logits = d.probs().iter().map(|&p| if p > 0.0 { p.ln() } else { -1e4 }).collect();
        m.set_row(ContextKey::from_context(&[], 0, probs.len()), logits).unwrap();
        m
    }

    fn cfg(gamma: usize, c: f64) -> SpecConfig {
        SpecConfig::new(gamma, c).unwrap()
    }

    #[test]
    fn config_bounds() {
        assert_eq!(SpecConfig::new(0, 0.1), Err(EngineError::InvalidGamma(0)));
        assert!(matches!(SpecConfig::new(1, 1.0), Err(EngineError::InvalidCostRatio(_))));
        assert!(matches!(SpecConfig::new(1, -0.1), Err(EngineError::InvalidCostRatio(_))));
        assert!(SpecConfig::new(1, 0.0).is_ok());
    }

    #[test]
    fn expected_tokens_examples() {
        assert_eq!(expected_tokens(0.0, 5).unwrap(), 1.0);
        assert_eq!(expected_tokens(0.5, 1).unwrap(), 1.5);
        assert_eq!(expected_tokens(0.5, 3).unwrap(), 1.875);
        assert_eq!(expected_tokens(1.0, 3).unwrap(), 4.0);
        assert!(matches!(expected_tokens(1.0 + 1e-9, 3), Err(EngineError::AlphaOutOfDomain(_))));
        assert!(expected_tokens(-0.1, 3).is_err());
        assert!(expected_tokens(f64::NAN, 3).is_err());
    }

    #[test]
    fn summation_matches_rational_form() {
        for gamma in [1, 2, 3, 5, 8] {
            for i in 0..1000 {
                let alpha = i as f64 / 1000.0;
                let a = expected_tokens(alpha, gamma).unwrap();
                assert!((a - expected_tokens_rational(alpha, gamma)).abs() <= 1e-12, "gamma {gamma} alpha {alpha}");
            }
            // closer to 1 the closed form itself loses ~ε/(1−α) to cancellation
            for alpha in [0.9999, 0.99999, 1.0 - 1e-6] {
                let a = expected_tokens(alpha, gamma).unwrap();
                let slack = 4.0 * (gamma + 1) as f64 * f64::EPSILON / (1.0 - alpha);
                assert!((a - expected_tokens_rational(alpha, gamma)).abs() <= slack);
            }
        }
    }

    #[test]
    fn speedup_examples() {
        let s = speedup(0.5, &cfg(3, 0.1)).unwrap();
        assert!((s - 1.442_307_692_307_692_3).abs() < 1e-15);
        assert_eq!(speedup(0.0, &cfg(1, 0.0)).unwrap(), 1.0);
        assert!(speedup(0.9, &cfg(3, 0.1)).unwrap() > speedup(0.5, &cfg(3, 0.1)).unwrap());
    }

    #[test]
    fn speedup_strictly_increasing() {
        for gamma in [1, 2, 4, 8] {
            for c in [0.0, 0.1, 0.5, 0.9] {
                let cfg = cfg(gamma, c);
                let values: Vec<f64> = (0..1000).map(|i| speedup(i as f64 / 1000.0, &cfg).unwrap()).collect();
                assert!(values.windows(2).all(|w| w[1] > w[0]));
            }
        }
    }

    #[test]
    fn identical_models_always_accept() {
        let p = constant_model(&[0.2, 0.3, 0.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let t = speculative_step(&p, &p, &[], &cfg(4, 0.1), &mut rng).unwrap();
            assert_eq!(t.accepted_prefix_len, 4);
            assert_eq!(t.emitted.len(), 5);
            assert!(t.per_token_accept_probs.iter().all(|&a| a == 1.0));
        }
    }

    #[test]
    fn disjoint_models_always_reject() {
        let p = constant_model(&[1.0, 0.0]);
        let q = constant_model(&[0.0, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let t = speculative_step(&p, &q, &[], &cfg(3, 0.0), &mut rng).unwrap();
            assert_eq!(t.accepted_prefix_len, 0);
            assert_eq!(t.emitted, vec![0]);
            assert_eq!(t.per_token_accept_probs, vec![0.0]);
        }
    }

    /// Hand-enumerated oracle for |V| = 2, γ = 1: draft x ~ q, accept with
    /// min(1, p/q), else resample from the residual.
    #[test]
    fn two_token_single_draft_law() {
        let (p, q): ([f64; 2], [f64; 2]) = ([0.8, 0.2], [0.5, 0.5]);
        let mut law = [0.0; 2];
        let residual_law = [1.0, 0.0]; // max(p − q, 0) = [0.3, 0] normalized
        for x in 0..2 {
            let a = (p[x] / q[x]).min(1.0);
            law[x] += q[x] * a;
            for y in 0..2 {
                law[y] += q[x] * (1.0 - a) * residual_law[y];
            }
        }
        assert!((law[0] - 0.8).abs() < 1e-15 && (law[1] - 0.2).abs() < 1e-15);

        let pm = constant_model(&p);
        let qm = constant_model(&q);
        let e = enumerate_step_distribution(&pm, &qm, &[], &cfg(1, 0.0)).unwrap();
        assert!((e.prob(0) - law[0]).abs() < 1e-12);
    }

    #[test]
    fn enumeration_is_gamma_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let keys: Vec<ContextKey> = (0..4).map(|t| ContextKey::from_context(&[t], 1, 4)).collect();
        let p = TabularSoftmaxModel::with_random_rows(4, 1, Role::Verifier, keys.clone(), 1.0, &mut rng).unwrap();
        let q = TabularSoftmaxModel::with_random_rows(4, 1, Role::Drafter, keys, 1.0, &mut rng).unwrap();
        let one = enumerate_step_distribution(&p, &q, &[2], &cfg(1, 0.0)).unwrap();
        let three = enumerate_step_distribution(&p, &q, &[2], &cfg(3, 0.0)).unwrap();
        let target = p.predict(&[2]);
        for i in 0..4 {
            assert!((one.prob(i) - target.prob(i)).abs() < 1e-12);
            assert!((three.prob(i) - target.prob(i)).abs() < 1e-12);
        }
        let same = enumerate_step_distribution(&p, &p, &[2], &cfg(2, 0.0)).unwrap();
        for i in 0..4 {
            assert!((same.prob(i) - target.prob(i)).abs() < 1e-12);
        }
    }

    #[test]
    fn enumeration_limits() {
        let big = TabularSoftmaxModel::new(17, 1, Role::Verifier).unwrap();
        assert!(matches!(
            enumerate_step_distribution(&big, &big, &[], &cfg(1, 0.0)),
            Err(EngineError::EnumerationTooLarge { .. })
        ));
        let small = TabularSoftmaxModel::new(3, 1, Role::Verifier).unwrap();
        assert!(matches!(
            enumerate_step_distribution(&small, &small, &[], &cfg(4, 0.0)),
            Err(EngineError::EnumerationTooLarge { .. })
        ));
    }

    /// With context-free models α is the same at every position, so the
    /// expected block length is exactly f_γ(α).
    #[test]
    fn expected_block_length_is_f_gamma() {
        let p = constant_model(&[0.6, 0.3, 0.1]);
        let q = constant_model(&[0.2, 0.5, 0.3]);
        let alpha = acceptance_at(&p, &q, &[]).unwrap();
        for gamma in 1..=3 {
            let law = enumerate_emissions(&p, &q, &[], &cfg(gamma, 0.0)).unwrap();
            let total: f64 = law.values().sum();
            let mean_len: f64 = law.iter().map(|(b, m)| b.len() as f64 * m).sum();
            assert!((total - 1.0).abs() < 1e-12);
            assert!((mean_len - expected_tokens(alpha, gamma).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn empirical_first_position_acceptance() {
        let p = constant_model(&[0.6, 0.3, 0.1]);
        let q = constant_model(&[0.2, 0.5, 0.3]);
        let alpha = acceptance_at(&p, &q, &[]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 40_000;
        let accepted = (0..n)
            .filter(|_| speculative_step(&p, &q, &[], &cfg(2, 0.0), &mut rng).unwrap().accepted_prefix_len > 0)
            .count() as f64;
        let sigma = (alpha * (1.0 - alpha) / n as f64).sqrt();
        assert!((accepted / n as f64 - alpha).abs() <= 3.0 * sigma);
    }

    #[test]
    fn emitted_tokens_follow_verifier() {
        let p = constant_model(&[0.6, 0.3, 0.1]);
        let q = constant_model(&[0.1, 0.2, 0.7]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 60_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            let t = speculative_step(&p, &q, &[], &cfg(3, 0.0), &mut rng).unwrap();
            counts[t.emitted[0]] += 1;
        }
        for (i, &pi) in [0.6, 0.3, 0.1].iter().enumerate() {
            let sigma = (pi * (1.0 - pi) / n as f64).sqrt();
            assert!((counts[i] as f64 / n as f64 - pi).abs() <= 3.0 * sigma, "token {i}");
        }
    }

    #[test]
    fn vanilla_decode_behaviour() {
        let mut det = TabularSoftmaxModel::new(3, 1, Role::Verifier).unwrap();
        for t in 0..3 {
            let mut row = vec![-1e3; 3];
            row[(t + 1) % 3] = 0.0;
            det.set_row(det.key(&[t]), row).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(vanilla_decode(&det, &[0], 5, &mut rng), vec![1, 2, 0, 1, 2]);

        let p = constant_model(&[0.6, 0.3, 0.1]);
        let a = vanilla_decode(&p, &[], 20, &mut ChaCha8Rng::seed_from_u64(9));
        let b = vanilla_decode(&p, &[], 20, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);

        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let n = 100_000;
        let ones = (0..n).filter(|_| vanilla_decode(&p, &[], 1, &mut rng)[0] == 0).count() as f64;
        let sigma = (0.6f64 * 0.4 / n as f64).sqrt();
        assert!((ones / n as f64 - 0.6).abs() <= 3.0 * sigma);
    }

    #[test]
    fn decode_emits_requested_length() {
        let p = constant_model(&[0.6, 0.3, 0.1]);
        let q = constant_model(&[0.3, 0.3, 0.4]);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (tokens, traces) = speculative_decode(&p, &q, &[], 50, &cfg(3, 0.1), &mut rng).unwrap();
        assert!(tokens.len() >= 50);
        assert_eq!(tokens.len(), traces.iter().map(|t| t.emitted.len()).sum::<usize>());
        for t in &traces {
            assert_eq!(t.emitted.len(), t.accepted_prefix_len + 1);
        }
        let line = TraceRecord::new(0, &[], &traces[0]).to_json_line();
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        for field in ["step", "context", "drafted", "accepted_prefix_len", "emitted"] {
            assert!(v.get(field).is_some());
        }
    }
}
