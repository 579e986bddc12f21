//! Synthetic task families with controlled verifier/drafter misfit.
//!
//! The vocabulary is split into one contiguous token block per task (leftover
//! tokens belong to no task). A task's prefixes are short sequences over its
//! own block, so tasks never share a context key and their rows are
//! independent. For every key the latent posterior `u` is drawn first, then
//! the verifier and drafter rows are obtained by mixing `u` with seeded noise
//! until the total variation to `u` equals the requested `r_p` / `r_q`.

use std::collections::BTreeSet;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dist::{total_variation, Categorical};
use crate::model::{Context, ContextKey, ModelError, Role, TabularSoftmaxModel};
use crate::rng::{RngStreams, StreamRng};
use crate::task::{Task, TaskError, TaskFamily};

/// Smallest probability written into a synthetic row; keeps every logit finite.
const ROW_FLOOR: f64 = 1e-9;

/// Dirichlet shape of misfit noise. Below 1 the noise has a few dominant
/// tokens, so a misfit model is confidently wrong rather than merely flatter
/// than `u`.
const NOISE_SHAPE: f64 = 0.2;

/// Weight of the noise component when the random noise alone is too close to `u`.
const FALLBACK_NOISE: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SyntheticError {
    #[error("infeasible family spec: {0}")]
    Infeasible(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Task(#[from] TaskError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub id: String,
    pub support_size: usize,
    pub r_p: f64,
    pub r_q: f64,
    /// Relative share of this task in the drafter's empty-context prior.
    #[serde(default = "default_prior_weight")]
    pub prior_weight: f64,
}

fn default_prior_weight() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct FamilySpec {
    pub vocab_size: usize,
    pub context_order: usize,
    /// Mass of `u` kept inside the task's own token block.
    pub concentration: f64,
    pub tasks: Vec<TaskSpec>,
}

#[derive(Debug, Clone)]
pub struct SyntheticFamily {
    pub verifier: TabularSoftmaxModel,
    pub drafter: TabularSoftmaxModel,
    pub family: TaskFamily,
    /// Token block owned by each task, in family order.
    pub blocks: Vec<(String, Range<usize>)>,
}

impl FamilySpec {
    pub fn block_size(&self) -> usize {
        self.vocab_size / self.tasks.len().max(1)
    }

    fn validate(&self) -> Result<(), SyntheticError> {
        let infeasible = |msg: String| Err(SyntheticError::Infeasible(msg));
        if self.tasks.len() < 2 {
            return infeasible(format!("need at least 2 tasks, got {}", self.tasks.len()));
        }
        if self.vocab_size < 2 {
            return infeasible(format!("vocab_size {} < 2", self.vocab_size));
        }
        if self.context_order == 0 {
            return infeasible("context order 0 cannot separate tasks".into());
        }
        if !(self.concentration > 0.0 && self.concentration <= 1.0) {
            return infeasible(format!("concentration {} outside (0, 1]", self.concentration));
        }
        let block = self.block_size();
        if block < 2 {
            return infeasible(format!(
                "vocab_size {} leaves fewer than 2 tokens per task",
                self.vocab_size
            ));
        }
        let max_misfit = 1.0 - 1.0 / self.vocab_size as f64;
        let max_support = block + block * block;
        let mut prior_total = 0.0;
        for t in &self.tasks {
            for (name, r) in [("r_p", t.r_p), ("r_q", t.r_q)] {
                if !(0.0..=max_misfit).contains(&r) {
                    return infeasible(format!(
                        "task {:?}: {name} = {r} outside [0, {max_misfit}]",
                        t.id
                    ));
                }
            }
            if t.support_size == 0 || t.support_size > max_support {
                return infeasible(format!(
                    "task {:?}: support_size {} outside [1, {max_support}]",
                    t.id, t.support_size
                ));
            }
            if !(t.prior_weight.is_finite() && t.prior_weight >= 0.0) {
                return infeasible(format!("task {:?}: prior_weight {}", t.id, t.prior_weight));
            }
            prior_total += t.prior_weight;
        }
        if prior_total <= 0.0 {
            return infeasible("prior weights sum to zero".into());
        }
        Ok(())
    }
}

fn dirichlet_weights(n: usize, rng: &mut StreamRng) -> Vec<f64> {
    (0..n).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect()
}

/// Unnormalized `Dir(shape)` draw; small shapes give spiky vectors.
fn sparse_weights(n: usize, shape: f64, rng: &mut StreamRng) -> Vec<f64> {
    let gamma = Gamma::new(shape, 1.0).expect("positive shape");
    (0..n).map(|_| gamma.sample(rng)).collect()
}

fn floored(weights: Vec<f64>) -> Categorical {
    let w: Vec<f64> = weights.into_iter().map(|x| x.max(ROW_FLOOR)).collect();
    Categorical::from_weights(&w).expect("positive weights")
}

fn mix(a: &Categorical, b: &Categorical, w: f64) -> Categorical {
    floored(
        a.probs()
            .iter()
            .zip(b.probs())
            .map(|(x, y)| (1.0 - w) * x + w * y)
            .collect(),
    )
}

/// What a model stores for `target`: the distribution after a logit round trip.
fn realized(target: &Categorical) -> Categorical {
    Categorical::softmax(&target.probs().iter().map(|p| p.ln()).collect::<Vec<_>>())
}

/// Moves `u` toward seeded noise supported on `block` until `TV(u, ·) = r`,
/// bisecting on the mix weight.
pub(crate) fn misfit_row(u: &Categorical, block: &Range<usize>, r: f64, rng: &mut StreamRng) -> Categorical {
    let mut weights = vec![0.0; u.len()];
    for (t, w) in block.clone().zip(sparse_weights(block.len(), NOISE_SHAPE, rng)) {
        weights[t] = w;
    }
    let noise = floored(weights);
    if r == 0.0 {
        return u.clone();
    }
    let reach = total_variation(u, &noise).expect("same vocabulary");
    let noise = if reach >= r + 1e-6 {
        noise
    } else {
        // push toward the least likely token of u: TV(u, δ_min) = 1 − min u ≥ 1 − 1/|V|
        let argmin = u
            .probs()
            .iter()
            .enumerate()
            .fold(0, |best, (i, &p)| if p < u.prob(best) { i } else { best });
        let spike = Categorical::one_hot(u.len(), argmin).expect("valid index");
        mix(&spike, &noise, FALLBACK_NOISE)
    };
    let measure = |w: f64| total_variation(u, &realized(&mix(u, &noise, w))).expect("same vocabulary");
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    if measure(hi) <= r {
        return mix(u, &noise, hi);
    }
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if measure(mid) < r {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    mix(u, &noise, 0.5 * (lo + hi))
}

fn posterior_row(block: &Range<usize>, vocab: usize, concentration: f64, rng: &mut StreamRng) -> Categorical {
    let inner = dirichlet_weights(block.len(), rng);
    let inner_sum: f64 = inner.iter().sum();
    let outer = dirichlet_weights(vocab, rng);
    let outer_sum: f64 = outer.iter().sum();
    let mut w: Vec<f64> = outer.iter().map(|x| (1.0 - concentration) * x / outer_sum).collect();
    for (offset, x) in inner.iter().enumerate() {
        w[block.start + offset] += concentration * x / inner_sum;
    }
    floored(w)
}

fn block_prior(blocks: &[Range<usize>], weights: &[f64], vocab: usize) -> Categorical {
    let total: f64 = weights.iter().sum();
    let mut w = vec![0.0; vocab];
    for (block, &weight) in blocks.iter().zip(weights) {
        for t in block.clone() {
            w[t] += weight / total / block.len() as f64;
        }
    }
    floored(w)
}

/// Builds verifier, drafter and tasks for `spec`; deterministic in `seed`.
pub fn make_synthetic_family(spec: &FamilySpec, seed: u64) -> Result<SyntheticFamily, SyntheticError> {
    spec.validate()?;
    let vocab = spec.vocab_size;
    let order = spec.context_order;
    let block = spec.block_size();
    let streams = RngStreams::new(seed);

    let mut verifier = TabularSoftmaxModel::new(vocab, order, Role::Verifier)?;
    let mut drafter = TabularSoftmaxModel::new(vocab, order, Role::Drafter)?;
    let blocks: Vec<Range<usize>> = (0..spec.tasks.len()).map(|i| i * block..(i + 1) * block).collect();

    let mut tasks = Vec::with_capacity(spec.tasks.len());
    for (index, (task_spec, range)) in spec.tasks.iter().zip(&blocks).enumerate() {
        let mut rng = streams.stream("family-task", index as u64, 0);

        let mut candidates: Vec<Vec<usize>> = range.clone().map(|a| vec![a]).collect();
        for a in range.clone() {
            for b in range.clone() {
                candidates.push(vec![a, b]);
            }
        }
        candidates.shuffle(&mut rng);
        candidates.truncate(task_spec.support_size);
        candidates.sort();
        let weights: Vec<f64> = dirichlet_weights(candidates.len(), &mut rng)
            .into_iter()
            .map(|w| w.max(ROW_FLOOR))
            .collect();
        let weight_sum: f64 = weights.iter().sum();
        let prefixes: Vec<(Context, f64)> = candidates
            .into_iter()
            .zip(weights)
            .map(|(tokens, w)| (Context::new(tokens, vocab).expect("block tokens"), w / weight_sum))
            .collect();

        let mut keys: BTreeSet<ContextKey> = prefixes.iter().map(|(c, _)| verifier.key(c.tokens())).collect();
        if order == 1 {
            keys.extend(range.clone().map(|t| verifier.key(&[t])));
        }

        let mut posterior = TabularSoftmaxModel::new(vocab, order, Role::Posterior)?;
        for key in keys {
            let u = posterior_row(range, vocab, spec.concentration, &mut rng);
            let p = misfit_row(&u, range, task_spec.r_p, &mut rng);
            let q = misfit_row(&u, range, task_spec.r_q, &mut rng);
            posterior.set_distribution(key.clone(), &u)?;
            verifier.set_distribution(key.clone(), &p)?;
            drafter.set_distribution(key, &q)?;
        }
        tasks.push(Task::new(task_spec.id.clone(), prefixes, Some(posterior))?);
    }

    let empty = verifier.key(&[]);
    let equal = vec![1.0; blocks.len()];
    verifier.set_distribution(empty.clone(), &block_prior(&blocks, &equal, vocab))?;
    let priors: Vec<f64> = spec.tasks.iter().map(|t| t.prior_weight).collect();
    drafter.set_distribution(empty, &block_prior(&blocks, &priors, vocab))?;

    Ok(SyntheticFamily {
        verifier,
        drafter,
        family: TaskFamily::new(tasks)?,
        blocks: spec
            .tasks
            .iter()
            .map(|t| t.id.clone())
            .zip(blocks)
            .collect(),
    })
}

/// Draws a random feasible family spec; used by the randomized validators.
///
/// With `fitness_ordered` every task satisfies `r_p ≤ r_q`.
pub fn random_family_spec(rng: &mut StreamRng, fitness_ordered: bool) -> FamilySpec {
    let m = rng.gen_range(2..=5);
    let block = rng.gen_range(3..=6);
    let vocab = m * block + rng.gen_range(0..=2);
    let tasks = (0..m)
        .map(|i| {
            let r_q = rng.gen_range(0.0..0.7);
            let r_p = if fitness_ordered || rng.gen_bool(0.8) {
                rng.gen_range(0.0..=r_q)
            } else {
                rng.gen_range(0.0..0.7)
            };
            TaskSpec {
                id: format!("task{i}"),
                support_size: rng.gen_range(1..=8),
                r_p,
                r_q,
                prior_weight: rng.gen_range(0.1..1.0),
            }
        })
        .collect();
    FamilySpec {
        vocab_size: vocab,
        context_order: 1,
        concentration: rng.gen_range(0.5..=1.0),
        tasks,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ConditionalModel;

    fn spec(pairs: &[(f64, f64)]) -> FamilySpec {
        FamilySpec {
            vocab_size: 8 * pairs.len(),
            context_order: 1,
            concentration: 0.9,
            tasks: pairs
                .iter()
                .enumerate()
                .map(|(i, &(r_p, r_q))| TaskSpec {
                    id: format!("t{i}"),
                    support_size: 10,
                    r_p,
                    r_q,
                    prior_weight: 1.0,
                })
                .collect(),
        }
    }

    fn measured(model: &TabularSoftmaxModel, task: &Task) -> f64 {
        let u = task.posterior().unwrap();
        task.prefixes()
            .iter()
            .map(|(c, w)| w * total_variation(&u.predict(c.tokens()), &model.predict(c.tokens())).unwrap())
            .sum()
    }

    #[test]
    fn zero_misfit_copies_posterior() {
        let fam = make_synthetic_family(&spec(&[(0.0, 0.0), (0.1, 0.3)]), 3).unwrap();
        let t = &fam.family.tasks()[0];
        let u = t.posterior().unwrap();
        for (c, _) in t.prefixes() {
            let a = u.predict(c.tokens());
            let b = fam.drafter.predict(c.tokens());
            for (x, y) in a.probs().iter().zip(b.probs()) {
                assert!((x - y).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn measured_misfit_matches_request() {
        let pairs = [(0.05, 0.30), (0.0, 0.6), (0.2, 0.2), (0.01, 0.85)];
        let fam = make_synthetic_family(&spec(&pairs), 17).unwrap();
        for (task, &(r_p, r_q)) in fam.family.tasks().iter().zip(&pairs) {
            assert!((measured(&fam.verifier, task) - r_p).abs() <= 0.02);
            assert!((measured(&fam.drafter, task) - r_q).abs() <= 0.02);
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let s = spec(&[(0.05, 0.3), (0.02, 0.1)]);
        let a = make_synthetic_family(&s, 9).unwrap();
        let b = make_synthetic_family(&s, 9).unwrap();
        assert_eq!(a.drafter.parameter_hash(), b.drafter.parameter_hash());
        assert_eq!(a.verifier.parameter_hash(), b.verifier.parameter_hash());
        assert_eq!(a.family, b.family);
        let c = make_synthetic_family(&s, 10).unwrap();
        assert_ne!(a.drafter.parameter_hash(), c.drafter.parameter_hash());
    }

    #[test]
    fn infeasible_requests_are_rejected() {
        let mut s = spec(&[(0.0, 0.99), (0.0, 0.1)]);
        assert!(matches!(make_synthetic_family(&s, 1), Err(SyntheticError::Infeasible(_))));
        s = spec(&[(0.0, 0.1)]);
        assert!(make_synthetic_family(&s, 1).is_err());
        s = spec(&[(0.0, 0.1), (0.0, 0.1)]);
        s.context_order = 0;
        assert!(make_synthetic_family(&s, 1).is_err());
        s = spec(&[(0.0, 0.1), (0.0, 0.1)]);
        s.tasks[0].support_size = 1000;
        assert!(make_synthetic_family(&s, 1).is_err());
    }

    #[test]
    fn extreme_misfit_is_reachable() {
        let mut s = spec(&[(0.0, 0.0), (0.0, 0.0)]);
        s.vocab_size = 4;
        s.tasks[1].r_q = 0.75;
        s.tasks.iter_mut().for_each(|t| t.support_size = 2);
        s.concentration = 1.0;
        let fam = make_synthetic_family(&s, 2).unwrap();
        assert!((measured(&fam.drafter, &fam.family.tasks()[1]) - 0.75).abs() <= 0.02);
    }

    #[test]
    fn random_specs_are_feasible() {
        let streams = RngStreams::new(4);
        for i in 0..50 {
            let mut rng = streams.stream("spec", i, 0);
            let s = random_family_spec(&mut rng, true);
            assert!(s.tasks.iter().all(|t| t.r_p <= t.r_q));
            make_synthetic_family(&s, i).unwrap();
        }
    }
}
