//! Tabular softmax next-token models.
//!
//! A model of context order `k` keys each prefix by its last `k` tokens,
//! left-padded with the reserved index `vocab_size`. Every key owns a logit
//! row; keys without a stored row use the zero row, i.e. the uniform law.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dist::{Categorical, DistError};

pub type Token = usize;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Dist(#[from] DistError),
    #[error("token {token} out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange { token: usize, vocab_size: usize },
    #[error("logit row for key {key:?} has length {len}, expected {vocab_size}")]
    RowLength {
        key: Vec<usize>,
        len: usize,
        vocab_size: usize,
    },
    #[error("key {key:?} does not match context order {order}")]
    KeyShape { key: Vec<usize>, order: usize },
    #[error("non-finite logit in row {key:?}")]
    NonFinite { key: Vec<usize> },
    #[error("malformed model snapshot: {0}")]
    Snapshot(String),
}

/// Anything that maps a prefix to a next-token distribution.
pub trait ConditionalModel {
    fn vocab_size(&self) -> usize;
    fn predict(&self, context: &[Token]) -> Categorical;
}

impl<M: ConditionalModel + ?Sized> ConditionalModel for &M {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }

    fn predict(&self, context: &[Token]) -> Categorical {
        (**self).predict(context)
    }
}

/// A validated token prefix.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Context(Vec<Token>);

impl Context {
    pub fn new(tokens: Vec<Token>, vocab_size: usize) -> Result<Self, ModelError> {
        if let Some(&token) = tokens.iter().find(|&&t| t >= vocab_size) {
            return Err(ModelError::TokenOutOfRange { token, vocab_size });
        }
        Ok(Self(tokens))
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn tokens(&self) -> &[Token] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl AsRef<[Token]> for Context {
    fn as_ref(&self) -> &[Token] {
        &self.0
    }
}

/// The last `order` tokens of a prefix, left-padded.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ContextKey(Vec<usize>);

impl ContextKey {
    pub fn from_context(context: &[Token], order: usize, pad: usize) -> Self {
        let mut key = vec![pad; order.saturating_sub(context.len())];
        let start = context.len().saturating_sub(order);
        key.extend_from_slice(&context[start..]);
        Self(key)
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Drafter,
    Verifier,
    Posterior,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularSoftmaxModel {
    order: usize,
    vocab_size: usize,
    role: Role,
    rows: BTreeMap<ContextKey, Vec<f64>>,
}

impl TabularSoftmaxModel {
    pub fn new(vocab_size: usize, order: usize, role: Role) -> Result<Self, ModelError> {
        crate::dist::Vocabulary::new(vocab_size)?;
        Ok(Self {
            order,
            vocab_size,
            role,
            rows: BTreeMap::new(),
        })
    }

    /// Model whose rows for `keys` are i.i.d. `N(0, scale²)`-ish logits.
    pub fn with_random_rows<R: Rng + ?Sized>(
        vocab_size: usize,
        order: usize,
        role: Role,
        keys: impl IntoIterator<Item = ContextKey>,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        let mut model = Self::new(vocab_size, order, role)?;
        for key in keys {
            let row = (0..vocab_size)
                .map(|_| {
                    // sum of uniforms: cheap, symmetric and light-tailed
                    let z: f64 = (0..4).map(|_| rng.gen::<f64>() - 0.5).sum();
                    z * scale * 3f64.sqrt()
                })
                .collect();
            model.set_row(key, row)?;
        }
        Ok(model)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    pub fn pad(&self) -> usize {
        self.vocab_size
    }

    pub fn key(&self, context: &[Token]) -> ContextKey {
        ContextKey::from_context(context, self.order, self.pad())
    }

    pub fn rows(&self) -> impl Iterator<Item = (&ContextKey, &[f64])> {
        self.rows.iter().map(|(k, v)| (k, v.as_slice()))
    }

    pub fn row(&self, key: &ContextKey) -> Option<&[f64]> {
        self.rows.get(key).map(Vec::as_slice)
    }

    fn check_key(&self, key: &ContextKey) -> Result<(), ModelError> {
        if key.0.len() != self.order || key.0.iter().any(|&t| t > self.vocab_size) {
            return Err(ModelError::KeyShape {
                key: key.0.clone(),
                order: self.order,
            });
        }
        Ok(())
    }

    pub fn set_row(&mut self, key: ContextKey, logits: Vec<f64>) -> Result<(), ModelError> {
        self.check_key(&key)?;
        if logits.len() != self.vocab_size {
            return Err(ModelError::RowLength {
                key: key.0,
                len: logits.len(),
                vocab_size: self.vocab_size,
            });
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(ModelError::NonFinite { key: key.0 });
        }
        self.rows.insert(key, logits);
        Ok(())
    }

    /// Sets the row for `key` so that `predict` returns `probs` (entries must be positive).
    pub fn set_distribution(&mut self, key: ContextKey, probs: &Categorical) -> Result<(), ModelError> {
        self.set_row(key, probs.probs().iter().map(|p| p.ln()).collect())
    }

    pub fn predict_key(&self, key: &ContextKey) -> Categorical {
        match self.rows.get(key) {
            Some(row) => Categorical::softmax(row),
            None => Categorical::softmax(&vec![0.0; self.vocab_size]),
        }
    }

    /// `∂/∂logits` of `cross_entropy(target, predict(context))`, i.e. `q − target`.
    pub fn ce_gradient(&self, context: &[Token], target: &Categorical) -> Result<Vec<f64>, ModelError> {
        let q = self.predict(context);
        if target.len() != q.len() {
            return Err(DistError::VocabularyMismatch {
                left: target.len(),
                right: q.len(),
            }
            .into());
        }
        Ok(q.probs().iter().zip(target.probs()).map(|(a, b)| a - b).collect())
    }

    /// Adds `scale · gradient` to the stored rows, materializing zero rows as needed.
    pub fn apply(&mut self, update: &LogitGradient, scale: f64) {
        for (key, delta) in &update.rows {
            let row = self
                .rows
                .entry(key.clone())
                .or_insert_with(|| vec![0.0; self.vocab_size]);
            for (w, d) in row.iter_mut().zip(delta) {
                *w += scale * d;
            }
        }
    }

    /// SHA-256 over the order, vocabulary and every stored row.
    pub fn parameter_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.order as u64).to_le_bytes());
        hasher.update((self.vocab_size as u64).to_le_bytes());
        for (key, row) in &self.rows {
            hasher.update((key.0.len() as u64).to_le_bytes());
            for &k in &key.0 {
                hasher.update((k as u64).to_le_bytes());
            }
            for &w in row {
                hasher.update(w.to_bits().to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    pub fn snapshot(&self) -> ModelSnapshot {
        ModelSnapshot {
            order: self.order,
            vocab_size: self.vocab_size,
            rows: self
                .rows
                .iter()
                .map(|(key, logits)| SnapshotRow {
                    key: key.0.clone(),
                    logits: logits.clone(),
                })
                .collect(),
        }
    }

    pub fn from_snapshot(snapshot: ModelSnapshot, role: Role) -> Result<Self, ModelError> {
        let mut model = Self::new(snapshot.vocab_size, snapshot.order, role)?;
        for row in snapshot.rows {
            let key = ContextKey(row.key);
            if model.rows.contains_key(&key) {
                return Err(ModelError::Snapshot(format!("duplicate key {:?}", key.0)));
            }
            model.set_row(key, row.logits)?;
        }
        Ok(model)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.snapshot()).expect("snapshot serializes")
    }

    pub fn from_json(json: &str, role: Role) -> Result<Self, ModelError> {
        let snapshot: ModelSnapshot =
            serde_json::from_str(json).map_err(|e| ModelError::Snapshot(e.to_string()))?;
        Self::from_snapshot(snapshot, role)
    }
}

impl ConditionalModel for TabularSoftmaxModel {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn predict(&self, context: &[Token]) -> Categorical {
        debug_assert!(context.iter().all(|&t| t < self.vocab_size));
        self.predict_key(&self.key(context))
    }
}

/// JSON form of a model: `{order, vocab_size, rows: [{key, logits}]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSnapshot {
    pub order: usize,
    pub vocab_size: usize,
    pub rows: Vec<SnapshotRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapshotRow {
    pub key: Vec<usize>,
    pub logits: Vec<f64>,
}

/// Sparse gradient over the logit table; absent keys are zero rows.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LogitGradient {
    rows: BTreeMap<ContextKey, Vec<f64>>,
}

impl LogitGradient {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_row(&mut self, key: ContextKey, row: &[f64], weight: f64) {
        let entry = self
            .rows
            .entry(key)
            .or_insert_with(|| vec![0.0; row.len()]);
        for (e, r) in entry.iter_mut().zip(row) {
            *e += weight * r;
        }
    }

    pub fn add_scaled(&mut self, other: &LogitGradient, weight: f64) {
        for (key, row) in &other.rows {
            self.add_row(key.clone(), row, weight);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for row in self.rows.values_mut() {
            row.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn norm(&self) -> f64 {
        self.rows
            .values()
            .flat_map(|r| r.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn row(&self, key: &ContextKey) -> Option<&[f64]> {
        self.rows.get(key).map(Vec::as_slice)
    }

    pub fn rows(&self) -> impl Iterator<Item = (&ContextKey, &[f64])> {
        self.rows.iter().map(|(k, v)| (k, v.as_slice()))
    }

    pub fn rows_mut(&mut self) -> impl Iterator<Item = (&ContextKey, &mut Vec<f64>)> {
        self.rows.iter_mut()
    }

    pub fn is_zero(&self) -> bool {
        self.rows.values().all(|r| r.iter().all(|&x| x == 0.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::cross_entropy;
    use proptest::prelude::{prop, proptest, prop_assert};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn keys_are_left_padded() {
        assert_eq!(ContextKey::from_context(&[], 2, 9).as_slice(), &[9, 9]);
        assert_eq!(ContextKey::from_context(&[4], 2, 9).as_slice(), &[9, 4]);
        assert_eq!(ContextKey::from_context(&[1, 2, 3], 2, 9).as_slice(), &[2, 3]);
        assert!(ContextKey::from_context(&[1, 2, 3], 0, 9).as_slice().is_empty());
    }

    #[test]
    fn zero_logits_predict_uniform() {
        let m = TabularSoftmaxModel::new(4, 1, Role::Drafter).unwrap();
        assert_eq!(m.predict(&[2]).probs(), &[0.25; 4]);
    }

    #[test]
    fn closed_form_softmax() {
        let mut m = TabularSoftmaxModel::new(2, 1, Role::Verifier).unwrap();
        m.set_row(m.key(&[0]), vec![3f64.ln(), 0.0]).unwrap();
        let d = m.predict(&[0]);
        assert!((d.prob(0) - 0.75).abs() < 1e-15);
        assert!((d.prob(1) - 0.25).abs() < 1e-15);
        assert_eq!(m.predict(&[0]), m.predict(&[0]));
        // a different key still falls back to uniform
        assert_eq!(m.predict(&[1]).probs(), &[0.5, 0.5]);
    }

    #[test]
    fn set_row_validates() {
        let mut m = TabularSoftmaxModel::new(3, 1, Role::Drafter).unwrap();
        assert!(matches!(
            m.set_row(ContextKey(vec![0]), vec![0.0; 2]),
            Err(ModelError::RowLength { .. })
        ));
        assert!(matches!(
            m.set_row(ContextKey(vec![0, 1]), vec![0.0; 3]),
            Err(ModelError::KeyShape { .. })
        ));
        assert!(matches!(
            m.set_row(ContextKey(vec![0]), vec![f64::NAN, 0.0, 0.0]),
            Err(ModelError::NonFinite { .. })
        ));
        assert!(Context::new(vec![0, 3], 3).is_err());
    }

    #[test]
    fn gradient_examples() {
        let m = TabularSoftmaxModel::new(2, 1, Role::Drafter).unwrap();
        let target = Categorical::new(vec![1.0, 0.0]).unwrap();
        assert_eq!(m.ce_gradient(&[0], &target).unwrap(), vec![-0.5, 0.5]);
        let q = m.predict(&[1]);
        assert!(m.ce_gradient(&[1], &q).unwrap().iter().all(|&g| g == 0.0));
    }

    fn central_difference(m: &TabularSoftmaxModel, ctx: &[usize], target: &Categorical, h: f64) -> Vec<f64> {
        let key = m.key(ctx);
        let base = m.row(&key).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; m.vocab_size()]);
        (0..base.len())
            .map(|i| {
                let eval = |delta: f64| {
                    let mut row = base.clone();
                    row[i] += delta;
                    let q = Categorical::softmax(&row);
                    cross_entropy(target, &q).unwrap()
                };
                (eval(h) - eval(-h)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let v = rng.gen_range(2..8);
            let keys = (0..v).map(|t| ContextKey(vec![t]));
            let m = TabularSoftmaxModel::with_random_rows(v, 1, Role::Drafter, keys, 1.5, &mut rng).unwrap();
            let w: Vec<f64> = (0..v).map(|_| rng.gen::<f64>()).collect();
            let target = Categorical::from_weights(&w).unwrap();
            let ctx = [rng.gen_range(0..v)];
            let analytic = m.ce_gradient(&ctx, &target).unwrap();
            let numeric = central_difference(&m, &ctx, &target, 1e-5);
            let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
            assert!(diff / scale <= 1e-6, "relative error {}", diff / scale);
            assert!(analytic.iter().sum::<f64>().abs() < 1e-14);
        }
    }

    #[test]
    fn snapshot_round_trip_is_lossless() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let keys = [ContextKey(vec![7, 1]), ContextKey(vec![0, 3])];
        let m = TabularSoftmaxModel::with_random_rows(7, 2, Role::Drafter, keys, 2.0, &mut rng).unwrap();
        let json = m.to_json();
        let back = TabularSoftmaxModel::from_json(&json, Role::Drafter).unwrap();
        assert_eq!(m, back);
        assert_eq!(m.parameter_hash(), back.parameter_hash());
        let value: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(value["order"], 2);
        assert_eq!(value["vocab_size"], 7);
        assert_eq!(value["rows"][0]["key"], serde_json::json!([0, 3]));
    }

    #[test]
    fn snapshot_rejects_unknown_fields() {
        let json = r#"{"order":1,"vocab_size":2,"rows":[],"extra":1}"#;
        assert!(TabularSoftmaxModel::from_json(json, Role::Drafter).is_err());
    }

    #[test]
    fn apply_moves_rows() {
        let mut m = TabularSoftmaxModel::new(2, 1, Role::Drafter).unwrap();
        let before = m.parameter_hash();
        let mut g = LogitGradient::new();
        g.add_row(m.key(&[1]), &[1.0, -1.0], 1.0);
        m.apply(&g, -0.5);
        assert_eq!(m.row(&m.key(&[1])).unwrap(), &[-0.5, 0.5]);
        assert_ne!(before, m.parameter_hash());
    }

    proptest! {
        #[test]
        fn predict_is_shift_invariant(row in prop::collection::vec(-5.0f64..5.0, 2..10), shift in -50.0f64..50.0) {
            let mut m = TabularSoftmaxModel::new(row.len(), 1, Role::Drafter).unwrap();
            let key = m.key(&[0]);
            m.set_row(key.clone(), row.clone()).unwrap();
            let a = m.predict(&[0]);
            m.set_row(key, row.iter().map(|x| x + shift).collect()).unwrap();
            let b = m.predict(&[0]);
            for (x, y) in a.probs().iter().zip(b.probs()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }
}
