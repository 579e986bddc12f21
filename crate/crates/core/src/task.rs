//! Tasks: finite distributions over prefixes, optionally with the latent
//! next-token posterior that generated them.

use std::collections::HashSet;

use rand::Rng;
use thiserror::Error;

use crate::model::{Context, TabularSoftmaxModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TaskError {
    #[error("task {0:?} has an empty prefix distribution")]
    EmptySupport(String),
    #[error("task {id:?}: prefix weight {weight} is invalid")]
    InvalidWeight { id: String, weight: f64 },
    #[error("task {id:?}: prefix weights sum to {sum}")]
    NotNormalized { id: String, sum: f64 },
    #[error("task family needs at least 2 tasks, got {0}")]
    TooFewTasks(usize),
    #[error("duplicate task id {0:?}")]
    DuplicateId(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    id: String,
    prefixes: Vec<(Context, f64)>,
    posterior: Option<TabularSoftmaxModel>,
}

impl Task {
    /// Weights within 1e-6 of summing to one are renormalized.
    pub fn new(
        id: impl Into<String>,
        prefixes: Vec<(Context, f64)>,
        posterior: Option<TabularSoftmaxModel>,
    ) -> Result<Self, TaskError> {
        let id = id.into();
        if prefixes.is_empty() {
            return Err(TaskError::EmptySupport(id));
        }
        if let Some(&(_, weight)) = prefixes.iter().find(|(_, w)| !w.is_finite() || *w < 0.0) {
            return Err(TaskError::InvalidWeight { id, weight });
        }
        let sum: f64 = prefixes.iter().map(|(_, w)| w).sum();
        let prefixes = if (sum - 1.0).abs() <= 1e-12 {
            prefixes
        } else if (sum - 1.0).abs() <= 1e-6 {
            prefixes.into_iter().map(|(c, w)| (c, w / sum)).collect()
        } else {
            return Err(TaskError::NotNormalized { id, sum });
        };
        Ok(Self {
            id,
            prefixes,
            posterior,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn prefixes(&self) -> &[(Context, f64)] {
        &self.prefixes
    }

    pub fn support_size(&self) -> usize {
        self.prefixes.len()
    }

    pub fn posterior(&self) -> Option<&TabularSoftmaxModel> {
        self.posterior.as_ref()
    }

    pub fn sample_prefix<R: Rng + ?Sized>(&self, rng: &mut R) -> &Context {
        let u: f64 = rng.gen();
        let mut cumulative = 0.0;
        for (context, weight) in &self.prefixes {
            cumulative += weight;
            if u < cumulative {
                return context;
            }
        }
        &self
            .prefixes
            .iter()
            .rev()
            .find(|(_, w)| *w > 0.0)
            .unwrap_or(&self.prefixes[self.prefixes.len() - 1])
            .0
    }

    /// `n` i.i.d. prefixes.
    pub fn sample_batch<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Context> {
        (0..n).map(|_| self.sample_prefix(rng).clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskFamily {
    tasks: Vec<Task>,
}

impl TaskFamily {
    pub fn new(tasks: Vec<Task>) -> Result<Self, TaskError> {
        if tasks.len() < 2 {
            return Err(TaskError::TooFewTasks(tasks.len()));
        }
        let mut seen = HashSet::new();
        for t in &tasks {
            if !seen.insert(t.id.clone()) {
                return Err(TaskError::DuplicateId(t.id.clone()));
            }
        }
        Ok(Self { tasks })
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Task> {
        self.tasks.iter().find(|t| t.id == id)
    }

    pub fn into_tasks(self) -> Vec<Task> {
        self.tasks
    }
}
