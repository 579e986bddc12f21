//! Speculative decoding fairness laboratory.
//!
//! Exact categorical arithmetic ([`dist`]), tabular softmax models
//! ([`model`]), the draft/verify loop and its speed-up analytics ([`engine`]),
//! task-level fairness metrics and bound validators ([`fairness`]), and the
//! fairness-weighted drafter fine-tuning loop with its baselines
//! ([`mitigation`]).

pub mod dist;
pub mod engine;
pub mod fairness;
pub mod mitigation;
pub mod model;
pub mod rng;
pub mod stats;
pub mod synthetic;
pub mod task;

pub use dist::{Categorical, DistError, Vocabulary};
pub use engine::{SpecConfig, StepTrace};
pub use fairness::{TaskMetrics, unfairness, certified_envelope};
pub use mitigation::{run_scdf, TrainerConfig};
pub use model::{ConditionalModel, Context, ContextKey, Role, TabularSoftmaxModel};
pub use rng::RngStreams;
pub use task::{Task, TaskFamily};
