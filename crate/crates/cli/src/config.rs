//! Experiment configuration: strict JSON with documented defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use specfair_core::mitigation::TrainerConfig;
use specfair_core::synthetic::{FamilySpec, TaskSpec};
use specfair_core::SpecConfig;
use thiserror::Error;

/// Environment variable that overrides the configured master seed.
pub const SEED_ENV: &str = "SPECFAIR_SEED";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: cannot read config: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: line {line}, column {column}: at `{field}`: {message}")]
    Parse {
        path: PathBuf,
        field: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid config: `{field}`: {message}")]
    Invalid { field: String, message: String },
}

fn invalid(field: &str, message: impl ToString) -> ConfigError {
    ConfigError::Invalid {
        field: field.to_string(),
        message: message.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilyConfig {
    /// Mass of each task's latent posterior kept inside its own token block.
    #[serde(default = "default_concentration")]
    pub concentration: f64,
    pub tasks: Vec<TaskSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub emit_svg: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/latest"),
            emit_svg: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub vocab_size: usize,
    #[serde(default = "default_context_order")]
    pub context_order: usize,
    pub family: FamilyConfig,
    #[serde(default = "default_spec")]
    pub spec: SpecConfig,
    #[serde(default)]
    pub trainer: TrainerConfig,
    #[serde(default)]
    pub outputs: OutputConfig,
    #[serde(default = "default_epsilon_floor")]
    pub epsilon_floor: f64,
    /// Tasks with more prefixes than this are measured by Monte Carlo.
    #[serde(default = "default_max_exact_support")]
    pub max_exact_support: usize,
    #[serde(default = "default_monte_carlo_samples")]
    pub monte_carlo_samples: usize,
}

fn default_concentration() -> f64 {
    0.9
}
fn default_context_order() -> usize {
    1
}
fn default_spec() -> SpecConfig {
    SpecConfig {
        gamma: 5,
        cost_ratio: 0.1,
    }
}
fn default_epsilon_floor() -> f64 {
    specfair_core::dist::EPSILON_FLOOR
}
fn default_max_exact_support() -> usize {
    4096
}
fn default_monte_carlo_samples() -> usize {
    10_000
}

impl ExperimentConfig {
    pub fn family_spec(&self) -> FamilySpec {
        FamilySpec {
            vocab_size: self.vocab_size,
            context_order: self.context_order,
            concentration: self.family.concentration,
            tasks: self.family.tasks.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.spec.gamma == 0 {
            return Err(invalid("spec.gamma", "must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.spec.cost_ratio) {
            return Err(invalid("spec.cost_ratio", format!("{} outside [0, 1)", self.spec.cost_ratio)));
        }
        self.trainer
            .validate()
            .map_err(|e| invalid("trainer", e))?;
        if !(self.epsilon_floor > 0.0 && self.epsilon_floor < 1e-3) {
            return Err(invalid("epsilon_floor", format!("{} outside (0, 1e-3)", self.epsilon_floor)));
        }
        if self.monte_carlo_samples < 2 {
            return Err(invalid("monte_carlo_samples", "must be >= 2"));
        }
        for (i, t) in self.family.tasks.iter().enumerate() {
            if t.id.is_empty() || t.id.contains([',', '"', '\n', '\r']) {
                return Err(invalid(&format!("family.tasks[{i}].id"), "must be non-empty without commas, quotes or newlines"));
            }
        }
        // the generator owns the remaining feasibility rules
        specfair_core::synthetic::make_synthetic_family(&self.family_spec(), self.seed)
            .map_err(|e| invalid("family", e))?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Parses and validates a config document; `path` only labels diagnostics.
pub fn parse_config(text: &str, path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let mut de = serde_json::Deserializer::from_str(text);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let field = e.path().to_string();
        let inner = e.into_inner();
        ConfigError::Parse {
            path: path.to_path_buf(),
            field,
            line: inner.line(),
            column: inner.column(),
            message: inner.to_string(),
        }
    })?;
    de.end().map_err(|e| ConfigError::Parse {
        path: path.to_path_buf(),
        field: ".".into(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text, path)
}

/// Seed precedence: flag, then `SPECFAIR_SEED`, then the config value.
pub fn resolve_seed(config_seed: u64, flag: Option<u64>, env: Option<&str>) -> Result<u64, ConfigError> {
    if let Some(seed) = flag {
        return Ok(seed);
    }
    match env {
        Some(raw) => raw
            .trim()
            .parse()
            .map_err(|_| invalid(SEED_ENV, format!("{raw:?} is not an unsigned integer"))),
        None => Ok(config_seed),
    }
}

/// Applies the resolved seed; the trainer always follows the master seed.
pub fn apply_seed(cfg: &mut ExperimentConfig, seed: u64) {
    cfg.seed = seed;
    cfg.trainer.seed = seed;
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "vocab_size": 8,
        "family": {"tasks": [
            {"id": "a", "support_size": 3, "r_p": 0.0, "r_q": 0.1},
            {"id": "b", "support_size": 3, "r_p": 0.0, "r_q": 0.2}
        ]}
    }"#;

    fn parse(text: &str) -> Result<ExperimentConfig, ConfigError> {
        parse_config(text, Path::new("test.json"))
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = parse(MINIMAL).unwrap();
        assert_eq!(cfg.seed, 0);
        assert_eq!(cfg.context_order, 1);
        assert_eq!(cfg.spec, default_spec());
        assert_eq!(cfg.trainer, TrainerConfig::default());
        assert_eq!(cfg.family.concentration, 0.9);
        assert_eq!(cfg.family.tasks[0].prior_weight, 1.0);
        assert!(cfg.outputs.emit_svg);
    }

    #[test]
    fn unknown_key_reports_location() {
        let text = MINIMAL.replace("\"vocab_size\": 8,", "\"vocab_size\": 8,\n \"gama\": 3,");
        match parse(&text) {
            Err(ConfigError::Parse { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains("gama"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
        let nested = MINIMAL.replace("\"r_p\": 0.0, \"r_q\": 0.1", "\"r_p\": 0.0, \"r_q\": 0.1, \"rq\": 1");
        match parse(&nested) {
            Err(ConfigError::Parse { field, .. }) => assert_eq!(field, "family.tasks[0].rq"),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_spec_values() {
        let with_spec = |spec: &str| MINIMAL.replace("\"vocab_size\": 8,", &format!("\"vocab_size\": 8, \"spec\": {spec},"));
        assert!(matches!(
            parse(&with_spec(r#"{"gamma": 0, "cost_ratio": 0.1}"#)),
            Err(ConfigError::Invalid { field, .. }) if field == "spec.gamma"
        ));
        assert!(matches!(
            parse(&with_spec(r#"{"gamma": 2, "cost_ratio": 1.0}"#)),
            Err(ConfigError::Invalid { field, .. }) if field == "spec.cost_ratio"
        ));
        assert!(matches!(parse(&MINIMAL.replace("\"vocab_size\": 8", "\"vocab_size\": 3")), Err(ConfigError::Invalid { field, .. }) if field == "family"));
        assert!(matches!(parse(&MINIMAL.replace("\"vocab_size\": 8,", "")), Err(ConfigError::Parse { .. })));
    }

    #[test]
    fn seed_precedence() {
        assert_eq!(resolve_seed(1, Some(3), Some("2")).unwrap(), 3);
        assert_eq!(resolve_seed(1, None, Some("2")).unwrap(), 2);
        assert_eq!(resolve_seed(1, None, None).unwrap(), 1);
        assert!(resolve_seed(1, None, Some("x")).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = parse(MINIMAL).unwrap();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        apply_seed(&mut b, 9);
        assert_ne!(a.hash(), b.hash());
        assert_eq!(b.trainer.seed, 9);
    }
}
