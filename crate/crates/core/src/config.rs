//! The run configuration: a single JSON document holding the generation
//! knobs, the backend to drive, and the corpus/output paths. Unknown keys
//! are rejected so hyperparameter typos fail fast instead of silently
//! running defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    Backend, BackendError, BiasMatrix, BiasedMixtureBackend, BiasedMixtureParams, FixtureBackend,
    RemoteBackend,
};
use crate::engine::{GenerationConfig, Method};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn default_alpha1() -> f64 {
    1.0
}
fn default_gamma() -> f64 {
    0.02
}
fn default_beta0() -> f64 {
    10.0
}
fn default_beta1() -> f64 {
    30.0
}
fn default_mu() -> f64 {
    1e-3
}
fn default_visual_fraction() -> f64 {
    0.25
}
fn default_beta_p() -> f64 {
    0.1
}
fn default_top_p() -> Option<f64> {
    Some(0.9)
}
fn default_temperature() -> f64 {
    1.0
}
fn default_max_new_tokens() -> usize {
    16
}
fn default_attention_layer() -> usize {
    2
}
fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}
fn default_method() -> Method {
    Method::Crops
}
fn default_head_count() -> usize {
    2
}
fn default_timeout_ms() -> u64 {
    30_000
}

/// Which backend to build and its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendSpec {
    BiasedMixture {
        vocab_size: usize,
        #[serde(default = "default_head_count")]
        head_count: usize,
        /// Half-open `[lo, hi)` range of object token ids.
        object_range: (u32, u32),
        g_hi: f64,
        w0: f64,
        kappa: f64,
        /// Sparse `{from: {to: weight}}` bias entries.
        #[serde(default)]
        bias: BTreeMap<u32, BTreeMap<u32, f64>>,
        #[serde(default)]
        seed: u64,
    },
    Fixture {
        path: PathBuf,
    },
    Remote {
        endpoint: String,
        vocab_size: usize,
        head_count: usize,
        #[serde(default = "default_timeout_ms")]
        timeout_ms: u64,
    },
}

/// Everything one experiment run needs, with the shared default
/// configuration baked in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default = "default_alpha1")]
    pub alpha1: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_beta0")]
    pub beta0: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_mu")]
    pub mu: f64,
    #[serde(default = "default_visual_fraction")]
    pub visual_fraction: f64,
    #[serde(default = "default_beta_p")]
    pub beta_p: f64,
    /// Nucleus mass; JSON `null` selects greedy decoding.
    #[serde(default = "default_top_p")]
    pub top_p: Option<f64>,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: usize,
    #[serde(default)]
    pub t0: u64,
    #[serde(default = "default_attention_layer")]
    pub attention_layer: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub backend: BackendSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Path to the token-id to object-name map used by caption scoring.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_map: Option<PathBuf>,
    /// First-token id read as a "yes" answer in binary VQA scoring.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pope_yes_token: Option<u32>,
    /// First-token id read as a "no" answer in binary VQA scoring.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pope_no_token: Option<u32>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// The engine knobs for one seed.
    pub fn generation_config(&self, seed: u64) -> GenerationConfig {
        GenerationConfig {
            method: self.method,
            alpha1: self.alpha1,
            gamma: self.gamma,
            beta0: self.beta0,
            beta1: self.beta1,
            mu: self.mu,
            visual_fraction: self.visual_fraction,
            beta_p: self.beta_p,
            top_p: self.top_p,
            temperature: self.temperature,
            max_new_tokens: self.max_new_tokens,
            t0: self.t0,
            seed,
            attention_layer: self.attention_layer,
        }
    }

    pub fn build_backend(&self) -> Result<Box<dyn Backend>, ConfigError> {
        match &self.backend {
            BackendSpec::BiasedMixture {
                vocab_size,
                head_count,
                object_range,
                g_hi,
                w0,
                kappa,
                bias,
                seed,
            } => {
                let bias = BiasMatrix::from_sparse(*vocab_size, bias)?;
                let backend = BiasedMixtureBackend::new(BiasedMixtureParams {
                    vocab_size: *vocab_size,
                    head_count: *head_count,
                    attention_layer: self.attention_layer,
                    object_range: *object_range,
                    g_hi: *g_hi,
                    w0: *w0,
                    kappa: *kappa,
                    bias,
                    seed: *seed,
                })?;
                Ok(Box::new(backend))
            }
            BackendSpec::Fixture { path } => {
                let backend = FixtureBackend::from_path(path, self.attention_layer)?;
                Ok(Box::new(backend))
            }
            BackendSpec::Remote {
                endpoint,
                vocab_size,
                head_count,
                timeout_ms,
            } => {
                let backend = RemoteBackend::new(
                    endpoint.clone(),
                    *vocab_size,
                    *head_count,
                    self.attention_layer,
                    Duration::from_millis(*timeout_ms),
                )?;
                Ok(Box::new(backend))
            }
        }
    }

    /// Validates the generation knobs and the seed list.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.seeds.is_empty() {
            return Err(ConfigError::Invalid("seeds must be non-empty".into()));
        }
        self.generation_config(0)
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_json() -> &'static str {
        r#"{
            "backend": {
                "kind": "biased_mixture",
                "vocab_size": 8,
                "object_range": [2, 4],
                "g_hi": 2.0,
                "w0": 1.0,
                "kappa": 0.5,
                "bias": {"2": {"3": 1.5}}
            }
        }"#
    }

    #[test]
    fn defaults_match_the_shared_configuration() {
        let cfg = RunConfig::parse(minimal_json()).unwrap();
        assert_eq!(cfg.method, Method::Crops);
        assert_eq!(cfg.alpha1, 1.0);
        assert_eq!(cfg.gamma, 0.02);
        assert_eq!(cfg.beta0, 10.0);
        assert_eq!(cfg.beta1, 30.0);
        assert_eq!(cfg.mu, 1e-3);
        assert_eq!(cfg.visual_fraction, 0.25);
        assert_eq!(cfg.beta_p, 0.1);
        assert_eq!(cfg.top_p, Some(0.9));
        assert_eq!(cfg.temperature, 1.0);
        assert_eq!(cfg.attention_layer, 2);
        assert_eq!(cfg.seeds, vec![0, 1, 2]);
    }

    #[test]
    fn round_trip_is_identity() {
        let cfg = RunConfig::parse(minimal_json()).unwrap();
        let json = cfg.to_json();
        let back = RunConfig::parse(&json).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = r#"{
            "alpha_one": 2.0,
            "backend": {"kind": "fixture", "path": "f.jsonl"}
        }"#;
        assert!(matches!(RunConfig::parse(text), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn null_top_p_selects_greedy() {
        let text = r#"{
            "top_p": null,
            "backend": {"kind": "fixture", "path": "f.jsonl"}
        }"#;
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.top_p, None);
    }

    #[test]
    fn builds_the_analytic_backend() {
        let cfg = RunConfig::parse(minimal_json()).unwrap();
        let backend = cfg.build_backend().unwrap();
        assert_eq!(backend.descriptor().vocab_size, 8);
        assert_eq!(backend.descriptor().head_count, 2);
        assert_eq!(backend.descriptor().attention_layer, 2);
    }

    #[test]
    fn validates_seeds_and_knobs() {
        let mut cfg = RunConfig::parse(minimal_json()).unwrap();
        cfg.seeds.clear();
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::parse(minimal_json()).unwrap();
        cfg.top_p = Some(2.0);
        assert!(cfg.validate().is_err());
    }
}
