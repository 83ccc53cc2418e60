//! Strict run configuration. Every tunable lives here so that a run is fully
//! described by its config plus `--seed`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::io::{canonical_json, sha256_hex};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    Raw,
    Tan,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Jmrn,
    Baseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Consensus {
    Max,
    Avg,
}

/// Which gate values the batch-shaping loss sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegTarget {
    Sampled,
    Deterministic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankLoss {
    Logistic,
    Margin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Aggregation channels C.
    pub channels: usize,
    pub norm: NormMode,
    pub model: ModelKind,
    pub beta: usize,
    pub gamma: usize,
    pub flip_prob: f64,
    pub c_dim: usize,
    pub tau: f64,
    pub prior_a: f64,
    pub prior_b: f64,
    pub lambda_reg: f64,
    pub reg_target: RegTarget,
    pub lr: f64,
    pub patience: usize,
    pub decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub multi_label: bool,
    pub oracle_k: usize,
    pub k_select: usize,
    pub consensus: Consensus,
    pub ranker_loss: RankLoss,
    pub ranker_margin: f64,
    pub ranker_epochs: usize,
    pub ranker_pairs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            channels: 3,
            norm: NormMode::Tan,
            model: ModelKind::Jmrn,
            beta: 2,
            gamma: 2,
            flip_prob: 0.5,
            c_dim: 32,
            tau: 2.0 / 3.0,
            prior_a: 0.6,
            prior_b: 0.4,
            lambda_reg: 0.1,
            reg_target: RegTarget::Sampled,
            lr: 1e-4,
            patience: 3,
            decay: 0.5,
            epochs: 20,
            batch_size: 16,
            multi_label: false,
            oracle_k: 6,
            k_select: 14,
            consensus: Consensus::Avg,
            ranker_loss: RankLoss::Logistic,
            ranker_margin: 1.0,
            ranker_epochs: 10,
            ranker_pairs: 256,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: RunConfig = serde_json::from_str(text).map_err(|e| CoreError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            CoreError::Config(d) => CoreError::Config(format!("{}: {}", path.display(), d)),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(CoreError::Config(m.to_string()));
        if self.channels < 2 {
            return fail("channels must be at least 2");
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return fail("flip_prob must lie in [0, 1]");
        }
        if self.c_dim == 0 {
            return fail("c_dim must be positive");
        }
        if !(self.tau > 0.0) {
            return fail("tau must be positive");
        }
        if !(self.prior_a > 0.0 && self.prior_b > 0.0) {
            return fail("prior_a and prior_b must be positive");
        }
        if !(self.lambda_reg >= 0.0) {
            return fail("lambda_reg must be non-negative");
        }
        if !(self.lr > 0.0) {
            return fail("lr must be positive");
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return fail("decay must lie in (0, 1]");
        }
        if self.batch_size < 2 {
            return fail("batch_size must be at least 2 (batch norm and batch shaping need it)");
        }
        if self.k_select == 0 {
            return fail("k_select must be at least 1");
        }
        if self.oracle_k == 0 {
            return fail("oracle_k must be at least 1");
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let s = canonical_json(self).expect("config serializes");
        sha256_hex(s.as_bytes())[..16].to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let e = RunConfig::from_json(r#"{"lr": 0.001, "learning_rate": 1}"#).unwrap_err();
        assert!(e.to_string().contains("learning_rate"), "{e}");
    }

    #[test]
    fn partial_documents_take_defaults() {
        let c = RunConfig::from_json(r#"{"beta": 4}"#).unwrap();
        assert_eq!(c.beta, 4);
        assert_eq!(c.gamma, RunConfig::default().gamma);
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.lambda_reg = 0.0;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_json(r#"{"tau": 0}"#).is_err());
        assert!(RunConfig::from_json(r#"{"batch_size": 1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"norm": "minmax"}"#).is_err());
    }
}
