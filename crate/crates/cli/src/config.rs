//! Experiment configuration: one strict TOML file per run.
//!
//! Every knob is spelled out and unknown keys are rejected, so a typo in a
//! privacy-critical hyperparameter fails the run instead of silently falling
//! back to a default.

use std::fs;
use std::path::Path;

use anadp_core::exposure::{CanaryKind, CanarySpec};
use anadp_core::model::ModelSpec;
use anadp_core::trainer::{TrainConfig, TrainMode};
use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

// ============================================================================

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub model: ModelSpec,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub comparison: Option<ComparisonConfig>,
    #[serde(default)]
    pub canary: Option<CanaryConfig>,
}

impl ExperimentConfig {
    /// Parses a TOML file, applies the CLI overrides, and validates the
    /// result. The returned config is what artifacts embed.
    pub fn load(path: &Path, seed: Option<u64>, mode: Option<TrainMode>) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: ExperimentConfig = toml::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        if let Some(seed) = seed {
            cfg.train.seed = seed;
        }
        if let Some(mode) = mode {
            cfg.train.mode = mode;
        }
        // A privacy budget in the file applies only to the private modes, so
        // the plain baseline of a shared experiment (whether the file's own
        // mode or a --mode override) drops it instead of failing validation.
        if cfg.train.mode == TrainMode::NonPrivate {
            cfg.train.privacy = None;
            cfg.train.sigma0 = None;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.clone().resolved()?;
        self.dataset.validate()?;
        if let Some(comparison) = &self.comparison {
            comparison.validate()?;
        }
        if let Some(canary) = &self.canary {
            canary.validate()?;
        }
        Ok(())
    }
}

pub fn parse_mode(name: &str) -> Result<TrainMode> {
    match name {
        "non_private" => Ok(TrainMode::NonPrivate),
        "dp_uniform" => Ok(TrainMode::DpUniform),
        "anadp" => Ok(TrainMode::Anadp),
        other => bail!("unknown mode '{other}'; expected non_private, dp_uniform, or anadp"),
    }
}

// ============================================================================

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Labeled rows from a file with header `f0,...,fk,label`.
    Csv {
        path: String,
        #[serde(default)]
        val_fraction: f64,
        /// Seed for the train/validation shuffle only.
        #[serde(default)]
        seed: u64,
    },
    /// Two Gaussian clusters separated along the first axis; the first half
    /// of the points is labeled 0, the rest 1.
    Blobs {
        dim: usize,
        n: usize,
        separation: f64,
        seed: u64,
        #[serde(default)]
        val_fraction: f64,
    },
    /// Points with a guaranteed margin around the first-axis hyperplane.
    Separable {
        dim: usize,
        n: usize,
        margin: f64,
        seed: u64,
        #[serde(default)]
        val_fraction: f64,
    },
    /// Synthetic token sequences drawn uniformly over the whole vocabulary,
    /// digits included, so canary digits compete with ordinary digit traffic.
    CanaryText {
        vocab_size: usize,
        sequences: usize,
        seq_len: usize,
        seed: u64,
    },
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            DatasetConfig::Csv { path, val_fraction, .. } => {
                if !Path::new(path).exists() {
                    bail!("csv dataset file '{path}' does not exist");
                }
                check_fraction(*val_fraction)
            }
            DatasetConfig::Blobs { dim, n, separation, val_fraction, .. } => {
                if *dim == 0 || *n < 2 {
                    bail!("blobs need dim >= 1 and n >= 2");
                }
                if !(*separation > 0.0) || !separation.is_finite() {
                    bail!("blob separation must be positive and finite");
                }
                check_fraction(*val_fraction)
            }
            DatasetConfig::Separable { dim, n, margin, val_fraction, .. } => {
                if *dim == 0 || *n < 2 {
                    bail!("separable data needs dim >= 1 and n >= 2");
                }
                if !(*margin > 0.0) || !margin.is_finite() {
                    bail!("margin must be positive and finite");
                }
                check_fraction(*val_fraction)
            }
            DatasetConfig::CanaryText { vocab_size, sequences, seq_len, .. } => {
                if *vocab_size <= crate::data::DIGIT_TOKENS as usize {
                    bail!(
                        "vocab_size must extend past the ten digit tokens (> {})",
                        crate::data::DIGIT_TOKENS
                    );
                }
                if *sequences == 0 || *seq_len < 2 {
                    bail!("canary_text needs at least one sequence of length >= 2");
                }
                Ok(())
            }
        }
    }

    pub fn val_fraction(&self) -> f64 {
        match self {
            DatasetConfig::Csv { val_fraction, .. }
            | DatasetConfig::Blobs { val_fraction, .. }
            | DatasetConfig::Separable { val_fraction, .. } => *val_fraction,
            DatasetConfig::CanaryText { .. } => 0.0,
        }
    }

    /// Seed for the train/validation shuffle; independent of the training
    /// seed so every mode sees the same split.
    pub fn split_seed(&self) -> u64 {
        match self {
            DatasetConfig::Csv { seed, .. }
            | DatasetConfig::Blobs { seed, .. }
            | DatasetConfig::Separable { seed, .. }
            | DatasetConfig::CanaryText { seed, .. } => *seed,
        }
    }
}

fn check_fraction(f: f64) -> Result<()> {
    if !(0.0..1.0).contains(&f) {
        bail!("val_fraction must lie in [0, 1), got {f}");
    }
    Ok(())
}

// ============================================================================

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComparisonConfig {
    /// Exactly two modes; the paired test reports the second minus the first.
    pub modes: Vec<TrainMode>,
    pub seeds: Vec<u64>,
}

impl ComparisonConfig {
    pub fn validate(&self) -> Result<()> {
        if self.modes.len() != 2 || self.modes[0] == self.modes[1] {
            bail!(
                "comparison needs exactly two distinct modes, got {:?}",
                self.modes.iter().map(|m| m.name()).collect::<Vec<_>>()
            );
        }
        if self.seeds.is_empty() {
            bail!("comparison needs at least one seed");
        }
        Ok(())
    }
}

// ============================================================================

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CanaryKindName {
    DigitSequence,
    NameToken,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CanaryConfig {
    pub kind: CanaryKindName,
    /// Digit canaries: number of digit tokens in the secret.
    #[serde(default)]
    pub pattern_length: u32,
    /// Name canaries: explicit candidate token sequences.
    #[serde(default)]
    pub candidates: Vec<Vec<u32>>,
    pub repetitions: usize,
    pub prefix: Vec<u32>,
    /// Seed for drawing the secret; independent of the training seed so the
    /// planted corpus is identical across modes and training seeds.
    #[serde(default)]
    pub seed: u64,
}

impl CanaryConfig {
    pub fn to_spec(&self) -> Result<CanarySpec> {
        let kind = match self.kind {
            CanaryKindName::DigitSequence => {
                if !self.candidates.is_empty() {
                    bail!("digit_sequence canaries take no candidate list");
                }
                CanaryKind::DigitSequence { pattern_length: self.pattern_length }
            }
            CanaryKindName::NameToken => {
                if self.pattern_length != 0 {
                    bail!("name_token canaries take no pattern_length");
                }
                CanaryKind::NameToken { candidates: self.candidates.clone() }
            }
        };
        Ok(CanarySpec {
            kind,
            repetitions: self.repetitions,
            prefix: self.prefix.clone(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.to_spec()?;
        Ok(())
    }
}
