//! Dataset synthesis and ingestion.
//!
//! Generators are keyed by their own seed, never the training seed, so the
//! same config yields the same data across modes and training seeds; that is
//! what makes paired comparisons paired.

use std::fs;

use anadp_core::exposure::TextDataset;
use anadp_core::model::{Example, Features};
use anadp_core::rng::{derive, DetRng};
use anyhow::{bail, Context, Result};

use crate::config::DatasetConfig;

/// Number of token ids with digit meaning (0 through 9); digit canaries are
/// spelled with these, and filler text emits them alongside every other
/// token so the digit logits carry ordinary traffic in all modes.
pub const DIGIT_TOKENS: u32 = 10;

const BLOBS_TAG: u64 = u64::from_le_bytes(*b"blobsgen");
const SEPARABLE_TAG: u64 = u64::from_le_bytes(*b"sepplane");
const TEXT_TAG: u64 = u64::from_le_bytes(*b"fillertx");
const SPLIT_TAG: u64 = u64::from_le_bytes(*b"valsplit");

// ============================================================================

pub enum LoadedDataset {
    Labeled(Vec<Example>),
    Text(TextDataset),
}

pub fn load_dataset(block: &DatasetConfig) -> Result<LoadedDataset> {
    match block {
        DatasetConfig::Csv { path, .. } => Ok(LoadedDataset::Labeled(load_csv(path)?)),
        DatasetConfig::Blobs { dim, n, separation, seed, .. } => {
            Ok(LoadedDataset::Labeled(gen_blobs(*dim, *n, *separation, *seed)))
        }
        DatasetConfig::Separable { dim, n, margin, seed, .. } => {
            Ok(LoadedDataset::Labeled(gen_separable(*dim, *n, *margin, *seed)))
        }
        DatasetConfig::CanaryText { vocab_size, sequences, seq_len, seed } => Ok(
            LoadedDataset::Text(gen_canary_text(*vocab_size, *sequences, *seq_len, *seed)?),
        ),
    }
}

// ============================================================================

pub fn gen_blobs(dim: usize, n: usize, separation: f64, seed: u64) -> Vec<Example> {
    let mut rng = DetRng::new(derive(seed, BLOBS_TAG), 0);
    (0..n)
        .map(|i| {
            let label = usize::from(i >= n / 2);
            let mut features: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
            features[0] += if label == 0 { -separation / 2.0 } else { separation / 2.0 };
            Example { features: Features::Dense(features), label }
        })
        .collect()
}

pub fn gen_separable(dim: usize, n: usize, margin: f64, seed: u64) -> Vec<Example> {
    let mut rng = DetRng::new(derive(seed, SEPARABLE_TAG), 0);
    (0..n)
        .map(|_| {
            let raw = rng.normal();
            let label = usize::from(raw >= 0.0);
            let sign = if label == 1 { 1.0 } else { -1.0 };
            let mut features: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
            features[0] = sign * (margin / 2.0 + raw.abs());
            Example { features: Features::Dense(features), label }
        })
        .collect()
}

pub fn gen_canary_text(
    vocab_size: usize,
    sequences: usize,
    seq_len: usize,
    seed: u64,
) -> Result<TextDataset> {
    let mut rng = DetRng::new(derive(seed, TEXT_TAG), 0);
    let seqs: Vec<Vec<u32>> = (0..sequences)
        .map(|_| (0..seq_len).map(|_| rng.below(vocab_size as u64) as u32).collect())
        .collect();
    Ok(TextDataset::new(seqs, vocab_size)?)
}

// ============================================================================

pub fn load_csv(path: &str) -> Result<Vec<Example>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading csv dataset '{path}'"))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| anyhow::anyhow!("csv '{path}' is empty"))?;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    if columns.len() < 2 || *columns.last().unwrap() != "label" {
        bail!("csv header must be `f0,...,fk,label`, got '{header}'");
    }
    let dim = columns.len() - 1;
    for (i, column) in columns[..dim].iter().enumerate() {
        if *column != format!("f{i}") {
            bail!("csv header column {} must be `f{i}`, got '{column}'", i + 1);
        }
    }

    let mut examples = Vec::new();
    for (index, line) in lines.enumerate() {
        let line_no = index + 2;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != dim + 1 {
            bail!("line {line_no}: expected {} fields, got {}", dim + 1, fields.len());
        }
        let mut features = Vec::with_capacity(dim);
        for (column, field) in fields[..dim].iter().enumerate() {
            let value: f64 = field
                .parse()
                .map_err(|_| anyhow::anyhow!("line {line_no}: '{field}' is not a number"))?;
            if !value.is_finite() {
                bail!("line {line_no}: feature f{column} is not finite");
            }
            features.push(value);
        }
        let label: usize = fields[dim].parse().map_err(|_| {
            anyhow::anyhow!(
                "line {line_no}: label '{}' must be a non-negative integer",
                fields[dim]
            )
        })?;
        examples.push(Example { features: Features::Dense(features), label });
    }
    if examples.is_empty() {
        bail!("csv '{path}' has a header but no data rows");
    }
    Ok(examples)
}

// ============================================================================

/// Shuffles with the dataset's own seed, then carves off the validation tail.
pub fn split_train_val(
    examples: Vec<Example>,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<Example>, Option<Vec<Example>>)> {
    if fraction == 0.0 {
        return Ok((examples, None));
    }
    let n = examples.len();
    let val_n = ((n as f64) * fraction).round().max(1.0) as usize;
    if val_n >= n {
        bail!("val_fraction {fraction} leaves no training data out of {n} examples");
    }
    let mut indices: Vec<usize> = (0..n).collect();
    DetRng::new(derive(seed, SPLIT_TAG), 0).shuffle(&mut indices);
    let mut examples: Vec<Option<Example>> = examples.into_iter().map(Some).collect();
    let take = |slot: &mut Option<Example>| slot.take().expect("index visited once");
    let train = indices[val_n..].iter().map(|&i| take(&mut examples[i])).collect();
    let val = indices[..val_n].iter().map(|&i| take(&mut examples[i])).collect();
    Ok((train, Some(val)))
}
