//! Memorization audit via canary exposure.
//!
//! A canary is a synthetic secret planted in the training corpus: a fixed
//! prefix followed by a secret drawn from an enumerable candidate space
//! (digit sequences standing in for phone numbers, token sequences standing
//! in for names). After training, every candidate is scored by the model's
//! log-likelihood of emitting it after the prefix, and the secret's rank in
//! that list measures leakage: `exposure = log2(space) - log2(rank)` bits.
//! A model that memorized the secret ranks it first (maximal exposure); a
//! model that learned nothing about it leaves the rank uniform (exposure
//! near zero on average). Name audits aggregate ranks of several planted
//! names into a mean reciprocal rank.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model::{Example, Features, ModelSpec, ParameterVector, logits_for};
use crate::rng::DetRng;
use crate::trainer::TrainMode;

const CANARY_TAG: u64 = u64::from_le_bytes(*b"canary\0\0");
const DIGIT_SPACE_LIMIT: u32 = 6;

// ============================================================================
// Text data
// ============================================================================

/// Token corpus as a list of independent sequences. Sliding windows never
/// cross sequence boundaries.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TextDataset {
    sequences: Vec<Vec<u32>>,
    vocab_size: usize,
}

impl TextDataset {
    pub fn new(sequences: Vec<Vec<u32>>, vocab_size: usize) -> Result<Self> {
        if vocab_size < 2 {
            return Err(CoreError::config("text dataset needs a vocabulary of at least 2"));
        }
        for (i, seq) in sequences.iter().enumerate() {
            if let Some(&bad) = seq.iter().find(|&&t| t as usize >= vocab_size) {
                return Err(CoreError::config(format!(
                    "sequence {i} holds token {bad} outside vocabulary of {vocab_size}"
                )));
            }
        }
        Ok(TextDataset { sequences, vocab_size })
    }

    pub fn sequences(&self) -> &[Vec<u32>] {
        &self.sequences
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn total_tokens(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    /// Next-token prediction examples: every in-sequence window of
    /// `context_len` tokens labeled with the token that follows it.
    pub fn windows(&self, context_len: usize) -> Result<Vec<Example>> {
        if context_len == 0 {
            return Err(CoreError::config("context_len must be at least 1"));
        }
        let mut examples = Vec::new();
        for seq in &self.sequences {
            if seq.len() <= context_len {
                continue;
            }
            for start in 0..seq.len() - context_len {
                examples.push(Example {
                    features: Features::Tokens(seq[start..start + context_len].to_vec()),
                    label: seq[start + context_len] as usize,
                });
            }
        }
        if examples.is_empty() {
            return Err(CoreError::config(format!(
                "no sequence is longer than the context of {context_len}"
            )));
        }
        Ok(examples)
    }
}

// ============================================================================
// Canary specification
// ============================================================================

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CanaryKind {
    /// Secret is a sequence of digit tokens (ids 0 through 9); the candidate
    /// space is the full 10^pattern_length enumeration.
    DigitSequence { pattern_length: u32 },
    /// Secret is drawn from an explicit candidate list of token sequences.
    NameToken { candidates: Vec<Vec<u32>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanarySpec {
    pub kind: CanaryKind,
    pub repetitions: usize,
    /// Fixed context planted before the secret; candidate scoring conditions
    /// on it, so it must be at least as long as the model's context window.
    pub prefix: Vec<u32>,
}

impl CanarySpec {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.repetitions == 0 {
            return Err(CoreError::config("canary needs at least 1 repetition"));
        }
        if self.prefix.is_empty() {
            return Err(CoreError::config("canary prefix must be non-empty"));
        }
        if let Some(&bad) = self.prefix.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(CoreError::config(format!(
                "canary prefix token {bad} outside vocabulary of {vocab_size}"
            )));
        }
        match &self.kind {
            CanaryKind::DigitSequence { pattern_length } => {
                if *pattern_length == 0 || *pattern_length > DIGIT_SPACE_LIMIT {
                    return Err(CoreError::config(format!(
                        "digit pattern length must lie in 1..={DIGIT_SPACE_LIMIT}, got {pattern_length}"
                    )));
                }
                if vocab_size < 10 {
                    return Err(CoreError::config(format!(
                        "digit canaries use tokens 0..=9; vocabulary of {vocab_size} is too small"
                    )));
                }
            }
            CanaryKind::NameToken { candidates } => {
                if candidates.is_empty() {
                    return Err(CoreError::config("name canary needs a candidate list"));
                }
                let mut seen = candidates.clone();
                seen.sort();
                if seen.windows(2).any(|w| w[0] == w[1]) {
                    return Err(CoreError::config("name candidates must be distinct"));
                }
                for (i, c) in candidates.iter().enumerate() {
                    if c.is_empty() {
                        return Err(CoreError::config(format!("name candidate {i} is empty")));
                    }
                    if let Some(&bad) = c.iter().find(|&&t| t as usize >= vocab_size) {
                        return Err(CoreError::config(format!(
                            "name candidate {i} holds token {bad} outside vocabulary of {vocab_size}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn space_size(&self) -> usize {
        match &self.kind {
            CanaryKind::DigitSequence { pattern_length } => 10usize.pow(*pattern_length),
            CanaryKind::NameToken { candidates } => candidates.len(),
        }
    }
}

/// Draws one secret from the spec's candidate space and appends
/// `repetitions` copies of `prefix ++ secret` to the corpus. Returns the
/// extended corpus and the secret, which the caller must keep to locate its
/// rank later.
pub fn insert_canaries(
    dataset: &TextDataset,
    spec: &CanarySpec,
    seed: u64,
) -> Result<(TextDataset, Vec<u32>)> {
    spec.validate(dataset.vocab_size)?;
    let mut rng = DetRng::new(seed, CANARY_TAG);
    let secret: Vec<u32> = match &spec.kind {
        CanaryKind::DigitSequence { pattern_length } => {
            (0..*pattern_length).map(|_| rng.below(10) as u32).collect()
        }
        CanaryKind::NameToken { candidates } => {
            candidates[rng.below(candidates.len() as u64) as usize].clone()
        }
    };
    let mut planted: Vec<u32> = Vec::with_capacity(spec.prefix.len() + secret.len());
    planted.extend_from_slice(&spec.prefix);
    planted.extend_from_slice(&secret);
    let mut sequences = dataset.sequences.clone();
    sequences.extend(std::iter::repeat_n(planted, spec.repetitions));
    Ok((TextDataset { sequences, vocab_size: dataset.vocab_size }, secret))
}

// ============================================================================
// Candidate scoring
// ============================================================================

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoredCandidate {
    pub tokens: Vec<u32>,
    pub log_likelihood: f64,
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|l| l - lse).collect()
}

fn next_token_log_probs(
    model: &ModelSpec,
    params: &ParameterVector,
    context: &[u32],
) -> Result<Vec<f64>> {
    let window = context[context.len() - model.context_len..].to_vec();
    let logits = logits_for(model, params, &Features::Tokens(window))?;
    Ok(log_softmax(&logits))
}

fn score_digit_tree(
    model: &ModelSpec,
    params: &ParameterVector,
    prefix: &[u32],
    pattern_length: u32,
) -> Result<Vec<ScoredCandidate>> {
    let mut out = Vec::with_capacity(10usize.pow(pattern_length));
    let mut context = prefix.to_vec();
    // depth-first over the digit tree shares prefix computations; visiting
    // digits in ascending order emits candidates lexicographically
    fn descend(
        model: &ModelSpec,
        params: &ParameterVector,
        context: &mut Vec<u32>,
        remaining: u32,
        prefix_len: usize,
        score: f64,
        out: &mut Vec<ScoredCandidate>,
    ) -> Result<()> {
        if remaining == 0 {
            out.push(ScoredCandidate {
                tokens: context[prefix_len..].to_vec(),
                log_likelihood: score,
            });
            return Ok(());
        }
        let log_probs = next_token_log_probs(model, params, context)?;
        for digit in 0u32..10 {
            context.push(digit);
            descend(
                model,
                params,
                context,
                remaining - 1,
                prefix_len,
                score + log_probs[digit as usize],
                out,
            )?;
            context.pop();
        }
        Ok(())
    }
    descend(model, params, &mut context, pattern_length, prefix.len(), 0.0, &mut out)?;
    Ok(out)
}

fn score_sequence(
    model: &ModelSpec,
    params: &ParameterVector,
    prefix: &[u32],
    tokens: &[u32],
) -> Result<f64> {
    let mut context = prefix.to_vec();
    let mut score = 0.0;
    for &tok in tokens {
        let log_probs = next_token_log_probs(model, params, &context)?;
        score += log_probs[tok as usize];
        context.push(tok);
    }
    Ok(score)
}

/// Scores the full candidate space and returns it ranked by descending
/// log-likelihood. Ties break by candidate content (lexicographic token
/// order), so the ranking is independent of enumeration order.
pub fn score_candidates(
    model: &ModelSpec,
    params: &ParameterVector,
    spec: &CanarySpec,
) -> Result<Vec<ScoredCandidate>> {
    spec.validate(model.vocab_size)?;
    if spec.prefix.len() < model.context_len {
        return Err(CoreError::config(format!(
            "prefix of {} tokens cannot fill a context window of {}",
            spec.prefix.len(),
            model.context_len
        )));
    }
    let mut scored = match &spec.kind {
        CanaryKind::DigitSequence { pattern_length } => {
            score_digit_tree(model, params, &spec.prefix, *pattern_length)?
        }
        CanaryKind::NameToken { candidates } => {
            let mut ordered = candidates.clone();
            ordered.sort();
            ordered
                .into_iter()
                .map(|c| {
                    let score = score_sequence(model, params, &spec.prefix, &c)?;
                    Ok(ScoredCandidate { tokens: c, log_likelihood: score })
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    scored.sort_by(|a, b| {
        b.log_likelihood
            .partial_cmp(&a.log_likelihood)
            .expect("scores are finite")
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
    Ok(scored)
}

/// One-based rank of the secret in a ranked candidate list.
pub fn rank_of(ranked: &[ScoredCandidate], secret: &[u32]) -> Result<usize> {
    ranked
        .iter()
        .position(|c| c.tokens == secret)
        .map(|i| i + 1)
        .ok_or_else(|| CoreError::config("secret is not in the ranked candidate list"))
}

// ============================================================================
// Metrics and report
// ============================================================================

/// `log2(space) - log2(rank)`: bits of information the ranking reveals about
/// the secret.
pub fn exposure_bits(rank: usize, space_size: usize) -> Result<f64> {
    if rank == 0 || rank > space_size {
        return Err(CoreError::config(format!(
            "rank must lie in 1..={space_size}, got {rank}"
        )));
    }
    Ok((space_size as f64).log2() - (rank as f64).log2())
}

/// Mean reciprocal rank over several planted secrets.
pub fn mrr(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(CoreError::config("mrr needs at least one rank"));
    }
    if let Some(&bad) = ranks.iter().find(|&&r| r == 0) {
        return Err(CoreError::config(format!("ranks start at 1, got {bad}")));
    }
    Ok(ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExposureReport {
    pub mode: TrainMode,
    pub canary_rank: usize,
    pub space_size: usize,
    pub exposure_bits: f64,
    pub secret: Vec<u32>,
    /// Mean reciprocal rank; present for name audits over several secrets.
    pub mrr: Option<f64>,
}

// ============================================================================
