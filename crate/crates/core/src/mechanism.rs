//! The Gaussian mechanism on clipped per-example gradients.
//!
//! Each example's gradient row is clipped to an L2 ball of radius
//! `clip_norm`, the rows are averaged in index order, and zero-mean Gaussian
//! noise is added to the average. The noise standard deviation is expressed
//! for the clipped sum (sensitivity `clip_norm` per example), so the average
//! receives it scaled by `1/batch_size`.
//!
//! A [`NoisePlan`] fixes one standard deviation per coordinate: the uniform
//! plan uses `sigma0 * clip_norm` everywhere, the adaptive plan divides by
//! the square root of each coordinate's normalized importance, and the off
//! plan adds nothing. Noise values come from a counter-based generator keyed
//! by `(master seed, step, coordinate)`, so two runs that share a seed draw
//! identical unit normals at every coordinate regardless of plan; plans only
//! rescale them. Zero-stddev coordinates skip the draw entirely and pass the
//! aggregate through bit-exactly.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::rng::normal_at;

// ============================================================================
// Clipping and aggregation
// ============================================================================

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipConfig {
    pub clip_norm: f64,
}

impl ClipConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return Err(CoreError::config(format!(
                "clip_norm must be finite and positive, got {}",
                self.clip_norm
            )));
        }
        Ok(())
    }
}

pub fn l2_norm(row: &[f64]) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Scales each row by `min(1, clip_norm / ||row||)` in place and returns the
/// pre-clip norms. Rows already inside the ball are left untouched, bit for
/// bit.
pub fn clip_per_example(rows: &mut [Vec<f64>], clip_norm: f64) -> Result<Vec<f64>> {
    ClipConfig { clip_norm }.validate()?;
    let mut norms = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter_mut().enumerate() {
        let norm = l2_norm(row);
        if !norm.is_finite() {
            return Err(CoreError::Numeric {
                index: i,
                reason: format!("gradient row norm {norm}"),
            });
        }
        if norm > clip_norm {
            let scale = clip_norm / norm;
            for v in row.iter_mut() {
                *v *= scale;
            }
        }
        norms.push(norm);
    }
    Ok(norms)
}

/// Mean of the rows, accumulated in index order so the result is a pure
/// function of the row sequence.
pub fn aggregate(rows: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = rows
        .first()
        .ok_or_else(|| CoreError::config("cannot aggregate an empty batch"))?;
    let dim = first.len();
    let mut sum = vec![0.0; dim];
    for (i, row) in rows.iter().enumerate() {
        if row.len() != dim {
            return Err(CoreError::config(format!(
                "row {i} has {} coordinates, row 0 has {dim}",
                row.len()
            )));
        }
        for (acc, v) in sum.iter_mut().zip(row) {
            *acc += v;
        }
    }
    let inv = 1.0 / rows.len() as f64;
    for acc in sum.iter_mut() {
        *acc *= inv;
    }
    Ok(sum)
}

// ============================================================================
// Noise plans
// ============================================================================

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    Uniform,
    Adaptive,
    Off,
}

/// Per-coordinate noise standard deviations for one training step, stated
/// for the clipped gradient sum.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoisePlan {
    pub mode: NoiseMode,
    pub sigma0: f64,
    pub clip_norm: f64,
    stddev: Vec<f64>,
}

fn validate_scale(sigma0: f64, clip_norm: f64) -> Result<()> {
    if !(sigma0.is_finite() && sigma0 >= 0.0) {
        return Err(CoreError::config(format!(
            "noise multiplier must be finite and non-negative, got {sigma0}"
        )));
    }
    ClipConfig { clip_norm }.validate()
}

impl NoisePlan {
    pub fn off(dim: usize) -> NoisePlan {
        NoisePlan { mode: NoiseMode::Off, sigma0: 0.0, clip_norm: 1.0, stddev: vec![0.0; dim] }
    }

    pub fn uniform(sigma0: f64, clip_norm: f64, dim: usize) -> Result<NoisePlan> {
        validate_scale(sigma0, clip_norm)?;
        Ok(NoisePlan {
            mode: NoiseMode::Uniform,
            sigma0,
            clip_norm,
            stddev: vec![sigma0 * clip_norm; dim],
        })
    }

    /// Coordinate `i` gets `sigma0 * clip_norm / sqrt(importance[i])`. With
    /// `conservative` set, coordinates above average importance keep the
    /// uniform level instead of dropping below it.
    pub fn adaptive(
        sigma0: f64,
        clip_norm: f64,
        importance_norm: &[f64],
        conservative: bool,
    ) -> Result<NoisePlan> {
        validate_scale(sigma0, clip_norm)?;
        let base = sigma0 * clip_norm;
        let stddev = importance_norm
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                if !(w.is_finite() && w > 0.0) {
                    return Err(CoreError::Numeric {
                        index: i,
                        reason: format!("importance {w} must be positive"),
                    });
                }
                let mult = 1.0 / w.sqrt();
                Ok(base * if conservative { mult.max(1.0) } else { mult })
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(NoisePlan { mode: NoiseMode::Adaptive, sigma0, clip_norm, stddev })
    }

    pub fn stddev(&self) -> &[f64] {
        &self.stddev
    }

    pub fn dim(&self) -> usize {
        self.stddev.len()
    }

    pub fn is_silent(&self) -> bool {
        self.stddev.iter().all(|&s| s == 0.0)
    }
}

/// Adds the planned noise to the aggregated mean gradient. Coordinate `i` of
/// the result is `agg[i] + stddev[i] * z_i / batch_size` with
/// `z_i = normal_at(master_seed, step, i)`; zero-stddev coordinates never
/// consume randomness and come back bit-identical.
pub fn add_noise(
    agg: &[f64],
    plan: &NoisePlan,
    master_seed: u64,
    step: u64,
    batch_size: usize,
) -> Result<Vec<f64>> {
    if plan.dim() != agg.len() {
        return Err(CoreError::config(format!(
            "noise plan covers {} coordinates, aggregate has {}",
            plan.dim(),
            agg.len()
        )));
    }
    if batch_size == 0 {
        return Err(CoreError::config("batch_size must be at least 1"));
    }
    let inv_b = 1.0 / batch_size as f64;
    Ok(agg
        .iter()
        .zip(&plan.stddev)
        .enumerate()
        .map(|(i, (&a, &s))| {
            if s == 0.0 {
                a
            } else {
                a + s * normal_at(master_seed, step, i as u64) * inv_b
            }
        })
        .collect())
}

// ============================================================================
