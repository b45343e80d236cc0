//! Rényi differential privacy accounting for the subsampled Gaussian
//! mechanism.
//!
//! One training step samples each example with probability `q` and adds
//! Gaussian noise with multiplier `sigma` to the clipped sum. Its Rényi
//! divergence at order `alpha` has a closed form only at `q = 1`
//! (`alpha / (2 sigma^2)`); for `q < 1` it is computed from the standard
//! binomial series of the moment `A_alpha = E[(mu(z)/mu0(z))^alpha]` between
//! the shifted mixture and the plain Gaussian, evaluated entirely in log
//! space. Integer orders use the finite sum; fractional orders use the
//! two-sided infinite series with complementary-error-function tail weights,
//! truncated once both running terms drop below `exp(-35)`.
//!
//! Steps compose additively in the Rényi domain. Since `q` and `sigma` are
//! fixed for a run, the accountant stores the per-step increment once and
//! reports `steps * increment`, which keeps composition exact. Conversion to
//! `(epsilon, delta)` takes the minimum of `rdp(alpha) + log(1/delta) /
//! (alpha - 1)` over a fixed grid of orders, and a noise multiplier hitting a
//! target epsilon is found by bisection.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use statrs::function::gamma::ln_gamma;

use crate::error::{CoreError, Result};

// ============================================================================
// Order grid
// ============================================================================

/// Quarter-integer orders from 1.25 through 64, then integers through 256.
/// Every value is exact in binary, so reports are stable across platforms.
pub fn default_order_grid() -> Vec<f64> {
    let mut orders: Vec<f64> = (0..252).map(|k| 1.25 + 0.25 * k as f64).collect();
    orders.extend((65u32..=256).map(f64::from));
    orders
}

// ============================================================================
// Log-domain primitives
// ============================================================================

const NEG_INF: f64 = f64::NEG_INFINITY;

/// `ln(exp(a) + exp(b))` without leaving log space.
fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if hi == NEG_INF {
        return NEG_INF;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// `ln(exp(a) - exp(b))`, requiring `a >= b`.
fn log_sub(a: f64, b: f64) -> Result<f64> {
    if a < b {
        return Err(CoreError::Numeric {
            index: 0,
            reason: format!("log_sub needs a >= b, got {a} < {b}"),
        });
    }
    if b == NEG_INF {
        return Ok(a);
    }
    let d = a - b;
    if d > 700.0 {
        return Ok(a);
    }
    Ok(b + d.exp_m1().ln())
}

/// `ln(erfc(x))`, switching to the asymptotic expansion once `erfc`
/// underflows toward the subnormal range.
fn log_erfc(x: f64) -> f64 {
    if x < 6.0 {
        return erfc(x).ln();
    }
    // erfc(x) = exp(-x^2) / (x sqrt(pi)) * [1 + sum_n (-1)^n (2n-1)!! / (2x^2)^n];
    // the series is asymptotic, so stop at the smallest term.
    let inv_2x2 = 1.0 / (2.0 * x * x);
    let mut sum = 0.0;
    let mut term = 1.0f64;
    let mut n = 1u64;
    loop {
        let next = term * -((2 * n - 1) as f64) * inv_2x2;
        if next.abs() >= term.abs() {
            break;
        }
        sum += next;
        if next.abs() < 1e-17 {
            break;
        }
        term = next;
        n += 1;
    }
    -x * x - x.ln() - 0.5 * std::f64::consts::PI.ln() + sum.ln_1p()
}

fn ln_binom(n: u64, k: u64) -> f64 {
    ln_gamma((n + 1) as f64) - ln_gamma((k + 1) as f64) - ln_gamma((n - k + 1) as f64)
}

// ============================================================================
// Per-step Renyi divergence
// ============================================================================

/// `ln A_alpha` for integer order via the finite binomial sum.
fn log_a_int(q: f64, sigma: f64, alpha: u64) -> f64 {
    let log_q = q.ln();
    let log_1mq = (1.0 - q).ln();
    let mut log_a = NEG_INF;
    for i in 0..=alpha {
        let log_coef = ln_binom(alpha, i) + i as f64 * log_q + (alpha - i) as f64 * log_1mq;
        let s = log_coef + (i * i - i) as f64 / (2.0 * sigma * sigma);
        log_a = log_add(log_a, s);
    }
    log_a
}

/// `ln A_alpha` for fractional order via the two-sided series. Terms carry
/// alternating-sign binomial coefficients tracked as sign plus log magnitude;
/// the loop stops once both sides fall below `exp(-35)`, far beneath the
/// tolerance of any consumer.
fn log_a_frac(q: f64, sigma: f64, alpha: f64) -> Result<f64> {
    // Terms can start tiny and climb to a peak near alpha * q before decaying,
    // so the cutoff only arms once the binomial mass is behind us. Past that
    // point the tail is monotone and its total stays below e^-35 * O(stop),
    // negligible next to A >= 1.
    const LOG_TERM_CUTOFF: f64 = -35.0;
    const MAX_TERMS: usize = 100_000;

    let mut log_a0 = NEG_INF;
    let mut log_a1 = NEG_INF;
    let z0 = sigma * sigma * (1.0 / q - 1.0).ln() + 0.5;
    let sqrt2_sigma = std::f64::consts::SQRT_2 * sigma;
    let log_q = q.ln();
    let log_1mq = (1.0 - q).ln();
    let log_half = 0.5f64.ln();

    let mut log_binom = 0.0;
    let mut sign = 1.0f64;
    for i in 0..MAX_TERMS {
        let fi = i as f64;
        let j = alpha - fi;
        let log_t0 = log_binom + fi * log_q + j * log_1mq;
        let log_t1 = log_binom + j * log_q + fi * log_1mq;
        let log_e0 = log_half + log_erfc((fi - z0) / sqrt2_sigma);
        let log_e1 = log_half + log_erfc((z0 - j) / sqrt2_sigma);
        let log_s0 = log_t0 + (fi * fi - fi) / (2.0 * sigma * sigma) + log_e0;
        let log_s1 = log_t1 + (j * j - j) / (2.0 * sigma * sigma) + log_e1;
        if sign > 0.0 {
            log_a0 = log_add(log_a0, log_s0);
            log_a1 = log_add(log_a1, log_s1);
        } else {
            log_a0 = log_sub(log_a0, log_s0)?;
            log_a1 = log_sub(log_a1, log_s1)?;
        }
        if fi > alpha && log_s0.max(log_s1) < LOG_TERM_CUTOFF {
            return Ok(log_add(log_a0, log_a1));
        }
        let factor = (alpha - fi) / (fi + 1.0);
        if factor < 0.0 {
            sign = -sign;
        }
        log_binom += factor.abs().ln();
    }
    Err(CoreError::Numeric {
        index: MAX_TERMS,
        reason: format!("series for order {alpha} did not converge"),
    })
}

fn validate_mechanism(q: f64, sigma: f64) -> Result<()> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(CoreError::config(format!(
            "sampling rate must lie in (0, 1], got {q}"
        )));
    }
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(CoreError::config(format!(
            "noise multiplier must be finite and positive, got {sigma}"
        )));
    }
    Ok(())
}

/// Renyi divergence of a single subsampled Gaussian step at each order.
pub fn rdp_increments(q: f64, sigma: f64, orders: &[f64]) -> Result<Vec<f64>> {
    validate_mechanism(q, sigma)?;
    orders
        .iter()
        .map(|&alpha| {
            if !(alpha.is_finite() && alpha > 1.0) {
                return Err(CoreError::config(format!("orders must exceed 1, got {alpha}")));
            }
            if q == 1.0 {
                return Ok(alpha / (2.0 * sigma * sigma));
            }
            let log_a = if alpha.fract() == 0.0 {
                log_a_int(q, sigma, alpha as u64)
            } else {
                log_a_frac(q, sigma, alpha)?
            };
            Ok(log_a / (alpha - 1.0))
        })
        .collect()
}

// ============================================================================
// Composition and conversion
// ============================================================================

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacySpec {
    pub epsilon: f64,
    pub delta: f64,
    pub sampling_rate: f64,
    pub steps: u64,
}

impl PrivacySpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(CoreError::config(format!(
                "epsilon target must be finite and positive, got {}",
                self.epsilon
            )));
        }
        validate_delta(self.delta)?;
        if !(self.sampling_rate > 0.0 && self.sampling_rate <= 1.0) {
            return Err(CoreError::config(format!(
                "sampling rate must lie in (0, 1], got {}",
                self.sampling_rate
            )));
        }
        if self.steps == 0 {
            return Err(CoreError::config("calibration needs at least one step"));
        }
        Ok(())
    }
}

fn validate_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(CoreError::config(format!("delta must lie in (0, 1), got {delta}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpsilonReport {
    pub epsilon: f64,
    /// Order attaining the minimum; ties go to the smallest order.
    pub order: f64,
    /// Set when no steps have been taken, in which case `epsilon` is only
    /// the grid's conversion overhead and the true privacy loss is zero.
    pub no_steps: bool,
}

/// Minimum over orders of `rdp + log(1/delta) / (order - 1)`.
pub fn epsilon_from_rdp(orders: &[f64], rdp: &[f64], delta: f64) -> Result<(f64, f64)> {
    validate_delta(delta)?;
    if orders.len() != rdp.len() || orders.is_empty() {
        return Err(CoreError::config(format!(
            "orders ({}) and rdp values ({}) must align and be non-empty",
            orders.len(),
            rdp.len()
        )));
    }
    let log_inv_delta = (1.0 / delta).ln();
    let mut best = (f64::INFINITY, orders[0]);
    for (&alpha, &r) in orders.iter().zip(rdp) {
        let eps = r + log_inv_delta / (alpha - 1.0);
        if eps < best.0 {
            best = (eps, alpha);
        }
    }
    Ok(best)
}

/// Tracks the Renyi privacy loss of a run with fixed `q` and `sigma`. The
/// per-step increment vector is computed once; composition multiplies it by
/// the step count, so long runs accrue no summation error.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AccountantState {
    orders: Vec<f64>,
    increments: Vec<f64>,
    steps_taken: u64,
    pub sigma: f64,
    pub sampling_rate: f64,
}

impl AccountantState {
    pub fn new(sigma: f64, sampling_rate: f64, orders: Vec<f64>) -> Result<Self> {
        if orders.is_empty() {
            return Err(CoreError::config("accountant needs a non-empty order grid"));
        }
        if !orders.windows(2).all(|w| w[0] < w[1]) {
            return Err(CoreError::config("order grid must be strictly increasing"));
        }
        let increments = rdp_increments(sampling_rate, sigma, &orders)?;
        Ok(AccountantState { orders, increments, steps_taken: 0, sigma, sampling_rate })
    }

    pub fn with_default_grid(sigma: f64, sampling_rate: f64) -> Result<Self> {
        AccountantState::new(sigma, sampling_rate, default_order_grid())
    }

    pub fn advance(&mut self, steps: u64) {
        self.steps_taken += steps;
    }

    pub fn steps_taken(&self) -> u64 {
        self.steps_taken
    }

    pub fn orders(&self) -> &[f64] {
        &self.orders
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    pub fn rdp(&self) -> Vec<f64> {
        let t = self.steps_taken as f64;
        self.increments.iter().map(|inc| t * inc).collect()
    }

    pub fn epsilon(&self, delta: f64) -> Result<EpsilonReport> {
        let (epsilon, order) = epsilon_from_rdp(&self.orders, &self.rdp(), delta)?;
        Ok(EpsilonReport { epsilon, order, no_steps: self.steps_taken == 0 })
    }
}

// ============================================================================
// Calibration
// ============================================================================

pub const SIGMA_BRACKET: (f64, f64) = (0.3, 100.0);
const CALIBRATION_SLACK: f64 = 1e-3;

/// Smallest noise multiplier in the bracket whose end-of-run epsilon lands
/// within `1e-3` below the target. Errors if the bracket cannot contain one:
/// either the target is unreachable even at the noisiest end, or the quietest
/// end already overshoots it.
pub fn calibrate_sigma(spec: &PrivacySpec, orders: &[f64]) -> Result<f64> {
    spec.validate()?;
    let eps_at = |sigma: f64| -> Result<f64> {
        let mut acct = AccountantState::new(sigma, spec.sampling_rate, orders.to_vec())?;
        acct.advance(spec.steps);
        Ok(acct.epsilon(spec.delta)?.epsilon)
    };

    let (mut lo, mut hi) = SIGMA_BRACKET;
    let eps_lo = eps_at(lo)?;
    let mut eps_hi = eps_at(hi)?;
    if eps_hi > spec.epsilon {
        return Err(CoreError::Infeasible(format!(
            "epsilon {} is below {:.6} reachable at sigma {hi}; raise the budget or shorten the run",
            spec.epsilon, eps_hi
        )));
    }
    if eps_lo <= spec.epsilon {
        return Err(CoreError::Infeasible(format!(
            "epsilon {} is already met at sigma {lo} (epsilon {:.6}); the bracket [{lo}, {hi}] cannot resolve it",
            spec.epsilon, eps_lo
        )));
    }

    let mut iterations = 0;
    while eps_hi < spec.epsilon - CALIBRATION_SLACK {
        iterations += 1;
        if iterations > 500 {
            return Err(CoreError::Numeric {
                index: iterations,
                reason: "sigma bisection failed to converge".into(),
            });
        }
        let mid = 0.5 * (lo + hi);
        let eps_mid = eps_at(mid)?;
        if eps_mid <= spec.epsilon {
            hi = mid;
            eps_hi = eps_mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

// ============================================================================
