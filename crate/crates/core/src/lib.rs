//! Differentially private training with importance-weighted noise
//! allocation.
//!
//! The crate trains small models (softmax regression, one-hidden-layer MLP,
//! a context-window character model) under per-example gradient clipping and
//! Gaussian noise, supporting three modes: plain SGD, uniform DP-SGD, and an
//! adaptive mode that tracks per-parameter importance and allocates less
//! noise to coordinates that matter more while preserving the total noise
//! budget. A Rényi-DP accountant tracks the privacy spend and calibrates the
//! noise multiplier to a target budget, and a canary-exposure harness audits
//! memorization empirically.
//!
//! Everything is deterministic given a seed: parameter init, batch order,
//! and noise derive from independent counter-based streams, so experiments
//! are reproducible bit for bit and runs in different modes can be paired
//! seed by seed.

pub mod accountant;
pub mod error;
pub mod exposure;
pub mod importance;
pub mod mechanism;
pub mod model;
pub mod rng;
pub mod stats;
pub mod trainer;

pub use error::{CoreError, Result};
