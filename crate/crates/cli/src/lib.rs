//! Experiment runner around the adaptive-noise DP training toolkit: strict
//! TOML configs, dataset synthesis, and the train / calibrate / exposure /
//! compare / heatmap subcommands.

pub mod config;
pub mod data;
pub mod runner;
