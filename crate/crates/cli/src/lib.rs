//! Command-line harness: configuration, presets, seed sweeps and reports.

pub mod commands;
pub mod config;
pub mod experiment;
pub mod preset;
