//! Experiment runner behind the `rollsim` binary.

pub mod commands;
pub mod config;
