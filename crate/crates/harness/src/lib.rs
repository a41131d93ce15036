//! Command-line harness: experiment configs, the train/sweep/eval
//! pipeline over them, and report generation.

pub mod cli;
pub mod commands;
pub mod config;
pub mod report;
