//! Dump parsing, experiment configuration, and output writers.

pub mod config;
pub mod dump;
pub mod output;
