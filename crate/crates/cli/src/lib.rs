//! Reproducibility shell around `mvae-core`: strict TOML configuration,
//! checkpoint serialization, and the train / eval / weaksweep / check
//! commands.

pub mod checkpoint;
pub mod commands;
pub mod config;
