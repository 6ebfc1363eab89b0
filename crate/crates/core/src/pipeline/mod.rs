//! File formats, configuration, synthetic data and the batch commands behind the CLI.

pub mod commands;
pub mod config;
pub mod format;
pub mod synth;

pub use config::{PipelineConfig, SyntheticSpec};
pub use synth::{gen_synthetic, gen_synthetic_with, SyntheticCorpus};
