//! Experiment harness for the irtrack core: run configuration, synthetic
//! sequences, the end-to-end tracker, the distillation demo, evaluation and
//! plotting.

pub mod cli;
pub mod config;
pub mod distill_demo;
pub mod error;
pub mod evaluate;
pub mod pipeline;
pub mod plot;
pub mod synth;

pub use config::RunConfig;
pub use error::{HarnessError, Result};
