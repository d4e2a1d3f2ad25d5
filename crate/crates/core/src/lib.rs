//! Numerical core of a small infrared-target Siamese tracker.
//!
//! - [`tensor`]: dense `f64` tensors, primitives with backward passes, and a
//!   central-difference gradient oracle.
//! - [`attention`]: cross-attention with per-row softmax-mass thresholding
//!   and the decoder-style block built on it.
//! - [`fusion`]: spatial (per-pixel) and channel (per-channel) attention
//!   guided fusion.
//! - [`distill`]: target-aware attention maps and the map-matching loss used
//!   for teacher/student distillation.
//! - [`metrics`]: tracking evaluation (precision, success, AUC, SA).
//!
//! The `parallel` feature (on by default) spreads batch loops over rayon;
//! results are bit-identical to the sequential path.

pub mod attention;
pub mod distill;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod par;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{ParamSet, Tensor};
