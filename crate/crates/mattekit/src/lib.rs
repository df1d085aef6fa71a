//! Mask-guided alpha matting at desk scale.
//!
//! A binary guidance mask steers a small transformer encoder whose final
//! attention block weights keys by trimap-like regions; an iterative
//! two-state refinement walks the coarse mask toward a fine matte at
//! quarter resolution; a confidence-gated sparse residual network recovers
//! full-resolution detail only where the predicted error is high. Training,
//! inference, evaluation and benchmarking run from the `mattekit` CLI.

pub mod cli;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod numerics;
pub mod pipeline;
pub mod regions;
pub mod scheduler;
pub mod sparse;

pub use error::{Error, Result};
