//! AdaptSR: domain adaptation for frozen super-resolution backbones via
//! low-rank adapters.
//!
//! The crate builds small SR networks (a windowed-attention transformer and
//! a residual CNN), wraps selected conv/linear weights with LoRA factors,
//! trains only those factors on synthetically degraded data, and merges the
//! result back into the base weights with no inference overhead.

pub mod backbones;
pub mod ckpt;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod inject;
pub mod lora;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
