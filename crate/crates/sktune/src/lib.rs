//! Parameter-efficient fine-tuning of a frozen desk-scale transformer.
//!
//! The frozen model itself encodes a natural-language prompt or prefix; only a
//! small adapter over that encoding plus a task head are trained. Baseline
//! methods (virtual-token prompt tuning, reparameterized prefix tuning,
//! p-tuning, LoRA, full fine-tuning) share the same forward/train/evaluate
//! surface so runs are directly comparable.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod peft;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
