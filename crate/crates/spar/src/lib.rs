//! Any-resolution ViT feature extraction toolkit.
//!
//! The crate implements the full pipeline around a compact Vision
//! Transformer: sliding-window feature extraction with fractional-stride
//! stitching, single-pass inference at arbitrary patch-divisible
//! resolutions via positional-encoding interpolation, teacher-to-student
//! feature distillation, zero-shot open-vocabulary segmentation scoring,
//! and an inference-time benchmark harness.

pub mod bench;
pub mod cli;
pub mod distill;
mod error;
pub mod pnm;
pub mod segment;
pub mod tensor;
pub mod vit;
pub mod window;

pub use error::{Result, SparError};
