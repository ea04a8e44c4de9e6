//! Unified multimodal absorbing-state discrete diffusion over paired
//! image/report token sequences, at toy scale.
//!
//! A single masked-diffusion process runs over a shared vocabulary: report
//! tokens, then image codebook tokens, then one mask token. A small
//! bidirectional transformer with adaptive layer norm learns to denoise,
//! and MaskGIT-style or ancestral decoding generates joint pairs or one
//! modality from the other.

pub mod backbone;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod sampler;
pub mod schedule;
pub mod training;
pub mod vocab;

pub use error::{Error, Result};
