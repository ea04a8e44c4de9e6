//! Bidirectional transformer denoiser with timestep conditioning.
//!
//! The three adaptations that turn an autoregressive transformer into a
//! diffusion denoiser are independent switches on [`BackboneConfig`]:
//! `causal` (attention mask), `use_timestep` (timestep embedding) and
//! `adaln_mode` (how the timestep modulates normalization).

mod model;
mod ops;
mod params;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use model::{
    adaln_modulate, attention_block, embed, forward, sinusoidal_features, timestep_embedding,
    DenoiserOutput, ForwardCache, Modulated, NormSite,
};
pub use params::{init_params, ParameterSet, TensorSpec};

pub(crate) use model::{backward, forward_cached};

/// Floating-point element type of the backbone (`f32` for training, `f64`
/// for gradient checks).
pub trait Real:
    Float
    + FromPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Debug
    + Default
    + Send
    + Sync
    + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("representable constant")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaLnMode {
    /// Standard layer norm with learned affine; timestep added to the input.
    None,
    /// Scale and shift predicted from the timestep embedding.
    #[serde(rename = "adaln")]
    AdaLn,
    /// AdaLN plus zero-initialized residual gates.
    #[default]
    #[serde(rename = "adaln_zero")]
    AdaLnZero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_len: usize,
    pub vocab_out: usize,
    pub adaln_mode: AdaLnMode,
    pub causal: bool,
    pub use_modality_embed: bool,
    pub use_timestep: bool,
    pub t_embed_dim: usize,
    pub mlp_ratio: usize,
    /// Std of the truncated-normal initializer.
    pub init_std: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            max_len: 8,
            vocab_out: 7,
            adaln_mode: AdaLnMode::AdaLnZero,
            causal: false,
            use_modality_embed: true,
            use_timestep: true,
            t_embed_dim: 32,
            mlp_ratio: 4,
            init_std: 0.02,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 {
            return bad("d_model, n_heads and n_layers must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.vocab_out < 2 {
            return bad("vocab_out must include at least one real token and the mask".into());
        }
        if self.max_len == 0 {
            return bad("max_len must be positive".into());
        }
        if self.use_timestep && (self.t_embed_dim == 0 || !self.t_embed_dim.is_multiple_of(2)) {
            return bad(format!(
                "t_embed_dim must be a positive even number, got {}",
                self.t_embed_dim
            ));
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be positive".into());
        }
        if !(self.init_std > 0.0) {
            return bad("init_std must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn hidden_dim(&self) -> usize {
        self.d_model * self.mlp_ratio
    }
}
