//! Permutation-invariant transformer parts: attention blocks, the flow
//! denoisers, the multi-view encoder with its read cross-attention, and the
//! token upsampler that decodes to surfel attributes.

mod denoiser;
mod encoder;
mod layers;
mod params;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::AutodiffError;

pub use denoiser::Denoiser;
pub use encoder::{kl_divergence, vae_latent, ReadCrossAttention, SurfelVae, TokenUpsampler, VaeLatent, VaeOutput};
pub use layers::{
    attention, attention_logits, timestep_embedding, CrossAttentionBlock, Linear, Modulation, SelfAttentionBlock,
};
pub use params::{Bound, Init, ParamStore};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("parameter {0} registered twice")]
    DuplicateParam(String),
    #[error("no parameter named {0}")]
    MissingParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("token width {got}, expected {expected}")]
    Width { expected: usize, got: usize },
    #[error("image {height}x{width} not divisible by patch size {patch}")]
    Patch { height: usize, width: usize, patch: usize },
    #[error("upsampling level {level} out of range (have {levels})")]
    Level { level: usize, levels: usize },
    #[error("expected {expected} tokens, got {got}")]
    Count { expected: usize, got: usize },
    #[error("cross-attention context is empty")]
    EmptyContext,
    #[error("class label {label} outside 0..{classes}")]
    Label { label: usize, classes: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Flow denoiser architecture. Stage 1 uses `in_width = 3`; stage 2 uses the
/// feature width and sets `anchor_bands` to inject the anchor positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub in_width: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub qk_norm: bool,
    pub cond_width: usize,
    /// Number of class labels; the embedding table has one extra null row.
    pub num_classes: usize,
    /// Fourier bands for the anchor injection (stage 2 only).
    pub anchor_bands: Option<usize>,
    /// With `false` the anchor injection is multiplied by zero (ablation).
    pub anchor_injection: bool,
    /// Zero-initialize the residual branch outputs so every block starts as the identity.
    pub zero_init: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            in_width: 3,
            width: 64,
            layers: 4,
            heads: 4,
            qk_norm: true,
            cond_width: 64,
            num_classes: 3,
            anchor_bands: None,
            anchor_injection: true,
            zero_init: false,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        if self.in_width == 0 || self.width == 0 || self.cond_width == 0 {
            return Err(NetError::Config("widths must be positive".into()));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(NetError::Config(format!(
                "width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.num_classes == 0 {
            return Err(NetError::Config("need at least one class".into()));
        }
        Ok(())
    }
}

/// Upsampling levels of the Gaussian decoder. Full scale is `ratios = [8, 4, 3]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianHeadConfig {
    pub ratios: Vec<usize>,
    pub out_dim: usize,
}

impl Default for GaussianHeadConfig {
    fn default() -> Self {
        Self {
            ratios: vec![4, 2],
            out_dim: 13,
        }
    }
}

impl GaussianHeadConfig {
    pub fn levels(&self) -> usize {
        self.ratios.len()
    }

    /// Splats produced per anchor.
    pub fn expansion(&self) -> usize {
        self.ratios.iter().product()
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.out_dim != 13 {
            return Err(NetError::Config(format!("out_dim must be 13, got {}", self.out_dim)));
        }
        if self.ratios.contains(&0) {
            return Err(NetError::Config("upsampling ratios must be at least 1".into()));
        }
        Ok(())
    }
}

/// Toy multi-view encoder and decoder. Full scale uses `V = 8` views and
/// a downsampling factor of 8; `N = 768`, `C_h = 10`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeConfig {
    pub patch: usize,
    pub width: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub anchors: usize,
    pub latent_width: usize,
    pub pe_bands: usize,
    pub head: GaussianHeadConfig,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            patch: 8,
            width: 64,
            heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            anchors: 64,
            latent_width: 4,
            pe_bands: 4,
            head: GaussianHeadConfig::default(),
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        if self.patch == 0 || self.width == 0 || self.latent_width == 0 || self.anchors == 0 {
            return Err(NetError::Config("sizes must be positive".into()));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(NetError::Config(format!(
                "width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        self.head.validate()
    }
}
