//! Architecture configuration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vim::Placement;

/// All architecture sizes plus the switches that change the forward graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Image transformer blocks.
    pub image_blocks: usize,
    /// Language encoder blocks.
    pub encoder_blocks: usize,
    /// Language decoder blocks.
    pub decoder_blocks: usize,
    /// Embedding width.
    pub d: usize,
    /// Prompt length in tokens.
    pub n: usize,
    /// Vocabulary size.
    pub s: usize,
    /// Detection classes (real, fake).
    pub f: usize,
    /// UNet encoder output channels.
    pub c: usize,
    /// UNet encoder output height.
    pub h: usize,
    /// UNet encoder output width.
    pub w: usize,
    /// Attention heads.
    pub heads: usize,
    pub image_size: usize,
    /// Channels of the first UNet stage; doubled per stage up to `c`.
    pub base_channels: usize,
    pub mask_threshold: f64,
    pub vim_encoder: Placement,
    pub vim_decoder: Placement,
    pub detach_residual: bool,
    pub use_skips: bool,
    pub kl_symmetric: bool,
    /// Number of hierarchical prompt levels fed to the language model (1..=4).
    pub prompt_levels: usize,
    pub tau_init: f64,
}

impl ModelConfig {
    /// Small configuration that trains on a single CPU core.
    pub fn desk() -> Self {
        Self {
            image_blocks: 2,
            encoder_blocks: 2,
            decoder_blocks: 2,
            d: 32,
            n: 16,
            s: 256,
            f: 2,
            c: 64,
            h: 4,
            w: 4,
            heads: 4,
            image_size: 32,
            base_channels: 8,
            mask_threshold: 0.1,
            vim_encoder: Placement::Between,
            vim_decoder: Placement::After,
            detach_residual: false,
            use_skips: true,
            kl_symmetric: false,
            prompt_levels: 4,
            tau_init: 0.07,
        }
    }

    /// Full-size architecture (224×224 images, d = 512, n = 308).
    pub fn paper_scale() -> Self {
        Self {
            image_blocks: 4,
            encoder_blocks: 12,
            decoder_blocks: 7,
            d: 512,
            n: 308,
            s: 49408,
            f: 2,
            c: 1024,
            h: 14,
            w: 14,
            heads: 8,
            image_size: 224,
            base_channels: 64,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Contract(msg));
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return bad(format!("d = {} not divisible by {} heads", self.d, self.heads));
        }
        if self.f != 2 {
            return bad(format!("f must be 2, got {}", self.f));
        }
        if self.h != self.w {
            return bad(format!("feature map must be square, got {}×{}", self.h, self.w));
        }
        if self.h == 0 || !self.image_size.is_multiple_of(self.h) {
            return bad(format!("image size {} not a multiple of h = {}", self.image_size, self.h));
        }
        let ratio = self.image_size / self.h;
        if ratio < 2 || !ratio.is_power_of_two() {
            return bad(format!("image size / h = {ratio} must be a power of two ≥ 2"));
        }
        if self.base_channels == 0 || self.c == 0 || self.d == 0 || self.n == 0 {
            return bad("zero-sized dimension".into());
        }
        if self.s < 4 {
            return bad(format!("vocabulary of {} cannot hold the special tokens", self.s));
        }
        if !(1..=4).contains(&self.prompt_levels) {
            return bad(format!("prompt_levels must be in 1..=4, got {}", self.prompt_levels));
        }
        if !(self.mask_threshold > 0.0 && self.mask_threshold < 1.0) {
            return bad(format!("mask threshold {} outside (0, 1)", self.mask_threshold));
        }
        if !self.tau_init.is_finite() || self.tau_init <= 0.0 {
            return bad(format!("tau_init must be positive, got {}", self.tau_init));
        }
        Ok(())
    }

    /// Number of UNet downsampling stages, `log2(image_size / h)`.
    pub fn stages(&self) -> usize {
        (self.image_size / self.h).trailing_zeros() as usize
    }

    /// Width of UNet stage `k` (full resolution is stage 0).
    pub fn stage_channels(&self, k: usize) -> usize {
        (self.base_channels << k).min(self.c)
    }

    /// Image tokens seen by the transformer encoder, `h·w + 1`.
    pub fn image_tokens(&self) -> usize {
        self.h * self.w + 1
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}
