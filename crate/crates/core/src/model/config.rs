use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub block_size: usize,
    pub patch_size: usize,
    /// Noisy image channels plus upsampled low-resolution channels.
    pub in_channels: usize,
    pub semantic_dim: usize,
    pub rope_base: f64,
    pub layernorm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    /// Desk-scale default.
    pub fn toy() -> Self {
        Self {
            layers: 4,
            hidden: 64,
            heads: 4,
            head_dim: 16,
            ffn_dim: 256,
            block_size: 32,
            patch_size: 4,
            in_channels: 6,
            semantic_dim: 64,
            rope_base: 10_000.0,
            layernorm_eps: 1e-6,
        }
    }

    /// The published 700M-parameter shape (block 128, patch 4).
    pub fn full_scale() -> Self {
        Self {
            layers: 28,
            hidden: 1280,
            heads: 16,
            head_dim: 80,
            ffn_dim: 5120,
            block_size: 128,
            patch_size: 4,
            in_channels: 6,
            semantic_dim: 768,
            rope_base: 10_000.0,
            layernorm_eps: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self;
        if [c.layers, c.hidden, c.heads, c.head_dim, c.ffn_dim, c.block_size, c.patch_size, c.semantic_dim]
            .contains(&0)
        {
            return Err(invalid!("model config has a zero extent: {c:?}"));
        }
        if c.heads * c.head_dim != c.hidden {
            return Err(invalid!("heads * head_dim = {} != hidden {}", c.heads * c.head_dim, c.hidden));
        }
        if !c.hidden.is_multiple_of(4) || !c.head_dim.is_multiple_of(4) {
            return Err(invalid!("hidden and head_dim must split into x/y halves of rotation pairs"));
        }
        if !c.block_size.is_multiple_of(c.patch_size) {
            return Err(invalid!("block {} not divisible by patch {}", c.block_size, c.patch_size));
        }
        if c.in_channels != 6 {
            return Err(invalid!("in_channels must be 6 (3 noisy + 3 conditioning)"));
        }
        if !(c.rope_base > 1.0) || !(c.layernorm_eps > 0.0) {
            return Err(invalid!("rope_base must exceed 1 and layernorm_eps be positive"));
        }
        Ok(())
    }

    pub fn tokens_per_block(&self) -> usize {
        let s = self.block_size / self.patch_size;
        s * s
    }

    pub fn patch_in(&self) -> usize {
        self.patch_size * self.patch_size * self.in_channels
    }

    pub fn patch_out(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    /// Cached bytes per block: every layer keeps a normalized hidden state
    /// and a value projection of `tokens x hidden` scalars.
    pub fn cache_bytes_per_block(&self, bytes_per_scalar: usize) -> usize {
        self.layers * 2 * self.tokens_per_block() * self.hidden * bytes_per_scalar
    }

    /// Approximate working set while generating one block (activations of one
    /// layer, including the four-slot key/value concatenation and scores).
    pub fn working_bytes_per_block(&self, bytes_per_scalar: usize) -> usize {
        let t = self.tokens_per_block();
        let d = self.hidden;
        let per_layer = t * d * 8 + 4 * t * d * 3 + self.heads * t * 4 * t + t * self.ffn_dim * 2;
        per_layer * bytes_per_scalar
    }
}
