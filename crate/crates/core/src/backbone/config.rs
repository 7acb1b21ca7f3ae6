use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Side of the global crops the backbone is sized for. Other multiples of
    /// `patch_size` are accepted at run time.
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub num_registers: usize,
    pub mlp_ratio: usize,
    pub prototype_count: usize,
    pub head_hidden_dim: usize,
    pub head_bottleneck_dim: usize,
    pub ibot_head_dim: usize,
    /// Linear layers in the patch projection head (1 = a single linear map).
    pub ibot_head_layers: usize,
    pub rope_base: f64,
    pub layer_norm_eps: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            embed_dim: 128,
            depth: 4,
            num_heads: 4,
            num_registers: 4,
            mlp_ratio: 4,
            prototype_count: 1024,
            head_hidden_dim: 256,
            head_bottleneck_dim: 64,
            ibot_head_dim: 64,
            ibot_head_layers: 2,
            rope_base: 100.0,
            layer_norm_eps: 1e-6,
        }
    }
}

impl BackboneConfig {
    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn num_prefix_tokens(&self) -> usize {
        1 + self.num_registers
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return fail(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.head_dim() % 4 != 0 {
            return fail(format!(
                "head dim {} must be a multiple of 4 for 2D rotary embedding",
                self.head_dim()
            ));
        }
        if self.prototype_count < 2 {
            return fail(format!("prototype_count must be >= 2, got {}", self.prototype_count));
        }
        if self.depth == 0 || self.mlp_ratio == 0 || self.ibot_head_layers == 0 {
            return fail("depth, mlp_ratio and ibot_head_layers must be positive".into());
        }
        if self.head_hidden_dim == 0 || self.head_bottleneck_dim == 0 || self.ibot_head_dim == 0 {
            return fail("head dimensions must be positive".into());
        }
        Ok(())
    }
}
