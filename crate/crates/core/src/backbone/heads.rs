//! Prototype (image-level) and patch projection heads.

use candle_core::Tensor;

use super::config::BackboneConfig;
use super::ops::{gelu, l2_normalize, linear_nd};
use super::params::ParamSet;
use crate::error::Result;

/// Projection MLP followed by L2 normalization: `[.., D]` → `[.., bottleneck]`.
pub fn dino_embedding(cls: &Tensor, params: &ParamSet) -> Result<Tensor> {
    let mut x = cls.clone();
    for i in 1..=3 {
        x = linear_nd(
            &x,
            params.get(&format!("dino_head.fc{i}.weight"))?,
            Some(params.get(&format!("dino_head.fc{i}.bias"))?),
        )?;
        if i < 3 {
            x = gelu(&x)?;
        }
    }
    l2_normalize(&x)
}

/// Cosine between the normalized embedding and every prototype: `[.., K]`.
/// No temperature is applied here.
pub fn prototype_logits(cls: &Tensor, params: &ParamSet) -> Result<Tensor> {
    let z = dino_embedding(cls, params)?;
    let w = params.get("dino_head.prototypes")?;
    linear_nd(&z, &w.t()?, None)
}

/// Patch projection head: `[.., D]` → `[.., ibot_head_dim]`.
pub fn ibot_project(patches: &Tensor, params: &ParamSet, cfg: &BackboneConfig) -> Result<Tensor> {
    let mut x = patches.clone();
    for i in 1..=cfg.ibot_head_layers {
        x = linear_nd(
            &x,
            params.get(&format!("ibot_head.fc{i}.weight"))?,
            Some(params.get(&format!("ibot_head.fc{i}.bias"))?),
        )?;
        if i < cfg.ibot_head_layers {
            x = gelu(&x)?;
        }
    }
    Ok(x)
}

/// Rescales every prototype row to unit norm.
pub fn normalize_prototypes(w: &Tensor) -> Result<Tensor> {
    l2_normalize(w)
}
