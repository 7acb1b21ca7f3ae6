//! Pre-norm vision transformer over patch, class, and register tokens.

use candle_core::{DType, Device, Tensor, D};

use super::config::BackboneConfig;
use super::ops::{gelu, layer_norm, linear_nd, softmax_last};
use super::params::ParamSet;
use super::rope::RopeTables;
use crate::error::{Error, Result};
use crate::image::Image;

/// Encoder outputs for a batch of images.
#[derive(Clone, Debug)]
pub struct Features {
    /// `[B, D]`
    pub cls: Tensor,
    /// `[B, R, D]`, or `None` without registers.
    pub registers: Option<Tensor>,
    /// `[B, P, D]`, row-major over the grid.
    pub patches: Tensor,
    /// Patch grid `(rows, cols)`.
    pub grid: (usize, usize),
}

impl Features {
    /// `(row, col)` of every patch token, in token order.
    pub fn grid_coords(&self) -> Vec<(usize, usize)> {
        let (rows, cols) = self.grid;
        (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))).collect()
    }
}

/// Stacks images into `[B, H, W, 3]`.
pub fn images_to_tensor(images: &[&Image], dtype: DType) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Shape("empty image batch".into()))?;
    let (w, h) = (first.width, first.height);
    let mut data = Vec::with_capacity(images.len() * w * h * 3);
    for img in images {
        if img.width != w || img.height != h {
            return Err(Error::Shape(format!(
                "mixed image sizes in batch: {}x{} vs {}x{}",
                img.width, img.height, w, h
            )));
        }
        data.extend_from_slice(&img.data);
    }
    Ok(Tensor::from_vec(data, (images.len(), h, w, 3), &Device::Cpu)?.to_dtype(dtype)?)
}

/// `[B, H, W, 3]` → `[B, P, ps·ps·3]`, patches in row-major order.
pub fn patchify(images: &Tensor, patch_size: usize) -> Result<Tensor> {
    let (b, h, w, c) = images.dims4()?;
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(Error::Shape(format!(
            "{h}x{w} image is not divisible into {patch_size}-pixel patches"
        )));
    }
    let (gh, gw) = (h / patch_size, w / patch_size);
    Ok(images
        .reshape((b, gh, patch_size, gw, patch_size, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b, gh * gw, patch_size * patch_size * c))?)
}

/// Cheap fail-fast check: any NaN or Inf makes the squared sum non-finite.
pub fn check_params_finite(params: &ParamSet) -> Result<()> {
    for (name, t) in params.iter() {
        let s = t.detach().sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !s.is_finite() {
            return Err(Error::Numeric(format!("parameter `{name}` is not finite")));
        }
    }
    Ok(())
}

fn attention(x: &Tensor, params: &ParamSet, prefix: &str, cfg: &BackboneConfig, rope: &RopeTables) -> Result<Tensor> {
    let (b, n, d) = x.dims3()?;
    let (h, hd) = (cfg.num_heads, cfg.head_dim());
    let qkv = linear_nd(
        x,
        params.get(&format!("{prefix}.attn.qkv.weight"))?,
        Some(params.get(&format!("{prefix}.attn.qkv.bias"))?),
    )?
    .reshape((b, n, 3, h, hd))?
    .permute((2, 0, 3, 1, 4))?;
    let q = rope.apply(&qkv.get(0)?.contiguous()?)?;
    let k = rope.apply(&qkv.get(1)?.contiguous()?)?;
    let v = qkv.get(2)?.contiguous()?;
    let scores = (q.matmul(&k.t()?.contiguous()?)? * (1.0 / (hd as f64).sqrt()))?;
    let attn = softmax_last(&scores)?;
    let out = attn.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, n, d))?;
    linear_nd(
        &out,
        params.get(&format!("{prefix}.attn.proj.weight"))?,
        Some(params.get(&format!("{prefix}.attn.proj.bias"))?),
    )
}

fn mlp(x: &Tensor, params: &ParamSet, prefix: &str) -> Result<Tensor> {
    let hidden = gelu(&linear_nd(
        x,
        params.get(&format!("{prefix}.mlp.fc1.weight"))?,
        Some(params.get(&format!("{prefix}.mlp.fc1.bias"))?),
    )?)?;
    linear_nd(
        &hidden,
        params.get(&format!("{prefix}.mlp.fc2.weight"))?,
        Some(params.get(&format!("{prefix}.mlp.fc2.bias"))?),
    )
}

/// Encodes `images: [B, H, W, 3]`. `mask: [B, P]` (1 = masked) replaces the
/// embeddings of masked patches with the learned mask token.
pub fn encode(images: &Tensor, params: &ParamSet, cfg: &BackboneConfig, mask: Option<&Tensor>) -> Result<Features> {
    check_params_finite(params)?;
    let dtype = params.dtype();
    let images = images.to_dtype(dtype)?;
    let (b, h, w, _) = images.dims4()?;
    let ps = cfg.patch_size;
    let tokens = patchify(&images, ps)?;
    let grid = (h / ps, w / ps);
    let p = grid.0 * grid.1;
    let d = cfg.embed_dim;

    let mut x = linear_nd(
        &tokens,
        params.get("patch_embed.weight")?,
        Some(params.get("patch_embed.bias")?),
    )?;
    if let Some(m) = mask {
        if m.dims() != [b, p] {
            return Err(Error::Shape(format!("mask shape {:?}, expected [{b}, {p}]", m.dims())));
        }
        let m = m.to_dtype(dtype)?.unsqueeze(2)?;
        let keep = (1.0 - &m)?;
        let token = params.get("mask_token")?.reshape((1, 1, d))?;
        x = (x.broadcast_mul(&keep)? + m.broadcast_mul(&token)?)?;
    }

    let mut parts = vec![params.get("cls_token")?.reshape((1, 1, d))?.broadcast_as((b, 1, d))?];
    if cfg.num_registers > 0 {
        let r = params.get("register_tokens")?;
        parts.push(r.unsqueeze(0)?.broadcast_as((b, cfg.num_registers, d))?);
    }
    parts.push(x);
    let mut x = Tensor::cat(&parts, 1)?;

    let prefix_len = cfg.num_prefix_tokens();
    let rope = RopeTables::new(cfg.head_dim(), cfg.rope_base, prefix_len, grid.0, grid.1, dtype)?;
    let eps = cfg.layer_norm_eps;
    for i in 0..cfg.depth {
        let pre = format!("blocks.{i}");
        let n1 = layer_norm(
            &x,
            params.get(&format!("{pre}.norm1.weight"))?,
            params.get(&format!("{pre}.norm1.bias"))?,
            eps,
        )?;
        x = (x + attention(&n1, params, &pre, cfg, &rope)?)?;
        let n2 = layer_norm(
            &x,
            params.get(&format!("{pre}.norm2.weight"))?,
            params.get(&format!("{pre}.norm2.bias"))?,
            eps,
        )?;
        x = (x + mlp(&n2, params, &pre)?)?;
    }
    let x = layer_norm(&x, params.get("norm.weight")?, params.get("norm.bias")?, eps)?;

    let cls = x.narrow(1, 0, 1)?.squeeze(1)?;
    let registers = if cfg.num_registers > 0 {
        Some(x.narrow(1, 1, cfg.num_registers)?)
    } else {
        None
    };
    let patches = x.narrow(1, prefix_len, p)?;
    Ok(Features {
        cls,
        registers,
        patches,
        grid,
    })
}

/// Mean over the patch axis: `[B, P, D]` → `[B, D]`.
pub fn mean_patch(patches: &Tensor) -> Result<Tensor> {
    Ok(patches.mean(D::Minus2)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ops::to_f64_vec;

    fn tiny() -> BackboneConfig {
        BackboneConfig {
            image_size: 16,
            patch_size: 8,
            embed_dim: 16,
            depth: 2,
            num_heads: 2,
            num_registers: 2,
            prototype_count: 8,
            head_hidden_dim: 16,
            head_bottleneck_dim: 8,
            ibot_head_dim: 8,
            ..BackboneConfig::default()
        }
    }

    fn noise_image(size: usize, seed: u64) -> Image {
        let mut s = seed;
        Image::from_fn(size, size, |_, _| {
            let mut c = [0f32; 3];
            for v in &mut c {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                *v = (s >> 40) as f32 / (1u64 << 24) as f32;
            }
            c
        })
    }

    #[test]
    fn patchify_counts_and_order() {
        let img = Image::from_fn(16, 16, |x, y| [x as f32, y as f32, 0.0]);
        let t = images_to_tensor(&[&img], DType::F64).unwrap();
        let p = patchify(&t, 8).unwrap();
        assert_eq!(p.dims(), &[1, 4, 192]);
        // second patch starts at pixel (x=8, y=0)
        let v = p.get(0).unwrap().get(1).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(&v[..3], &[8.0, 0.0, 0.0]);
        let z = Image::new(32, 32);
        let p = patchify(&images_to_tensor(&[&z], DType::F32).unwrap(), 8).unwrap();
        assert_eq!(p.dims(), &[1, 16, 192]);
        assert!(patchify(&images_to_tensor(&[&Image::new(12, 12)], DType::F32).unwrap(), 8).is_err());
    }

    #[test]
    fn zero_image_gives_final_norm_bias_for_cls() {
        let cfg = tiny();
        let params = ParamSet::init(&cfg, 3, DType::F64).unwrap();
        // Zero the projections that write into the residual stream so every
        // token stays at its initial value; the class token starts at zero.
        let tensors: Vec<Tensor> = params
            .iter()
            .map(|(n, t)| {
                if n.ends_with("proj.weight") || n.ends_with("fc2.weight") && n.starts_with("blocks") {
                    t.zeros_like().unwrap()
                } else {
                    t.clone()
                }
            })
            .collect();
        let params = params.with_tensors(tensors).unwrap();
        let img = images_to_tensor(&[&Image::new(16, 16)], DType::F64).unwrap();
        let f = encode(&img, &params, &cfg, None).unwrap();
        let cls = to_f64_vec(&f.cls).unwrap();
        let bias = to_f64_vec(params.get("norm.bias").unwrap()).unwrap();
        assert!(cls.iter().all(|v| v.is_finite()));
        for (a, b) in cls.iter().zip(&bias) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn global_and_local_sizes_encode() {
        let cfg = tiny();
        let params = ParamSet::init(&cfg, 3, DType::F32).unwrap();
        let g = encode(&images_to_tensor(&[&noise_image(32, 1)], DType::F32).unwrap(), &params, &cfg, None).unwrap();
        let l = encode(&images_to_tensor(&[&noise_image(16, 1)], DType::F32).unwrap(), &params, &cfg, None).unwrap();
        assert_eq!(g.patches.dims(), &[1, 16, 16]);
        assert_eq!(l.patches.dims(), &[1, 4, 16]);
        assert_eq!(g.registers.unwrap().dims(), &[1, 2, 16]);
    }

    #[test]
    fn batch_permutation_equivariant() {
        let cfg = tiny();
        let params = ParamSet::init(&cfg, 5, DType::F64).unwrap();
        let a = noise_image(16, 1);
        let b = noise_image(16, 2);
        let f1 = encode(&images_to_tensor(&[&a, &b], DType::F64).unwrap(), &params, &cfg, None).unwrap();
        let f2 = encode(&images_to_tensor(&[&b, &a], DType::F64).unwrap(), &params, &cfg, None).unwrap();
        let x = f1.patches.get(0).unwrap().to_vec2::<f64>().unwrap();
        let y = f2.patches.get(1).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(x, y);
        let x = f1.cls.get(1).unwrap().to_vec1::<f64>().unwrap();
        let y = f2.cls.get(0).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn mask_replaces_patch_embedding() {
        let cfg = tiny();
        let params = ParamSet::init(&cfg, 5, DType::F64).unwrap();
        let a = images_to_tensor(&[&noise_image(16, 1)], DType::F64).unwrap();
        let b = images_to_tensor(&[&noise_image(16, 9)], DType::F64).unwrap();
        let mask = Tensor::new(&[[1f64, 1.0, 1.0, 1.0]], &Device::Cpu).unwrap();
        // Every patch masked: the input content no longer matters.
        let fa = encode(&a, &params, &cfg, Some(&mask)).unwrap();
        let fb = encode(&b, &params, &cfg, Some(&mask)).unwrap();
        assert_eq!(to_f64_vec(&fa.cls).unwrap(), to_f64_vec(&fb.cls).unwrap());
    }

    #[test]
    fn nan_parameter_is_rejected() {
        let cfg = tiny();
        let params = ParamSet::init(&cfg, 5, DType::F32).unwrap();
        let tensors: Vec<Tensor> = params
            .iter()
            .map(|(n, t)| if n == "norm.bias" { (t.ones_like().unwrap() * f64::NAN).unwrap() } else { t.clone() })
            .collect();
        let params = params.with_tensors(tensors).unwrap();
        let img = images_to_tensor(&[&Image::new(16, 16)], DType::F32).unwrap();
        assert!(matches!(encode(&img, &params, &cfg, None), Err(Error::Numeric(_))));
    }
}
