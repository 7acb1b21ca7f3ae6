//! Named parameter sets shared by the student, the EMA teacher, and the Gram teacher.

use std::collections::HashMap;
use std::sync::Arc;

use candle_core::{DType, Device, Tensor, Var};
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::config::BackboneConfig;
use super::ops::tensor_bytes;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    TruncNormal,
    Zeros,
    Ones,
    /// Gaussian rows scaled to unit norm.
    UnitRows,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

pub const INIT_STD: f64 = 0.02;

/// Every parameter of the backbone and both heads, in a fixed order.
pub fn layout(cfg: &BackboneConfig) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| out.push(ParamSpec { name, shape, init });
    let d = cfg.embed_dim;
    push("patch_embed.weight".into(), vec![cfg.patch_dim(), d], Init::TruncNormal);
    push("patch_embed.bias".into(), vec![d], Init::Zeros);
    push("cls_token".into(), vec![d], Init::Zeros);
    if cfg.num_registers > 0 {
        push("register_tokens".into(), vec![cfg.num_registers, d], Init::TruncNormal);
    }
    push("mask_token".into(), vec![d], Init::Zeros);
    let hidden = d * cfg.mlp_ratio;
    for i in 0..cfg.depth {
        let p = format!("blocks.{i}");
        push(format!("{p}.norm1.weight"), vec![d], Init::Ones);
        push(format!("{p}.norm1.bias"), vec![d], Init::Zeros);
        push(format!("{p}.attn.qkv.weight"), vec![d, 3 * d], Init::TruncNormal);
        push(format!("{p}.attn.qkv.bias"), vec![3 * d], Init::Zeros);
        push(format!("{p}.attn.proj.weight"), vec![d, d], Init::TruncNormal);
        push(format!("{p}.attn.proj.bias"), vec![d], Init::Zeros);
        push(format!("{p}.norm2.weight"), vec![d], Init::Ones);
        push(format!("{p}.norm2.bias"), vec![d], Init::Zeros);
        push(format!("{p}.mlp.fc1.weight"), vec![d, hidden], Init::TruncNormal);
        push(format!("{p}.mlp.fc1.bias"), vec![hidden], Init::Zeros);
        push(format!("{p}.mlp.fc2.weight"), vec![hidden, d], Init::TruncNormal);
        push(format!("{p}.mlp.fc2.bias"), vec![d], Init::Zeros);
    }
    push("norm.weight".into(), vec![d], Init::Ones);
    push("norm.bias".into(), vec![d], Init::Zeros);

    let (hh, bn) = (cfg.head_hidden_dim, cfg.head_bottleneck_dim);
    for (i, (din, dout)) in [(d, hh), (hh, hh), (hh, bn)].into_iter().enumerate() {
        push(format!("dino_head.fc{}.weight", i + 1), vec![din, dout], Init::TruncNormal);
        push(format!("dino_head.fc{}.bias", i + 1), vec![dout], Init::Zeros);
    }
    push("dino_head.prototypes".into(), vec![cfg.prototype_count, bn], Init::UnitRows);

    for i in 0..cfg.ibot_head_layers {
        let din = if i == 0 { d } else { hh };
        let dout = if i + 1 == cfg.ibot_head_layers { cfg.ibot_head_dim } else { hh };
        push(format!("ibot_head.fc{}.weight", i + 1), vec![din, dout], Init::TruncNormal);
        push(format!("ibot_head.fc{}.bias", i + 1), vec![dout], Init::Zeros);
    }
    out
}

#[derive(Clone, Debug)]
pub struct ParamSet {
    names: Arc<Vec<String>>,
    index: Arc<HashMap<String, usize>>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn from_named(named: Vec<(String, Tensor)>) -> Self {
        let index = named.iter().enumerate().map(|(i, (n, _))| (n.clone(), i)).collect();
        let (names, tensors): (Vec<_>, Vec<_>) = named.into_iter().unzip();
        Self {
            names: Arc::new(names),
            index: Arc::new(index),
            tensors,
        }
    }

    /// Fresh initialization, reproducible from `seed`.
    pub fn init(cfg: &BackboneConfig, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let mut named = Vec::new();
        for (pi, spec) in layout(cfg).into_iter().enumerate() {
            let n: usize = spec.shape.iter().product();
            let mut r = rng::stream(seed, &[0x696e_6974, pi as u64]);
            let values: Vec<f64> = match spec.init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::TruncNormal => (0..n)
                    .map(|_| loop {
                        let z: f64 = StandardNormal.sample(&mut r);
                        if z.abs() <= 2.0 {
                            break z * INIT_STD;
                        }
                    })
                    .collect(),
                Init::UnitRows => {
                    let cols = *spec.shape.last().unwrap();
                    let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut r)).collect();
                    for row in v.chunks_mut(cols) {
                        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                        row.iter_mut().for_each(|x| *x /= norm);
                    }
                    v
                }
            };
            let t = Tensor::from_vec(values, spec.shape.clone(), &Device::Cpu)?.to_dtype(dtype)?;
            named.push((spec.name, t));
        }
        Ok(Self::from_named(named))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.tensors[i])
            .ok_or_else(|| Error::Shape(format!("missing parameter `{name}`")))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn dtype(&self) -> DType {
        self.tensors.first().map(|t| t.dtype()).unwrap_or(DType::F32)
    }

    /// Same names, new tensors (shapes must match).
    pub fn with_tensors(&self, tensors: Vec<Tensor>) -> Result<Self> {
        if tensors.len() != self.tensors.len() {
            return Err(Error::Shape(format!(
                "expected {} tensors, got {}",
                self.tensors.len(),
                tensors.len()
            )));
        }
        for ((name, old), new) in self.iter().zip(&tensors) {
            if old.dims() != new.dims() {
                return Err(Error::Shape(format!(
                    "`{name}`: shape {:?} vs {:?}",
                    old.dims(),
                    new.dims()
                )));
            }
        }
        Ok(Self {
            names: self.names.clone(),
            index: self.index.clone(),
            tensors,
        })
    }

    /// Independent storage, detached from any graph.
    pub fn deep_copy(&self) -> Result<Self> {
        let tensors = self.tensors.iter().map(|t| t.detach().copy()).collect::<candle_core::Result<Vec<_>>>()?;
        self.with_tensors(tensors)
    }

    pub fn to_vars(&self) -> Result<Vec<Var>> {
        Ok(self.tensors.iter().map(|t| Var::from_tensor(&t.detach())).collect::<candle_core::Result<Vec<_>>>()?)
    }

    /// A view of trainable variables; gradients flow back to `vars`.
    pub fn from_vars(&self, vars: &[Var]) -> Result<Self> {
        self.with_tensors(vars.iter().map(|v| v.as_tensor().clone()).collect())
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let tensors = self.tensors.iter().map(|t| t.to_dtype(dtype)).collect::<candle_core::Result<Vec<_>>>()?;
        self.with_tensors(tensors)
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(|t| t.elem_count()).sum()
    }

    /// SHA-256 over names and raw parameter bytes.
    pub fn hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            h.update(tensor_bytes(t)?);
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Fails on the first non-finite entry.
    pub fn check_finite(&self) -> Result<()> {
        for (name, t) in self.iter() {
            let bad = super::ops::to_f64_vec(t)?.iter().any(|v| !v.is_finite());
            if bad {
                return Err(Error::Numeric(format!("parameter `{name}` contains NaN or Inf")));
            }
        }
        Ok(())
    }

    /// Checks names and shapes against the layout of `cfg`.
    pub fn check_layout(&self, cfg: &BackboneConfig) -> Result<()> {
        let expected = layout(cfg);
        if expected.len() != self.len() {
            return Err(Error::Shape(format!(
                "parameter count {} does not match config ({})",
                self.len(),
                expected.len()
            )));
        }
        for spec in expected {
            let t = self.get(&spec.name)?;
            if t.dims() != spec.shape.as_slice() {
                return Err(Error::Shape(format!(
                    "`{}` has shape {:?}, config expects {:?}",
                    spec.name,
                    t.dims(),
                    spec.shape
                )));
            }
        }
        Ok(())
    }
}
