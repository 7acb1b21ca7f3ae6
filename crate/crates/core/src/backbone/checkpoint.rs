//! Named tensor archives with a JSON header, stored as safetensors.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{Device, Tensor};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use super::config::BackboneConfig;
use super::params::{layout, ParamSet};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const HEADER_KEY: &str = "phieat";

/// Writes tensors under their names plus one JSON header string.
pub fn write_archive(path: &Path, tensors: &[(String, Tensor)], header: &serde_json::Value) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let contiguous: Vec<(String, Tensor)> = tensors
        .iter()
        .map(|(n, t)| Ok((n.clone(), t.detach().contiguous()?)))
        .collect::<Result<_>>()?;
    let meta = HashMap::from([(HEADER_KEY.to_string(), serde_json::to_string(header)?)]);
    let data: Vec<(&str, &Tensor)> = contiguous.iter().map(|(n, t)| (n.as_str(), t)).collect();
    safetensors::serialize_to_file(data, Some(meta), path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

/// Reads every tensor and the JSON header.
pub fn read_archive(path: &Path) -> Result<(HashMap<String, Tensor>, serde_json::Value)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |e: String| Error::Checkpoint(format!("{}: {e}", path.display()));
    let (_, meta) = SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
    let header = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(HEADER_KEY))
        .ok_or_else(|| bad("missing archive header".into()))?;
    let header: serde_json::Value = serde_json::from_str(header)?;
    let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu).map_err(|e| bad(e.to_string()))?;
    Ok((tensors, header))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ParamsHeader {
    format_version: u32,
    kind: String,
    backbone: BackboneConfig,
}

/// Collects `prefix + name` tensors in layout order.
pub fn take_params(tensors: &HashMap<String, Tensor>, prefix: &str, cfg: &BackboneConfig) -> Result<ParamSet> {
    let mut named = Vec::new();
    for spec in layout(cfg) {
        let key = format!("{prefix}{}", spec.name);
        let t = tensors
            .get(&key)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{key}`")))?;
        if t.dims() != spec.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "`{key}` has shape {:?}, expected {:?}",
                t.dims(),
                spec.shape
            )));
        }
        named.push((spec.name, t.clone()));
    }
    Ok(ParamSet::from_named(named))
}

pub fn save_params(path: &Path, cfg: &BackboneConfig, params: &ParamSet) -> Result<()> {
    let header = ParamsHeader {
        format_version: FORMAT_VERSION,
        kind: "backbone".into(),
        backbone: cfg.clone(),
    };
    let named: Vec<_> = params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    write_archive(path, &named, &serde_json::to_value(header)?)
}

/// Loads a backbone archive. With `expected`, the stored config must match.
pub fn load_params(path: &Path, expected: Option<&BackboneConfig>) -> Result<(BackboneConfig, ParamSet)> {
    let (tensors, header) = read_archive(path)?;
    let header: ParamsHeader = serde_json::from_value(header)?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    if let Some(cfg) = expected {
        if cfg != &header.backbone {
            return Err(Error::Checkpoint(format!(
                "{}: backbone config does not match the archive",
                path.display()
            )));
        }
    }
    let params = take_params(&tensors, "", &header.backbone)?;
    Ok((header.backbone, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;

    fn tiny() -> BackboneConfig {
        BackboneConfig {
            image_size: 16,
            embed_dim: 16,
            depth: 1,
            num_heads: 2,
            prototype_count: 8,
            head_hidden_dim: 16,
            head_bottleneck_dim: 8,
            ibot_head_dim: 8,
            ..BackboneConfig::default()
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        let params = ParamSet::init(&cfg, 4, DType::F32).unwrap();
        let a = dir.path().join("a.safetensors");
        let b = dir.path().join("b.safetensors");
        save_params(&a, &cfg, &params).unwrap();
        let (cfg2, loaded) = load_params(&a, Some(&cfg)).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(loaded.hash().unwrap(), params.hash().unwrap());
        save_params(&b, &cfg, &loaded).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn mismatched_config_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        let p = dir.path().join("a.safetensors");
        save_params(&p, &cfg, &ParamSet::init(&cfg, 4, DType::F32).unwrap()).unwrap();
        let mut other = cfg.clone();
        other.depth = 2;
        assert!(load_params(&p, Some(&other)).is_err());
    }
}
