//! Frozen-encoder features for every render and selection scene.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::checkpoint::{read_archive, write_archive};
use crate::backbone::ops::l2_normalize;
use crate::backbone::{encode, images_to_tensor, BackboneConfig, ParamSet};
use crate::error::{Error, Result};
use crate::image::{load_gray_png, Image};
use crate::synthgen::{patch_labels, Family, LoadedDataset};

pub const ARCHIVE_VERSION: u32 = 1;
const ARCHIVE_KIND: &str = "features";
const CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleInfo {
    pub material_id: String,
    pub family: Family,
    pub geometry_id: String,
    pub lighting_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneInfo {
    pub path: String,
    /// Ground-truth region of every patch (majority of its pixels).
    pub patch_labels: Vec<usize>,
    pub families: Vec<Family>,
}

/// Unit-norm global and patch embeddings with provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureArchive {
    pub dim: usize,
    /// Patch grid `(rows, cols)` shared by renders and scenes.
    pub grid: (usize, usize),
    pub samples: Vec<SampleInfo>,
    /// One `dim`-vector per sample.
    pub globals: Vec<Vec<f32>>,
    /// `P·dim` values per sample, row-major.
    pub patches: Vec<Vec<f32>>,
    pub scenes: Vec<SceneInfo>,
    pub scene_patches: Vec<Vec<f32>>,
}

#[derive(Serialize, Deserialize)]
struct ArchiveHeader {
    format_version: u32,
    kind: String,
    dim: usize,
    grid: (usize, usize),
    samples: Vec<SampleInfo>,
    scenes: Vec<SceneInfo>,
}

/// Normalized class and patch embeddings of `images`, in chunks.
pub fn embed_images(
    images: &[&Image],
    params: &ParamSet,
    cfg: &BackboneConfig,
) -> Result<(Vec<Vec<f32>>, Vec<Vec<f32>>, (usize, usize))> {
    let mut globals = Vec::with_capacity(images.len());
    let mut patches = Vec::with_capacity(images.len());
    let mut grid = (0, 0);
    for chunk in images.chunks(CHUNK) {
        let x = images_to_tensor(chunk, params.dtype())?;
        let f = encode(&x, params, cfg, None)?;
        grid = f.grid;
        let cls = l2_normalize(&f.cls)?.to_dtype(DType::F32)?.to_vec2::<f32>()?;
        let pt = l2_normalize(&f.patches)?.to_dtype(DType::F32)?;
        let (b, p, d) = pt.dims3()?;
        let flat = pt.reshape((b, p * d))?.to_vec2::<f32>()?;
        globals.extend(cls);
        patches.extend(flat);
    }
    Ok((globals, patches, grid))
}

/// Embeds every render of `data` and every selection scene in its manifest.
pub fn embed_dataset(data: &LoadedDataset, params: &ParamSet, cfg: &BackboneConfig) -> Result<FeatureArchive> {
    if data.images.is_empty() {
        return Err(Error::invalid("dataset has no renders"));
    }
    let refs: Vec<&Image> = data.images.iter().collect();
    let (globals, patches, grid) = embed_images(&refs, params, cfg)?;
    let samples = data
        .manifest
        .samples
        .iter()
        .map(|s| SampleInfo {
            material_id: s.material_id.clone(),
            family: s.family,
            geometry_id: s.geometry_id.clone(),
            lighting_id: s.lighting_id.clone(),
        })
        .collect();

    let mut scene_images = Vec::new();
    let mut scenes = Vec::new();
    for rec in &data.manifest.scenes {
        let img = Image::load_png(&data.root.join(&rec.path))?;
        let (w, h, mask) = load_gray_png(&data.root.join(&rec.mask_path))?;
        if (w, h) != (img.width, img.height) {
            return Err(Error::Shape(format!("{}: mask size differs from image", rec.mask_path)));
        }
        let labels = patch_labels(&mask, w, h, cfg.patch_size)?;
        scenes.push(SceneInfo {
            path: rec.path.clone(),
            patch_labels: labels.into_iter().map(usize::from).collect(),
            families: rec.families.clone(),
        });
        scene_images.push(img);
    }
    let scene_patches = if scene_images.is_empty() {
        Vec::new()
    } else {
        let refs: Vec<&Image> = scene_images.iter().collect();
        let (_, p, scene_grid) = embed_images(&refs, params, cfg)?;
        if scene_grid != grid {
            return Err(Error::Shape("scenes and renders have different patch grids".into()));
        }
        p
    };
    Ok(FeatureArchive {
        dim: cfg.embed_dim,
        grid,
        samples,
        globals,
        patches,
        scenes,
        scene_patches,
    })
}

fn stack(rows: &[Vec<f32>], shape: &[usize]) -> Result<Tensor> {
    Ok(Tensor::from_vec(rows.concat(), shape, &Device::Cpu)?)
}

fn unstack(t: &Tensor) -> Result<Vec<Vec<f32>>> {
    let n = t.dim(0)?;
    Ok(t.reshape((n, t.elem_count() / n.max(1)))?.to_vec2::<f32>()?)
}

impl FeatureArchive {
    pub fn patch_count(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let (p, d) = (self.patch_count(), self.dim);
        let mut named = vec![
            ("globals".to_string(), stack(&self.globals, &[self.globals.len(), d])?),
            ("patches".to_string(), stack(&self.patches, &[self.patches.len(), p, d])?),
        ];
        if !self.scene_patches.is_empty() {
            named.push((
                "scene_patches".into(),
                stack(&self.scene_patches, &[self.scene_patches.len(), p, d])?,
            ));
        }
        let header = ArchiveHeader {
            format_version: ARCHIVE_VERSION,
            kind: ARCHIVE_KIND.into(),
            dim: d,
            grid: self.grid,
            samples: self.samples.clone(),
            scenes: self.scenes.clone(),
        };
        write_archive(path, &named, &serde_json::to_value(header)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (tensors, header) = read_archive(path)?;
        let header: ArchiveHeader = serde_json::from_value(header)?;
        if header.kind != ARCHIVE_KIND || header.format_version != ARCHIVE_VERSION {
            return Err(Error::Checkpoint(format!("{}: not a feature archive", path.display())));
        }
        let get = |name: &str| {
            tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("{}: missing `{name}`", path.display())))
        };
        let globals = unstack(get("globals")?)?;
        let patches = unstack(get("patches")?)?;
        let scene_patches = match tensors.get("scene_patches") {
            Some(t) => unstack(t)?,
            None => Vec::new(),
        };
        if globals.len() != header.samples.len() || scene_patches.len() != header.scenes.len() {
            return Err(Error::Checkpoint(format!("{}: record counts disagree", path.display())));
        }
        Ok(Self {
            dim: header.dim,
            grid: header.grid,
            samples: header.samples,
            globals,
            patches,
            scenes: header.scenes,
            scene_patches,
        })
    }
}
