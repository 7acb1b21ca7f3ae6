//! Multi-crop view sets built from pairs of renders of the same material.
//!
//! The only sources of variation are the physical ones (geometry, lighting,
//! rotation) already present in the renders plus square spatial crops. No
//! color jitter, blur, or flips are ever applied.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::{Image, Rect};
use crate::rng::{self, StreamRng};
use crate::synthgen::Manifest;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CropKind {
    Global,
    Local,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropSpec {
    pub source_view_index: usize,
    pub kind: CropKind,
    pub area_fraction: f64,
    pub crop_rect: Rect,
    pub output_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPolicy {
    /// Probability that a crop gets any masking at all.
    pub probability: f64,
    pub min_ratio: f64,
    pub max_ratio: f64,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        Self {
            probability: 0.5,
            min_ratio: 0.1,
            max_ratio: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewConfig {
    pub global_size: usize,
    pub local_size: usize,
    pub globals_per_view: usize,
    pub locals_per_view: usize,
    pub global_area: (f64, f64),
    pub local_area: (f64, f64),
    pub patch_size: usize,
    pub mask: MaskPolicy,
}

impl Default for ViewConfig {
    fn default() -> Self {
        Self {
            global_size: 64,
            local_size: 32,
            globals_per_view: 2,
            locals_per_view: 8,
            global_area: (0.40, 1.00),
            local_area: (0.10, 0.40),
            patch_size: 8,
            mask: MaskPolicy::default(),
        }
    }
}

impl ViewConfig {
    pub fn validate(&self) -> Result<()> {
        let ps = self.patch_size;
        if ps == 0 || self.global_size % ps != 0 || self.local_size % ps != 0 {
            return Err(Error::Config(format!(
                "crop sizes {}/{} must be multiples of patch size {ps}",
                self.global_size, self.local_size
            )));
        }
        let ok_range = |(lo, hi): (f64, f64)| 0.0 < lo && lo <= hi && hi <= 1.0;
        if !ok_range(self.global_area) || !ok_range(self.local_area) {
            return Err(Error::Config("crop area ranges must lie in (0, 1]".into()));
        }
        if self.globals_per_view == 0 {
            return Err(Error::Config("need at least one global crop per view".into()));
        }
        Ok(())
    }

    pub fn global_patches(&self) -> usize {
        (self.global_size / self.patch_size).pow(2)
    }

    pub fn local_patches(&self) -> usize {
        (self.local_size / self.patch_size).pow(2)
    }
}

/// Two distinct renders of `material_id`, uniform over ordered pairs.
pub fn sample_pair(manifest: &Manifest, material_id: &str, rng: &mut impl Rng) -> Result<(usize, usize)> {
    let variants: Vec<usize> = manifest
        .samples
        .iter()
        .enumerate()
        .filter(|(_, s)| s.material_id == material_id)
        .map(|(i, _)| i)
        .collect();
    sample_pair_from(&variants, material_id, rng)
}

pub fn sample_pair_from(variants: &[usize], material_id: &str, rng: &mut impl Rng) -> Result<(usize, usize)> {
    if variants.len() < 2 {
        return Err(Error::InsufficientVariants {
            material_id: material_id.to_string(),
            count: variants.len(),
        });
    }
    let picked = index::sample(rng, variants.len(), 2);
    Ok((variants[picked.index(0)], variants[picked.index(1)]))
}

fn draw_crop(
    image: &Image,
    kind: CropKind,
    (lo, hi): (f64, f64),
    out: usize,
    source_view_index: usize,
    rng: &mut impl Rng,
) -> (CropSpec, Image) {
    let area = if lo == hi { lo } else { rng.random_range(lo..=hi) };
    let side = area.sqrt();
    let slack = 1.0 - side;
    let (x, y) = if slack > 0.0 {
        (rng.random_range(0.0..=slack), rng.random_range(0.0..=slack))
    } else {
        (0.0, 0.0)
    };
    let rect = Rect { x, y, w: side, h: side };
    let spec = CropSpec {
        source_view_index,
        kind,
        area_fraction: area,
        crop_rect: rect,
        output_size: out,
    };
    (spec, image.crop_resize(rect, out, out))
}

#[derive(Clone, Debug)]
pub struct MultiCrop {
    pub globals: Vec<(CropSpec, Image)>,
    pub locals: Vec<(CropSpec, Image)>,
}

/// Square crops of one render: `globals_per_view` global and `locals_per_view`
/// local, areas uniform in the configured ranges, bilinear resize.
pub fn multi_crop(image: &Image, source_view_index: usize, config: &ViewConfig, rng: &mut impl Rng) -> Result<MultiCrop> {
    if image.width < config.global_size || image.height < config.global_size {
        return Err(Error::invalid(format!(
            "image {}x{} smaller than global crop size {}",
            image.width, image.height, config.global_size
        )));
    }
    let globals = (0..config.globals_per_view)
        .map(|_| draw_crop(image, CropKind::Global, config.global_area, config.global_size, source_view_index, rng))
        .collect();
    let locals = (0..config.locals_per_view)
        .map(|_| draw_crop(image, CropKind::Local, config.local_area, config.local_size, source_view_index, rng))
        .collect();
    Ok(MultiCrop { globals, locals })
}

/// With probability `policy.probability` masks `⌈r·n⌉` patches, `r` uniform
/// in the policy's ratio range; otherwise returns an all-false mask.
pub fn make_mask(num_patches: usize, policy: &MaskPolicy, rng: &mut impl Rng) -> Vec<bool> {
    if rng.random::<f64>() >= policy.probability {
        return vec![false; num_patches];
    }
    let ratio = rng.random_range(policy.min_ratio..=policy.max_ratio);
    mask_with_ratio(num_patches, ratio, rng)
}

pub fn mask_with_ratio(num_patches: usize, ratio: f64, rng: &mut impl Rng) -> Vec<bool> {
    let count = ((ratio * num_patches as f64).ceil() as usize).min(num_patches);
    let mut mask = vec![false; num_patches];
    for i in index::sample(rng, num_patches, count) {
        mask[i] = true;
    }
    mask
}

/// A draw of two renders (`views`) of one material.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairDraw {
    pub material_id: String,
    pub views: [usize; 2],
}

#[derive(Clone, Debug)]
pub struct CropRecord {
    pub pair: usize,
    /// 0 or 1: which render of the pair this crop came from.
    pub view: usize,
    pub spec: CropSpec,
    pub image: Image,
    /// Patch-grid mask, all false when masking was skipped.
    pub mask: Vec<bool>,
}

impl CropRecord {
    /// Teacher networks see global crops only.
    pub fn teacher_visible(&self) -> bool {
        self.spec.kind == CropKind::Global
    }
}

#[derive(Clone, Debug)]
pub struct MultiCropBatch {
    pub pairs: Vec<PairDraw>,
    /// Ordered by pair, then view, then crop.
    pub globals: Vec<CropRecord>,
    pub locals: Vec<CropRecord>,
}

impl MultiCropBatch {
    /// Dense material labels for the batch's pairs (equal ids share a label).
    pub fn pair_labels(&self) -> Vec<usize> {
        let mut ids: BTreeMap<&str, usize> = BTreeMap::new();
        self.pairs
            .iter()
            .map(|p| {
                let n = ids.len();
                *ids.entry(p.material_id.as_str()).or_insert(n)
            })
            .collect()
    }

    pub fn global_labels(&self) -> Vec<usize> {
        let labels = self.pair_labels();
        self.globals.iter().map(|c| labels[c.pair]).collect()
    }

    pub fn local_labels(&self) -> Vec<usize> {
        let labels = self.pair_labels();
        self.locals.iter().map(|c| labels[c.pair]).collect()
    }

    pub fn material_id_of(&self, crop: &CropRecord) -> &str {
        &self.pairs[crop.pair].material_id
    }

    /// Order-independent digest of the batch content.
    pub fn content_hash(&self) -> String {
        let mut per_pair: Vec<Vec<u8>> = self
            .pairs
            .iter()
            .enumerate()
            .map(|(pi, p)| {
                let mut h = Sha256::new();
                h.update(p.material_id.as_bytes());
                for v in p.views {
                    h.update((v as u64).to_le_bytes());
                }
                for c in self.globals.iter().chain(&self.locals).filter(|c| c.pair == pi) {
                    h.update([c.view as u8, c.spec.kind as u8]);
                    for x in &c.image.data {
                        h.update(x.to_le_bytes());
                    }
                    h.update(c.mask.iter().map(|&m| m as u8).collect::<Vec<_>>());
                }
                h.finalize().to_vec()
            })
            .collect();
        per_pair.sort();
        let mut h = Sha256::new();
        for d in per_pair {
            h.update(d);
        }
        hex::encode(h.finalize())
    }
}

const BATCH_TAG: u64 = 0x6261_7463;

/// The random stream owned by one pair of one step. Keyed by the pair's
/// identity, never its position, so batches assemble in any order.
pub fn pair_stream(seed: u64, step: u64, pair: &PairDraw) -> StreamRng {
    rng::stream(
        seed,
        &[
            BATCH_TAG,
            step,
            rng::hash_str(&pair.material_id),
            pair.views[0] as u64,
            pair.views[1] as u64,
        ],
    )
}

pub fn assemble_batch(pairs: &[PairDraw], images: &[Image], config: &ViewConfig, seed: u64, step: u64) -> Result<MultiCropBatch> {
    config.validate()?;
    let mut globals = Vec::new();
    let mut locals = Vec::new();
    for (pi, pair) in pairs.iter().enumerate() {
        let mut r = pair_stream(seed, step, pair);
        for (vi, &sample) in pair.views.iter().enumerate() {
            let img = images
                .get(sample)
                .ok_or_else(|| Error::invalid(format!("sample index {sample} out of range")))?;
            let crops = multi_crop(img, sample, config, &mut r)?;
            for (spec, image) in crops.globals {
                let mask = make_mask(config.global_patches(), &config.mask, &mut r);
                globals.push(CropRecord { pair: pi, view: vi, spec, image, mask });
            }
            for (spec, image) in crops.locals {
                let mask = make_mask(config.local_patches(), &config.mask, &mut r);
                locals.push(CropRecord { pair: pi, view: vi, spec, image, mask });
            }
        }
    }
    Ok(MultiCropBatch {
        pairs: pairs.to_vec(),
        globals,
        locals,
    })
}
