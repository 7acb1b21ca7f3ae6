//! On-disk dataset: renders of every material over its paired geometries and
//! lightings, plus selection scenes, described by a JSON manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::geometry::{self, GeometryTemplate};
use super::lighting::{self, LightingCondition};
use super::material::{bake_maps, Family, MaterialSpec};
use super::render::{check_pairing, render_with_maps, TEXTURE_RESOLUTION};
use super::scene::make_selection_scene;
use crate::error::{Error, Result};
use crate::image::{save_gray_png, Image};
use crate::rng;

pub const MANIFEST_VERSION: u32 = 2;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub families: Vec<Family>,
    pub instances_per_family: usize,
    pub geometries_per_material: usize,
    pub lightings_per_material: usize,
    pub resolution: usize,
    pub scenes: usize,
    pub seed: u64,
    /// Explicit per-family geometry choice; when set it must respect the pairing rule.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geometry_override: Option<Vec<String>>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            families: Family::ALL.to_vec(),
            instances_per_family: 8,
            geometries_per_material: 4,
            lightings_per_material: 4,
            resolution: 64,
            scenes: 32,
            seed: 0,
            geometry_override: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub path: String,
    pub material_id: String,
    pub family: Family,
    pub geometry_id: String,
    pub lighting_id: String,
    pub object_rotation: f64,
    pub light_rotation: f64,
    /// SHA-256 of the 8-bit pixels, so the manifest hash covers image content.
    pub pixels_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub path: String,
    pub mask_path: String,
    pub material_ids: Vec<String>,
    pub families: Vec<Family>,
    pub pixels_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub samples: Vec<SampleRecord>,
    #[serde(default)]
    pub scenes: Vec<SceneRecord>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_slice(&bytes)?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::invalid(format!(
                "{}: manifest version {} (expected {MANIFEST_VERSION})",
                path.display(),
                manifest.version
            )));
        }
        Ok(manifest)
    }

    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec_pretty(self).expect("manifest serializes")
    }

    /// SHA-256 of the serialized manifest, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json()))
    }

    /// Sample indices grouped by material, materials in first-seen order.
    pub fn by_material(&self) -> BTreeMap<String, Vec<usize>> {
        let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            groups.entry(s.material_id.clone()).or_default().push(i);
        }
        groups
    }
}

/// One planned material with its chosen geometries and lightings.
#[derive(Clone, Debug)]
pub struct MaterialPlan {
    pub spec: MaterialSpec,
    pub geometries: Vec<GeometryTemplate>,
    pub lightings: Vec<LightingCondition>,
}

const SCENE_TAG: u64 = 0x5343_454e;

/// Deterministically chooses every material and its variants.
pub fn plan_materials(config: &DatasetConfig) -> Result<Vec<MaterialPlan>> {
    if config.families.is_empty() || config.instances_per_family == 0 {
        return Err(Error::invalid("dataset needs at least one family and one instance"));
    }
    let lights = lighting::library();
    if config.lightings_per_material == 0 || config.lightings_per_material > lights.len() {
        return Err(Error::invalid(format!(
            "lightings_per_material must be in 1..={}",
            lights.len()
        )));
    }
    if config.geometries_per_material == 0 {
        return Err(Error::invalid("geometries_per_material must be positive"));
    }
    let mut plans = Vec::new();
    for &family in &config.families {
        let allowed = geometry::templates_for(family);
        for inst in 0..config.instances_per_family {
            let instance_seed = rng::mix(config.seed, &[family.index() as u64, inst as u64]);
            let mut spec = MaterialSpec::generate(family, instance_seed);
            spec.material_id = format!("{}-{inst:03}", family.name());
            let mut r = rng::stream(instance_seed, &[0x706c_616e]);
            let geometries = match &config.geometry_override {
                Some(ids) => {
                    let mut chosen = Vec::new();
                    for id in ids.iter().take(config.geometries_per_material) {
                        let t = GeometryTemplate::by_id(id)
                            .ok_or_else(|| Error::invalid(format!("unknown geometry `{id}`")))?;
                        check_pairing(&spec, &t)?;
                        chosen.push(t);
                    }
                    chosen
                }
                None => {
                    if allowed.len() < config.geometries_per_material {
                        let extra = geometry::library()
                            .into_iter()
                            .find(|t| !t.allows(family))
                            .map(|t| t.geometry_id)
                            .unwrap_or_default();
                        return Err(Error::PairingViolation {
                            family: family.name().to_string(),
                            geometry: extra,
                        });
                    }
                    let mut pool = allowed.clone();
                    pool.shuffle(&mut r);
                    pool.truncate(config.geometries_per_material);
                    pool
                }
            };
            let mut lpool = lights.clone();
            lpool.shuffle(&mut r);
            lpool.truncate(config.lightings_per_material);
            plans.push(MaterialPlan {
                spec,
                geometries,
                lightings: lpool,
            });
        }
    }
    Ok(plans)
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Renders and writes the whole dataset under `out_dir`, returning the manifest.
pub fn generate_dataset(config: &DatasetConfig, out_dir: &Path) -> Result<Manifest> {
    let plans = plan_materials(config)?;
    create_dir(out_dir)?;
    create_dir(&out_dir.join("renders"))?;

    let per_material: Vec<Vec<SampleRecord>> = plans
        .par_iter()
        .map(|plan| -> Result<Vec<SampleRecord>> {
            let spec = &plan.spec;
            let maps = bake_maps(spec, TEXTURE_RESOLUTION)?;
            let dir = out_dir.join("renders").join(&spec.material_id);
            create_dir(&dir)?;
            let mut records = Vec::new();
            for (gi, geom) in plan.geometries.iter().enumerate() {
                for (li, light) in plan.lightings.iter().enumerate() {
                    let sample_seed = rng::mix(spec.instance_seed, &[gi as u64, li as u64]);
                    let mut r = rng::stream(sample_seed, &[0x726f_7461]);
                    let object_rotation = r.random_range(0.0..std::f64::consts::TAU);
                    let light_rotation = r.random_range(0.0..std::f64::consts::TAU);
                    let sample = render_with_maps(
                        spec,
                        &maps,
                        geom,
                        light,
                        object_rotation,
                        light_rotation,
                        config.resolution,
                        sample_seed,
                    )?;
                    let rel = format!(
                        "renders/{}/{}__{}.png",
                        spec.material_id, geom.geometry_id, light.lighting_id
                    );
                    sample.image.save_png(&out_dir.join(&rel))?;
                    records.push(SampleRecord {
                        path: rel,
                        material_id: spec.material_id.clone(),
                        family: spec.family,
                        geometry_id: geom.geometry_id.clone(),
                        lighting_id: light.lighting_id.clone(),
                        object_rotation,
                        light_rotation,
                        pixels_sha256: pixels_hash(&sample.image),
                    });
                }
            }
            Ok(records)
        })
        .collect::<Result<_>>()?;

    let scenes = generate_scenes(config, out_dir)?;
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        seed: config.seed,
        samples: per_material.into_iter().flatten().collect(),
        scenes,
    };
    let path = out_dir.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_json()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn pixels_hash(image: &Image) -> String {
    hex::encode(Sha256::digest(image.to_rgb8().as_raw()))
}

/// Fresh material instances (never used by the render set) for each scene.
pub fn scene_parts(config: &DatasetConfig, index: usize) -> Vec<MaterialSpec> {
    let mut r = rng::stream(config.seed, &[SCENE_TAG, index as u64]);
    let mut families = config.families.clone();
    families.shuffle(&mut r);
    let wanted = r.random_range(2..=4usize);
    (0..wanted)
        .map(|k| {
            let family = families[k % families.len()];
            let seed = rng::mix(config.seed, &[SCENE_TAG, index as u64, k as u64]);
            let mut spec = MaterialSpec::generate(family, seed);
            spec.material_id = format!("scene{index:03}-{}-{k}", family.name());
            spec
        })
        .collect()
}

fn generate_scenes(config: &DatasetConfig, out_dir: &Path) -> Result<Vec<SceneRecord>> {
    if config.scenes == 0 {
        return Ok(Vec::new());
    }
    create_dir(&out_dir.join("scenes"))?;
    (0..config.scenes)
        .into_par_iter()
        .map(|i| {
            let parts = scene_parts(config, i);
            let scene = make_selection_scene(&parts, rng::mix(config.seed, &[SCENE_TAG, i as u64]), config.resolution)?;
            let path = format!("scenes/scene-{i:03}.png");
            let mask_path = format!("scenes/scene-{i:03}.mask.png");
            scene.image.save_png(&out_dir.join(&path))?;
            save_gray_png(&out_dir.join(&mask_path), scene.width(), scene.height(), &scene.material_mask)?;
            Ok(SceneRecord {
                path,
                mask_path,
                material_ids: parts.iter().map(|p| p.material_id.clone()).collect(),
                families: parts.iter().map(|p| p.family).collect(),
                pixels_sha256: pixels_hash(&scene.image),
            })
        })
        .collect()
}

/// A manifest with every render decoded into memory.
#[derive(Clone, Debug)]
pub struct LoadedDataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub images: Vec<Image>,
}

impl LoadedDataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = Manifest::load(dir)?;
        let images = manifest
            .samples
            .par_iter()
            .map(|s| Image::load_png(&dir.join(&s.path)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            root: dir.to_path_buf(),
            manifest,
            images,
        })
    }
}
