//! Multi-material selection scenes with per-pixel ground-truth ownership.

use rand::Rng;

use super::geometry::{self, GeometryTemplate};
use super::lighting;
use super::material::{bake_maps, MaterialSpec};
use super::render::{render_with_maps, TEXTURE_RESOLUTION};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng;

/// Minimum share of the image every region must own.
pub const MIN_REGION_FRACTION: f64 = 0.04;

#[derive(Clone, Debug)]
pub struct SelectionScene {
    pub image: Image,
    /// Region index per pixel, row-major.
    pub material_mask: Vec<u8>,
    pub part_specs: Vec<MaterialSpec>,
    pub geometry_id: String,
    pub lighting_id: String,
}

impl SelectionScene {
    pub fn width(&self) -> usize {
        self.image.width
    }

    pub fn height(&self) -> usize {
        self.image.height
    }
}

fn voronoi_mask(sites: &[[f64; 2]], res: usize) -> Vec<u8> {
    let mut mask = Vec::with_capacity(res * res);
    for row in 0..res {
        for col in 0..res {
            let x = (col as f64 + 0.5) / res as f64;
            let y = (row as f64 + 0.5) / res as f64;
            let owner = sites
                .iter()
                .enumerate()
                .map(|(i, s)| (i, (s[0] - x).powi(2) + (s[1] - y).powi(2)))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap()
                .0;
            mask.push(owner as u8);
        }
    }
    mask
}

pub fn make_selection_scene(specs: &[MaterialSpec], layout_seed: u64, resolution: usize) -> Result<SelectionScene> {
    if !(2..=4).contains(&specs.len()) {
        return Err(Error::invalid(format!(
            "a selection scene needs 2 to 4 materials, got {}",
            specs.len()
        )));
    }
    let mut r = rng::stream(layout_seed, &[0x7363_656e]);
    let pixels = (resolution * resolution) as f64;
    let mut attempts = 0;
    let mask = loop {
        attempts += 1;
        let sites: Vec<[f64; 2]> = (0..specs.len()).map(|_| [r.random(), r.random()]).collect();
        let mask = voronoi_mask(&sites, resolution);
        let ok = (0..specs.len()).all(|k| {
            mask.iter().filter(|&&m| m as usize == k).count() as f64 >= MIN_REGION_FRACTION * pixels
        });
        if ok {
            break mask;
        }
        if attempts > 10_000 {
            return Err(Error::invalid("could not place selection-scene regions"));
        }
    };

    let shared: Vec<GeometryTemplate> = geometry::library()
        .into_iter()
        .filter(|t| specs.iter().all(|s| t.allows(s.family)))
        .collect();
    let template = &shared[r.random_range(0..shared.len())];
    let lights = lighting::library();
    let light = &lights[r.random_range(0..lights.len())];
    let object_rotation = r.random_range(0.0..std::f64::consts::TAU);
    let light_rotation = r.random_range(0.0..std::f64::consts::TAU);

    let mut image = Image::new(resolution, resolution);
    for (k, spec) in specs.iter().enumerate() {
        let maps = bake_maps(spec, TEXTURE_RESOLUTION)?;
        let part = render_with_maps(spec, &maps, template, light, object_rotation, light_rotation, resolution, layout_seed)?;
        for (i, &m) in mask.iter().enumerate() {
            if m as usize == k {
                image.data[i * 3..i * 3 + 3].copy_from_slice(&part.image.data[i * 3..i * 3 + 3]);
            }
        }
    }
    Ok(SelectionScene {
        image,
        material_mask: mask,
        part_specs: specs.to_vec(),
        geometry_id: template.geometry_id.clone(),
        lighting_id: light.lighting_id.clone(),
    })
}

/// Majority label per `patch × patch` block; ties go to the smaller label.
pub fn patch_labels(mask: &[u8], width: usize, height: usize, patch: usize) -> Result<Vec<u8>> {
    if mask.len() != width * height || width % patch != 0 || height % patch != 0 {
        return Err(Error::Shape(format!(
            "mask {}x{} ({} values) does not tile into {patch}-pixel patches",
            width,
            height,
            mask.len()
        )));
    }
    let (gw, gh) = (width / patch, height / patch);
    let mut out = Vec::with_capacity(gw * gh);
    for pr in 0..gh {
        for pc in 0..gw {
            let mut counts = [0usize; 256];
            for y in pr * patch..(pr + 1) * patch {
                for x in pc * patch..(pc + 1) * patch {
                    counts[mask[y * width + x] as usize] += 1;
                }
            }
            let best = counts
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
                .unwrap()
                .0;
            out.push(best as u8);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::material::Family;
    use std::collections::BTreeSet;

    #[test]
    fn two_specs_give_two_regions_with_min_area() {
        let specs = [MaterialSpec::generate(Family::Checker, 1), MaterialSpec::generate(Family::Dots, 2)];
        for seed in 0..10 {
            let scene = make_selection_scene(&specs, seed, 32).unwrap();
            let labels: BTreeSet<u8> = scene.material_mask.iter().copied().collect();
            assert_eq!(labels.len(), 2);
            for k in 0..2u8 {
                let n = scene.material_mask.iter().filter(|&&m| m == k).count();
                assert!(n as f64 >= 0.04 * 1024.0);
            }
            let patches = patch_labels(&scene.material_mask, 32, 32, 8).unwrap();
            assert_eq!(patches.len(), 16);
            assert!(patches.iter().all(|&l| l < 2));
        }
    }

    #[test]
    fn rejects_bad_part_counts() {
        let one = [MaterialSpec::generate(Family::Checker, 1)];
        assert!(matches!(make_selection_scene(&one, 0, 32), Err(Error::InvalidArgument(_))));
        let five: Vec<_> = (0..5).map(|i| MaterialSpec::generate(Family::Cells, i)).collect();
        assert!(make_selection_scene(&five, 0, 32).is_err());
    }

    #[test]
    fn identical_specs_hide_the_boundary() {
        let spec = MaterialSpec::generate(Family::ValueNoise, 3);
        let scene = make_selection_scene(&[spec.clone(), spec], 5, 64).unwrap();
        let (w, img, mask) = (64, &scene.image, &scene.material_mask);
        let lum = |x: usize, y: usize| img.get(x, y).iter().sum::<f32>() / 3.0;
        let (mut across, mut n_across, mut inside, mut n_inside) = (0.0f32, 0, 0.0f32, 0);
        for y in 0..w {
            for x in 0..w - 1 {
                let g = (lum(x + 1, y) - lum(x, y)).abs();
                if mask[y * w + x] != mask[y * w + x + 1] {
                    across += g;
                    n_across += 1;
                } else {
                    inside += g;
                    n_inside += 1;
                }
            }
        }
        assert!(n_across > 0);
        let (across, inside) = (across / n_across as f32, inside / n_inside as f32);
        assert!(across <= 2.0 * inside, "across {across} vs inside {inside}");
    }

    #[test]
    fn majority_pooling_breaks_ties_low() {
        let mask = [1u8, 0, 0, 1];
        assert_eq!(patch_labels(&mask, 2, 2, 2).unwrap(), vec![0]);
        assert!(patch_labels(&mask, 2, 2, 3).is_err());
    }
}
