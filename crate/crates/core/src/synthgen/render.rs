//! Height-field shading: displaced macrogeometry, finite-difference normals,
//! Lambert diffuse plus Blinn-Phong specular from two lights and an ambient term.

use serde::{Deserialize, Serialize};

use super::geometry::GeometryTemplate;
use super::lighting::{normalize, LightingCondition};
use super::material::{bake_maps, MaterialMaps, MaterialSpec, MAX_HEIGHT_AMPLITUDE};
use crate::error::{Error, Result};
use crate::image::Image;

/// Resolution at which material maps are baked before rendering.
pub const TEXTURE_RESOLUTION: usize = 128;

#[derive(Clone, Debug, PartialEq)]
pub struct RenderSample {
    pub image: Image,
    pub material_id: String,
    pub geometry_id: String,
    pub lighting_id: String,
    pub object_rotation: f64,
    pub light_rotation: f64,
    pub sample_seed: u64,
}

/// Provenance of a render without the pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderKey {
    pub material_id: String,
    pub geometry_id: String,
    pub lighting_id: String,
    pub object_rotation: f64,
    pub light_rotation: f64,
    pub sample_seed: u64,
}

/// Phong exponent for a roughness value: `2/r² - 2`, clamped to `[2, 2048]`.
pub fn shininess(roughness: f64) -> f64 {
    (2.0 / (roughness * roughness) - 2.0).clamp(2.0, 2048.0)
}

pub fn render(
    spec: &MaterialSpec,
    template: &GeometryTemplate,
    lighting: &LightingCondition,
    object_rotation: f64,
    light_rotation: f64,
    resolution: usize,
    seed: u64,
) -> Result<RenderSample> {
    check_pairing(spec, template)?;
    let maps = bake_maps(spec, TEXTURE_RESOLUTION)?;
    render_with_maps(spec, &maps, template, lighting, object_rotation, light_rotation, resolution, seed)
}

pub(crate) fn check_pairing(spec: &MaterialSpec, template: &GeometryTemplate) -> Result<()> {
    if template.allows(spec.family) {
        Ok(())
    } else {
        Err(Error::PairingViolation {
            family: spec.family.name().to_string(),
            geometry: template.geometry_id.clone(),
        })
    }
}

/// Same as [`render`] with maps baked by the caller.
#[allow(clippy::too_many_arguments)]
pub fn render_with_maps(
    spec: &MaterialSpec,
    maps: &MaterialMaps,
    template: &GeometryTemplate,
    lighting: &LightingCondition,
    object_rotation: f64,
    light_rotation: f64,
    resolution: usize,
    seed: u64,
) -> Result<RenderSample> {
    check_pairing(spec, template)?;
    if resolution < 2 {
        return Err(Error::invalid(format!("render resolution {resolution} too small")));
    }
    let image = shade(spec, maps, template, lighting, object_rotation, light_rotation, resolution);
    Ok(RenderSample {
        image,
        material_id: spec.material_id.clone(),
        geometry_id: template.geometry_id.clone(),
        lighting_id: lighting.lighting_id.clone(),
        object_rotation,
        light_rotation,
        sample_seed: seed,
    })
}

fn shade(
    spec: &MaterialSpec,
    maps: &MaterialMaps,
    template: &GeometryTemplate,
    lighting: &LightingCondition,
    object_rotation: f64,
    light_rotation: f64,
    res: usize,
) -> Image {
    let step = 1.0 / res as f64;
    let (s, c) = object_rotation.sin_cos();
    let n = res * res;
    let mut heights = vec![0.0f64; n];
    let mut albedo = vec![[0.0f32; 3]; n];
    let mut rough = vec![0.0f32; n];
    for row in 0..res {
        for col in 0..res {
            let x = (col as f64 + 0.5) * step - 0.5;
            let y = (row as f64 + 0.5) * step - 0.5;
            // world -> object frame
            let ox = c * x + s * y;
            let oy = -s * x + c * y;
            let (a, h, r) = maps.sample(ox + 0.5, oy + 0.5);
            let i = row * res + col;
            heights[i] = template.height_fn.eval(ox, oy) + h as f64 * MAX_HEIGHT_AMPLITUDE;
            albedo[i] = a;
            rough[i] = r;
        }
    }

    let light = lighting.rotated(light_rotation);
    let lights = [
        (light.key_direction, light.key_intensity),
        (light.fill_direction, light.fill_intensity),
    ];
    let halfways = lights.map(|(l, _)| normalize([l[0], l[1], l[2] + 1.0]));
    let h_at = |r: usize, c: usize| heights[r * res + c];

    let mut img = Image::new(res, res);
    for row in 0..res {
        for col in 0..res {
            let (cl, cr) = (col.saturating_sub(1), (col + 1).min(res - 1));
            let (ru, rd) = (row.saturating_sub(1), (row + 1).min(res - 1));
            let dx = (h_at(row, cr) - h_at(row, cl)) / ((cr - cl) as f64 * step);
            let dy = (h_at(rd, col) - h_at(ru, col)) / ((rd - ru) as f64 * step);
            let normal = normalize([-dx, -dy, 1.0]);
            let i = row * res + col;
            let a = albedo[i];
            let exponent = shininess(rough[i] as f64);
            let mut diffuse = lighting.ambient;
            let mut specular = 0.0;
            for ((l, intensity), h) in lights.iter().zip(&halfways) {
                let ndl = dot(normal, *l);
                if ndl > 0.0 {
                    diffuse += intensity * ndl;
                    let ndh = dot(normal, *h).max(0.0);
                    specular += intensity * spec.specular_strength * ndh.powf(exponent);
                }
            }
            let mut rgb = [0.0f32; 3];
            for ch in 0..3 {
                let v = diffuse * a[ch] as f64 + specular;
                rgb[ch] = if v.is_finite() { v.clamp(0.0, 1.0) as f32 } else { 0.0 };
            }
            img.set(col, row, rgb);
        }
    }
    img
}

#[inline]
fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}
