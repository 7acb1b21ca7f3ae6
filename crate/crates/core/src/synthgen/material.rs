//! Procedural material recipes and their baked texture maps.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Largest mesostructure displacement in world units; baked height maps are
/// stored as a fraction of it.
pub const MAX_HEIGHT_AMPLITUDE: f64 = 0.04;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Checker,
    Stripes,
    ValueNoise,
    Cells,
    GradientRamp,
    Dots,
    MarbleWarp,
    Brushed,
}

impl Family {
    pub const ALL: [Family; 8] = [
        Family::Checker,
        Family::Stripes,
        Family::ValueNoise,
        Family::Cells,
        Family::GradientRamp,
        Family::Dots,
        Family::MarbleWarp,
        Family::Brushed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Checker => "checker",
            Family::Stripes => "stripes",
            Family::ValueNoise => "value-noise",
            Family::Cells => "cells",
            Family::GradientRamp => "gradient-ramp",
            Family::Dots => "dots",
            Family::MarbleWarp => "marble-warp",
            Family::Brushed => "brushed",
        }
    }

    /// Category label. A pure function of the family.
    pub fn category(self) -> &'static str {
        self.name()
    }

    pub fn index(self) -> usize {
        Family::ALL.iter().position(|&f| f == self).unwrap()
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown material family `{s}`")))
    }
}

/// Family-specific pattern parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlbedoParams {
    pub color_a: [f64; 3],
    pub color_b: [f64; 3],
    /// Pattern frequency in cycles per texture tile. Integer-valued so every
    /// family tiles.
    pub frequency: f64,
    /// Integer wave direction for oriented families (stripes, ramps, brushed).
    pub direction: [i32; 2],
    /// Domain-warp amplitude (marble veins, brushed streak wobble).
    pub warp: f64,
    /// Fill fraction of stripes and dots.
    pub duty: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaterialSpec {
    pub material_id: String,
    pub family: Family,
    pub albedo: AlbedoParams,
    /// Mesostructure displacement in world units, `0..=MAX_HEIGHT_AMPLITUDE`.
    pub height_amplitude: f64,
    pub roughness: f64,
    pub specular_strength: f64,
    pub instance_seed: u64,
}

impl MaterialSpec {
    pub fn category(&self) -> &'static str {
        self.family.category()
    }
}

/// Baked texture maps, row-major `resolution × resolution`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaterialMaps {
    pub resolution: usize,
    pub albedo: Vec<[f32; 3]>,
    pub height: Vec<f32>,
    pub roughness: Vec<f32>,
}

impl MaterialMaps {
    #[inline]
    fn wrap_index(&self, i: i64) -> usize {
        i.rem_euclid(self.resolution as i64) as usize
    }

    /// Bilinear lookup with wrap-around at texture coordinates `(u, v)` in tiles.
    pub fn sample(&self, u: f64, v: f64) -> ([f32; 3], f32, f32) {
        let r = self.resolution as f64;
        let fx = u * r;
        let fy = v * r;
        let x0 = fx.floor();
        let y0 = fy.floor();
        let tx = (fx - x0) as f32;
        let ty = (fy - y0) as f32;
        let (x0, y0) = (x0 as i64, y0 as i64);
        let idx = |x: i64, y: i64| self.wrap_index(y) * self.resolution + self.wrap_index(x);
        let corners = [idx(x0, y0), idx(x0 + 1, y0), idx(x0, y0 + 1), idx(x0 + 1, y0 + 1)];
        let w = [(1.0 - tx) * (1.0 - ty), tx * (1.0 - ty), (1.0 - tx) * ty, tx * ty];
        let mut albedo = [0.0f32; 3];
        let mut height = 0.0f32;
        let mut rough = 0.0f32;
        for (&c, &wt) in corners.iter().zip(&w) {
            for ch in 0..3 {
                albedo[ch] += wt * self.albedo[c][ch];
            }
            height += wt * self.height[c];
            rough += wt * self.roughness[c];
        }
        (albedo, height, rough)
    }
}

pub fn make_material(family: &str, instance_seed: u64) -> Result<MaterialSpec> {
    Ok(MaterialSpec::generate(family.parse()?, instance_seed))
}

fn random_color(r: &mut impl Rng) -> [f64; 3] {
    [r.random_range(0.05..0.95), r.random_range(0.05..0.95), r.random_range(0.05..0.95)]
}

fn random_direction(r: &mut impl Rng) -> [i32; 2] {
    const DIRS: [[i32; 2]; 6] = [[1, 0], [0, 1], [1, 1], [1, -1], [2, 1], [1, 2]];
    DIRS[r.random_range(0..DIRS.len())]
}

impl MaterialSpec {
    /// Draws a material instance. The same `(family, instance_seed)` always
    /// yields the same spec.
    pub fn generate(family: Family, instance_seed: u64) -> Self {
        let mut r = rng::stream(instance_seed, &[0x6d61_7465, family.index() as u64]);
        let color_a = random_color(&mut r);
        let color_b = loop {
            let c = random_color(&mut r);
            let dist: f64 = c.iter().zip(&color_a).map(|(a, b)| (a - b).abs()).sum::<f64>() / 3.0;
            if dist >= 0.2 {
                break c;
            }
        };
        let (frequency, warp, duty) = match family {
            Family::Checker => (2.0 * r.random_range(1..=3) as f64, 0.0, 0.5),
            Family::Stripes => (r.random_range(3..=8) as f64, 0.0, r.random_range(0.3..0.7)),
            Family::ValueNoise => (r.random_range(3..=6) as f64, 0.0, 0.5),
            Family::Cells => (r.random_range(3..=7) as f64, 0.0, 0.5),
            Family::GradientRamp => (r.random_range(1..=2) as f64, 0.0, 0.5),
            Family::Dots => (r.random_range(3..=6) as f64, 0.0, r.random_range(0.25..0.45)),
            Family::MarbleWarp => (r.random_range(2..=4) as f64, r.random_range(0.6..1.6), 0.5),
            Family::Brushed => (r.random_range(12..=24) as f64, r.random_range(0.05..0.2), 0.5),
        };
        let direction = random_direction(&mut r);
        let roughness = match family {
            Family::Brushed => r.random_range(0.1..0.3),
            Family::Cells | Family::ValueNoise => r.random_range(0.5..0.95),
            _ => r.random_range(0.15..0.8),
        };
        let specular_strength = r.random_range(0.0..0.6);
        let height_amplitude = MAX_HEIGHT_AMPLITUDE * r.random_range(0.5..1.0);
        MaterialSpec {
            material_id: format!("{}-{:016x}", family.name(), instance_seed),
            family,
            albedo: AlbedoParams {
                color_a,
                color_b,
                frequency,
                direction,
                warp,
                duty,
            },
            height_amplitude,
            roughness,
            specular_strength,
            instance_seed,
        }
    }
}

/// Tileable lattice value noise with `cells_x × cells_y` lattice cells per tile.
struct LatticeNoise {
    cells_x: usize,
    cells_y: usize,
    values: Vec<f64>,
}

impl LatticeNoise {
    fn new(cells_x: usize, cells_y: usize, seed: u64, tag: u64) -> Self {
        let mut r = rng::stream(seed, &[0x6e6f_6973, tag]);
        let values = (0..cells_x * cells_y).map(|_| r.random::<f64>()).collect();
        Self { cells_x, cells_y, values }
    }

    fn at(&self, i: i64, j: i64) -> f64 {
        let i = i.rem_euclid(self.cells_x as i64) as usize;
        let j = j.rem_euclid(self.cells_y as i64) as usize;
        self.values[j * self.cells_x + i]
    }

    fn sample(&self, u: f64, v: f64) -> f64 {
        let x = u * self.cells_x as f64;
        let y = v * self.cells_y as f64;
        let (x0, y0) = (x.floor(), y.floor());
        let s = smooth(x - x0);
        let t = smooth(y - y0);
        let (i, j) = (x0 as i64, y0 as i64);
        let a = lerp(self.at(i, j), self.at(i + 1, j), s);
        let b = lerp(self.at(i, j + 1), self.at(i + 1, j + 1), s);
        lerp(a, b, t)
    }
}

/// Three octaves of tileable value noise, roughly in `[0, 1]`.
struct Fbm {
    octaves: Vec<LatticeNoise>,
}

impl Fbm {
    fn new(base: usize, seed: u64) -> Self {
        Self {
            octaves: (0..3).map(|o| LatticeNoise::new(base << o, base << o, seed, o as u64)).collect(),
        }
    }

    fn sample(&self, u: f64, v: f64) -> f64 {
        let mut sum = 0.0;
        let mut norm = 0.0;
        let mut amp = 1.0;
        for oct in &self.octaves {
            sum += amp * oct.sample(u, v);
            norm += amp;
            amp *= 0.5;
        }
        sum / norm
    }
}

#[inline]
fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

#[inline]
fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    smooth(((x - e0) / (e1 - e0)).clamp(0.0, 1.0))
}

#[inline]
fn triangle(x: f64) -> f64 {
    1.0 - (2.0 * (x - x.floor()) - 1.0).abs()
}

/// Jittered-grid Worley cells, tileable.
struct Cells {
    n: usize,
    points: Vec<[f64; 2]>,
    tones: Vec<f64>,
}

impl Cells {
    fn new(n: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, &[0x6365_6c6c]);
        let mut points = Vec::with_capacity(n * n);
        let mut tones = Vec::with_capacity(n * n);
        for j in 0..n {
            for i in 0..n {
                points.push([
                    (i as f64 + r.random_range(0.15..0.85)) / n as f64,
                    (j as f64 + r.random_range(0.15..0.85)) / n as f64,
                ]);
                tones.push(r.random::<f64>());
            }
        }
        Self { n, points, tones }
    }

    /// Returns (tone of nearest cell, distance gap F2 - F1 in tile units).
    fn sample(&self, u: f64, v: f64) -> (f64, f64) {
        let n = self.n as i64;
        let ci = (u * self.n as f64).floor() as i64;
        let cj = (v * self.n as f64).floor() as i64;
        let (mut f1, mut f2, mut tone) = (f64::INFINITY, f64::INFINITY, 0.0);
        for dj in -2..=2 {
            for di in -2..=2 {
                let (i, j) = (ci + di, cj + dj);
                let k = (j.rem_euclid(n) * n + i.rem_euclid(n)) as usize;
                let p = self.points[k];
                let px = p[0] + (i.div_euclid(n)) as f64;
                let py = p[1] + (j.div_euclid(n)) as f64;
                let d = ((px - u).powi(2) + (py - v).powi(2)).sqrt();
                if d < f1 {
                    f2 = f1;
                    f1 = d;
                    tone = self.tones[k];
                } else if d < f2 {
                    f2 = d;
                }
            }
        }
        (tone, f2 - f1)
    }
}

/// Pattern value at texture coordinate: (color mix, height in [0,1], roughness modulation).
struct Pattern<'a> {
    spec: &'a MaterialSpec,
    fbm: Option<Fbm>,
    streaks: Option<LatticeNoise>,
    cells: Option<Cells>,
}

impl<'a> Pattern<'a> {
    fn new(spec: &'a MaterialSpec) -> Self {
        let p = &spec.albedo;
        let seed = spec.instance_seed;
        let fbm = match spec.family {
            Family::ValueNoise => Some(Fbm::new(p.frequency as usize, seed)),
            Family::MarbleWarp | Family::Brushed => Some(Fbm::new(3, seed)),
            _ => None,
        };
        let streaks = match spec.family {
            Family::Brushed => Some(LatticeNoise::new(2, 4 * p.frequency as usize, seed, 99)),
            _ => None,
        };
        let cells = match spec.family {
            Family::Cells => Some(Cells::new(p.frequency as usize, seed)),
            _ => None,
        };
        Self {
            spec,
            fbm,
            streaks,
            cells,
        }
    }

    fn eval(&self, u: f64, v: f64) -> (f64, f64, f64) {
        let p = &self.spec.albedo;
        let f = p.frequency;
        let along = p.direction[0] as f64 * u + p.direction[1] as f64 * v;
        match self.spec.family {
            Family::Checker => {
                let parity = ((u * f).floor() as i64 + (v * f).floor() as i64).rem_euclid(2);
                let t = parity as f64;
                (t, t, 1.0 - 0.3 * t)
            }
            Family::Stripes => {
                let x = (along * f).rem_euclid(1.0);
                let edge = 0.04;
                let t = smoothstep(0.0, edge, x) * (1.0 - smoothstep(p.duty, p.duty + edge, x));
                (t, t, 1.0 - 0.4 * t)
            }
            Family::ValueNoise => {
                let n = self.fbm.as_ref().unwrap().sample(u, v);
                (n, n, 0.7 + 0.6 * n)
            }
            Family::Cells => {
                let (tone, gap) = self.cells.as_ref().unwrap().sample(u, v);
                let groove = smoothstep(0.0, 0.06, gap);
                let t = tone * groove;
                (t, groove, 1.3 - 0.5 * groove)
            }
            Family::GradientRamp => {
                let t = triangle(along * f);
                (t, t, 0.8 + 0.4 * t)
            }
            Family::Dots => {
                let cx = (u * f).rem_euclid(1.0) - 0.5;
                let cy = (v * f).rem_euclid(1.0) - 0.5;
                let r = (cx * cx + cy * cy).sqrt();
                let t = 1.0 - smoothstep(p.duty - 0.05, p.duty, r);
                let h = (1.0 - (r / p.duty).min(1.0).powi(2)).max(0.0).sqrt();
                (t, h, 1.0 - 0.5 * t)
            }
            Family::MarbleWarp => {
                let n = self.fbm.as_ref().unwrap().sample(u, v);
                let x = f * u + p.warp * (n - 0.5) * 4.0;
                let vein = (std::f64::consts::PI * x).sin().abs().powf(0.35);
                (vein, vein, 0.9 + 0.2 * vein)
            }
            Family::Brushed => {
                let n = self.fbm.as_ref().unwrap().sample(u, v);
                let s = self.streaks.as_ref().unwrap();
                let (uu, vv) = if p.direction[0].abs() >= p.direction[1].abs() { (u, v) } else { (v, u) };
                let streak = s.sample(uu + p.warp * (n - 0.5), vv);
                let t = 0.25 + 0.5 * streak;
                (t, streak, 0.8 + 0.4 * streak)
            }
        }
    }
}

/// Bakes the albedo, height, and roughness maps at `resolution × resolution`.
///
/// Height values are stored as a fraction of [`MAX_HEIGHT_AMPLITUDE`], so a
/// zero amplitude gives an all-zero height map.
pub fn bake_maps(spec: &MaterialSpec, resolution: usize) -> Result<MaterialMaps> {
    if resolution < 16 || !resolution.is_power_of_two() {
        return Err(Error::invalid(format!(
            "bake resolution must be a power of two >= 16, got {resolution}"
        )));
    }
    let pattern = Pattern::new(spec);
    let n = resolution * resolution;
    let mut mix = Vec::with_capacity(n);
    let mut height = Vec::with_capacity(n);
    let mut rough = Vec::with_capacity(n);
    for y in 0..resolution {
        for x in 0..resolution {
            let (t, h, r) = pattern.eval(x as f64 / resolution as f64, y as f64 / resolution as f64);
            mix.push(t);
            height.push(h);
            rough.push(r);
        }
    }
    // Noise-driven height fields are stretched to the full unit range.
    if matches!(spec.family, Family::ValueNoise | Family::MarbleWarp | Family::Brushed) {
        let lo = height.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = height.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            for h in &mut height {
                *h = (*h - lo) / (hi - lo);
            }
        }
    }
    let scale = (spec.height_amplitude / MAX_HEIGHT_AMPLITUDE).clamp(0.0, 1.0);
    let (a, b) = (spec.albedo.color_a, spec.albedo.color_b);
    let albedo = mix
        .iter()
        .map(|&t| {
            let t = t.clamp(0.0, 1.0);
            let mut c = [0.0f32; 3];
            for ch in 0..3 {
                c[ch] = (a[ch] * (1.0 - t) + b[ch] * t).clamp(0.0, 1.0) as f32;
            }
            c
        })
        .collect();
    Ok(MaterialMaps {
        resolution,
        albedo,
        height: height.iter().map(|&h| (h.clamp(0.0, 1.0) * scale) as f32).collect(),
        roughness: rough
            .iter()
            .map(|&m| (spec.roughness * m).clamp(0.05, 1.0) as f32)
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn same_family_and_seed_is_deterministic() {
        let a = make_material("checker", 0).unwrap();
        assert_eq!(a, make_material("checker", 0).unwrap());
        assert_eq!(a.albedo.frequency.fract(), 0.0);
        assert!(a.albedo.frequency > 0.0);
        assert_ne!(a.albedo.color_a, a.albedo.color_b);
    }

    #[test]
    fn different_seeds_differ() {
        let a = make_material("checker", 0).unwrap();
        let b = make_material("checker", 1).unwrap();
        let differs = a.albedo.color_a != b.albedo.color_a
            || a.albedo.color_b != b.albedo.color_b
            || a.albedo.frequency != b.albedo.frequency
            || a.height_amplitude != b.height_amplitude
            || a.roughness != b.roughness
            || a.specular_strength != b.specular_strength;
        assert!(differs);
    }

    #[test]
    fn category_is_family_name() {
        let m = make_material("marble-warp", 7).unwrap();
        assert_eq!(m.category(), "marble-warp");
        assert_eq!(m.family, Family::MarbleWarp);
    }

    #[test]
    fn unknown_family_rejected() {
        assert!(matches!(make_material("plaid", 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn checker_frequency_two_has_two_colors() {
        let mut spec = MaterialSpec::generate(Family::Checker, 3);
        spec.albedo.frequency = 2.0;
        let maps = bake_maps(&spec, 32).unwrap();
        let colors: BTreeSet<[u32; 3]> = maps.albedo.iter().map(|c| c.map(f32::to_bits)).collect();
        assert_eq!(colors.len(), 2);
    }

    #[test]
    fn zero_amplitude_gives_flat_height() {
        for fam in Family::ALL {
            let mut spec = MaterialSpec::generate(fam, 11);
            spec.height_amplitude = 0.0;
            let maps = bake_maps(&spec, 16).unwrap();
            assert!(maps.height.iter().all(|&h| h == 0.0), "{fam}");
        }
    }

    #[test]
    fn value_noise_height_spans_range() {
        for seed in 0..8 {
            let spec = MaterialSpec::generate(Family::ValueNoise, seed);
            let maps = bake_maps(&spec, 64).unwrap();
            let lo = maps.height.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = maps.height.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            assert!(hi - lo >= 0.3, "seed {seed}: span {}", hi - lo);
        }
    }

    #[test]
    fn maps_in_unit_range_and_reject_bad_resolution() {
        for fam in Family::ALL {
            let maps = bake_maps(&MaterialSpec::generate(fam, 5), 32).unwrap();
            assert!(maps.albedo.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
            assert!(maps.height.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(maps.roughness.iter().all(|v| (0.05..=1.0).contains(v)));
        }
        let spec = MaterialSpec::generate(Family::Dots, 0);
        assert!(bake_maps(&spec, 8).is_err());
        assert!(bake_maps(&spec, 48).is_err());
    }

    #[test]
    fn maps_tile_across_the_wrap() {
        // Row R-1 continues into row 0: the wrap step is no larger than the
        // largest interior step of the same map.
        for fam in Family::ALL {
            let spec = MaterialSpec::generate(fam, 2);
            let r = 128;
            let maps = bake_maps(&spec, r).unwrap();
            let pattern = Pattern::new(&spec);
            for x in 0..r {
                let u = x as f64 / r as f64;
                let (t0, ..) = pattern.eval(u, 0.0);
                let (t1, ..) = pattern.eval(u, 1.0);
                assert!((t0 - t1).abs() < 1e-9, "{fam} not periodic at u={u}");
            }
            assert_eq!(maps.albedo.len(), r * r);
        }
    }
}
