//! Analytic two-light plus ambient illumination.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LightingCondition {
    pub lighting_id: String,
    pub key_direction: [f64; 3],
    pub key_intensity: f64,
    pub ambient: f64,
    pub fill_direction: [f64; 3],
    pub fill_intensity: f64,
}

pub(crate) fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Direction from azimuth and elevation (radians), z up toward the viewer.
fn from_angles(azimuth: f64, elevation: f64) -> [f64; 3] {
    normalize([
        elevation.cos() * azimuth.cos(),
        elevation.cos() * azimuth.sin(),
        elevation.sin(),
    ])
}

impl LightingCondition {
    pub fn new(id: &str, key: [f64; 3], key_intensity: f64, ambient: f64, fill: [f64; 3], fill_intensity: f64) -> Self {
        Self {
            lighting_id: id.to_string(),
            key_direction: normalize(key),
            key_intensity,
            ambient,
            fill_direction: normalize(fill),
            fill_intensity,
        }
    }

    /// The same condition with both lights rotated by `angle` about the view axis.
    pub fn rotated(&self, angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        let rot = |d: [f64; 3]| normalize([c * d[0] - s * d[1], s * d[0] + c * d[1], d[2]]);
        Self {
            key_direction: rot(self.key_direction),
            fill_direction: rot(self.fill_direction),
            ..self.clone()
        }
    }

    pub fn by_id(id: &str) -> Option<LightingCondition> {
        library().into_iter().find(|l| l.lighting_id == id)
    }
}

/// Eight fixed conditions spanning grazing to overhead key lights, with
/// varying ambient and fill.
pub fn library() -> Vec<LightingCondition> {
    use std::f64::consts::PI;
    let deg = PI / 180.0;
    let table: [(f64, f64, f64, f64, f64, f64, f64); 8] = [
        // key az, key el, key I, ambient, fill az, fill el, fill I
        (20.0, 70.0, 0.85, 0.15, 200.0, 40.0, 0.20),
        (110.0, 35.0, 1.10, 0.05, 290.0, 30.0, 0.10),
        (200.0, 55.0, 0.70, 0.30, 20.0, 50.0, 0.25),
        (300.0, 25.0, 1.25, 0.08, 120.0, 60.0, 0.05),
        (60.0, 80.0, 0.60, 0.25, 240.0, 20.0, 0.40),
        (160.0, 45.0, 0.95, 0.12, 340.0, 35.0, 0.30),
        (250.0, 30.0, 1.05, 0.20, 70.0, 70.0, 0.00),
        (340.0, 60.0, 0.80, 0.02, 160.0, 25.0, 0.35),
    ];
    table
        .iter()
        .enumerate()
        .map(|(i, &(ka, ke, ki, amb, fa, fe, fi))| LightingCondition {
            lighting_id: format!("light-{i}"),
            key_direction: from_angles(ka * deg, ke * deg),
            key_intensity: ki,
            ambient: amb,
            fill_direction: from_angles(fa * deg, fe * deg),
            fill_intensity: fi,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn norm(v: [f64; 3]) -> f64 {
        (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
    }

    #[test]
    fn library_invariants() {
        for l in library() {
            assert!((norm(l.key_direction) - 1.0).abs() < 1e-6);
            assert!((norm(l.fill_direction) - 1.0).abs() < 1e-6);
            assert!(l.key_intensity > 0.0 && l.fill_intensity >= 0.0);
            assert!((0.0..=0.5).contains(&l.ambient));
            let r = l.rotated(1.234);
            assert!((norm(r.key_direction) - 1.0).abs() < 1e-6);
            assert!((r.key_direction[2] - l.key_direction[2]).abs() < 1e-12);
        }
    }
}
