//! Macrogeometry templates: analytic height fields over the unit square
//! together with the material families they may carry.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::material::Family;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum HeightFn {
    Flat,
    SineRipples { amplitude: f64, frequency: f64 },
    GaussianBumps { amplitude: f64, sigma: f64, centers: Vec<[f64; 2]> },
    TiltedPlane { slope_x: f64, slope_y: f64 },
    CrossedWaves { amplitude: f64, frequency: f64 },
    Dome { height: f64, radius: f64 },
}

impl HeightFn {
    /// Height at object-space point `(x, y)`, both in `[-0.5, 0.5]` for the
    /// visible square. Every variant is C¹.
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        use std::f64::consts::TAU;
        match self {
            HeightFn::Flat => 0.0,
            HeightFn::SineRipples { amplitude, frequency } => amplitude * (TAU * frequency * x).sin(),
            HeightFn::GaussianBumps { amplitude, sigma, centers } => centers
                .iter()
                .map(|c| {
                    let d2 = (x - c[0]).powi(2) + (y - c[1]).powi(2);
                    amplitude * (-d2 / (2.0 * sigma * sigma)).exp()
                })
                .sum(),
            HeightFn::TiltedPlane { slope_x, slope_y } => slope_x * x + slope_y * y,
            HeightFn::CrossedWaves { amplitude, frequency } => {
                0.5 * amplitude * ((TAU * frequency * x).sin() + (TAU * frequency * y).sin())
            }
            HeightFn::Dome { height, radius } => {
                let q = (x * x + y * y) / (radius * radius);
                if q < 1.0 {
                    height * (1.0 - q).powi(2)
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometryTemplate {
    pub geometry_id: String,
    pub height_fn: HeightFn,
    pub allowed_families: BTreeSet<Family>,
}

impl GeometryTemplate {
    pub fn allows(&self, family: Family) -> bool {
        self.allowed_families.contains(&family)
    }

    pub fn by_id(id: &str) -> Option<GeometryTemplate> {
        library().into_iter().find(|t| t.geometry_id == id)
    }
}

/// The fixed template library. Rigid, low-curvature shapes carry the hard
/// families (tiles, stone cells, dots); wavy shapes carry the soft ones
/// (fabric stripes, brushed sheets, marble, noise).
pub fn library() -> Vec<GeometryTemplate> {
    use Family::*;
    let t = |id: &str, height_fn: HeightFn, fams: &[Family]| GeometryTemplate {
        geometry_id: id.to_string(),
        height_fn,
        allowed_families: fams.iter().copied().collect(),
    };
    vec![
        t("flat", HeightFn::Flat, &Family::ALL),
        t(
            "sine-ripples",
            HeightFn::SineRipples {
                amplitude: 0.03,
                frequency: 2.0,
            },
            &[Stripes, ValueNoise, MarbleWarp, Brushed, GradientRamp],
        ),
        t(
            "gaussian-bumps",
            HeightFn::GaussianBumps {
                amplitude: 0.06,
                sigma: 0.12,
                centers: vec![[-0.22, -0.18], [0.2, -0.25], [0.05, 0.2], [-0.3, 0.3], [0.33, 0.28]],
            },
            &[Cells, Dots, ValueNoise, MarbleWarp, Checker, Stripes],
        ),
        t(
            "tilted-plane",
            HeightFn::TiltedPlane {
                slope_x: 0.45,
                slope_y: -0.25,
            },
            &Family::ALL,
        ),
        t(
            "crossed-waves",
            HeightFn::CrossedWaves {
                amplitude: 0.025,
                frequency: 2.5,
            },
            &[Stripes, Brushed, ValueNoise, GradientRamp, Dots],
        ),
        t(
            "dome",
            HeightFn::Dome {
                height: 0.25,
                radius: 0.55,
            },
            &[Checker, Cells, Dots, MarbleWarp, GradientRamp, Brushed],
        ),
    ]
}

/// Templates allowed for `family`, in library order.
pub fn templates_for(family: Family) -> Vec<GeometryTemplate> {
    library().into_iter().filter(|t| t.allows(family)).collect()
}
