use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HammingScores {
    pub illumination: f64,
    pub geometry: f64,
}

/// One prediction keyed by the render that produced it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeyedPrediction {
    pub material: String,
    pub geometry: String,
    pub lighting: String,
    pub label: usize,
}

fn mean_pairwise_disagreement(labels: &[usize]) -> f64 {
    let mut pairs = 0usize;
    let mut diff = 0usize;
    for i in 0..labels.len() {
        for j in i + 1..labels.len() {
            pairs += 1;
            diff += (labels[i] != labels[j]) as usize;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        diff as f64 / pairs as f64
    }
}

/// Mean pairwise disagreement across lightings (geometry fixed) and across
/// geometries (lighting fixed). Every material needs its full
/// geometry × lighting grid.
pub fn robustness_hamming(predictions: &[KeyedPrediction]) -> Result<HammingScores> {
    type Grid<'a> = BTreeMap<(&'a str, &'a str), usize>;
    let mut per_material: BTreeMap<&str, Grid> = BTreeMap::new();
    for p in predictions {
        let grid = per_material.entry(&p.material).or_default();
        if grid.insert((&p.geometry, &p.lighting), p.label).is_some() {
            return Err(Error::invalid(format!(
                "duplicate prediction for {} / {} / {}",
                p.material, p.geometry, p.lighting
            )));
        }
    }
    if per_material.is_empty() {
        return Err(Error::MissingVariant("no predictions".into()));
    }
    let (mut illum, mut n_illum, mut geo, mut n_geo) = (0.0, 0usize, 0.0, 0usize);
    for (material, grid) in &per_material {
        let geoms: BTreeSet<&str> = grid.keys().map(|k| k.0).collect();
        let lights: BTreeSet<&str> = grid.keys().map(|k| k.1).collect();
        let fetch = |g: &str, l: &str| {
            grid.get(&(g, l)).copied().ok_or_else(|| {
                Error::MissingVariant(format!("{material}: no prediction for geometry {g}, lighting {l}"))
            })
        };
        for g in &geoms {
            let labels = lights.iter().map(|l| fetch(g, l)).collect::<Result<Vec<_>>>()?;
            illum += mean_pairwise_disagreement(&labels);
            n_illum += 1;
        }
        for l in &lights {
            let labels = geoms.iter().map(|g| fetch(g, l)).collect::<Result<Vec<_>>>()?;
            geo += mean_pairwise_disagreement(&labels);
            n_geo += 1;
        }
    }
    Ok(HammingScores {
        illumination: illum / n_illum as f64,
        geometry: geo / n_geo as f64,
    })
}
