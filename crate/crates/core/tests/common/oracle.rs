//! Brute-force reference implementations of the evaluation kernels, written
//! without sharing code or structure with the library versions.

use std::collections::{BTreeMap, HashSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use phieat::evalsuite::KeyedPrediction;

pub fn unit_vectors(r: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f32>> {
    (0..n)
        .map(|_| {
            let v: Vec<f32> = (0..d).map(|_| r.random_range(-1.0f32..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-6);
            v.iter().map(|x| x / norm).collect()
        })
        .collect()
}

/// k-NN by repeated arg-max extraction, then an explicit tie-aware vote.
pub fn knn(gallery: &[Vec<f32>], labels: &[usize], query: &[f32], k: usize, classes: usize, excluded: &HashSet<usize>) -> usize {
    let sims: Vec<f64> = gallery
        .iter()
        .map(|g| {
            let mut s = 0.0f64;
            for i in 0..g.len() {
                s += g[i] as f64 * query[i] as f64;
            }
            s
        })
        .collect();
    let mut taken: HashSet<usize> = excluded.clone();
    let mut votes = vec![0.0f64; classes];
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for j in 0..gallery.len() {
            if taken.contains(&j) {
                continue;
            }
            // strict comparison keeps the lowest index among equal similarities
            if best.map_or(true, |b| sims[j] > sims[b]) {
                best = Some(j);
            }
        }
        let j = best.expect("gallery smaller than k");
        taken.insert(j);
        votes[labels[j]] += sims[j];
    }
    let top = votes.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (0..classes).find(|&c| votes[c] == top).unwrap()
}

/// Pooled disagreement over every same-geometry / same-lighting pair.
pub fn hamming(preds: &[KeyedPrediction]) -> (f64, f64) {
    let (mut illum_diff, mut illum_n, mut geo_diff, mut geo_n) = (0usize, 0usize, 0usize, 0usize);
    for (i, a) in preds.iter().enumerate() {
        for b in &preds[i + 1..] {
            if a.material != b.material {
                continue;
            }
            if a.geometry == b.geometry && a.lighting != b.lighting {
                illum_n += 1;
                illum_diff += (a.label != b.label) as usize;
            }
            if a.lighting == b.lighting && a.geometry != b.geometry {
                geo_n += 1;
                geo_diff += (a.label != b.label) as usize;
            }
        }
    }
    (illum_diff as f64 / illum_n as f64, geo_diff as f64 / geo_n as f64)
}

/// Full material grids with random labels.
pub fn random_grid(r: &mut ChaCha8Rng) -> Vec<KeyedPrediction> {
    let (materials, geoms, lights) = (r.random_range(1..5), r.random_range(2..5), r.random_range(2..5));
    let classes = r.random_range(2..5);
    let mut out = Vec::new();
    for m in 0..materials {
        for g in 0..geoms {
            for l in 0..lights {
                out.push(KeyedPrediction {
                    material: format!("mat{m}"),
                    geometry: format!("geo{g}"),
                    lighting: format!("light{l}"),
                    label: r.random_range(0..classes),
                });
            }
        }
    }
    out
}

/// Cosine map, threshold mask and set-based IoU / F1 / ℓ1.
pub fn selection(patches: &[Vec<f32>], query: usize, gt: &[usize], threshold: f64) -> (Vec<f64>, f64, f64, f64) {
    let norm = |v: &[f32]| v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let q = &patches[query];
    let map: Vec<f64> = patches
        .iter()
        .map(|p| {
            let dot: f64 = p.iter().zip(q).map(|(a, b)| *a as f64 * *b as f64).sum();
            (dot / (norm(p) * norm(q))).clamp(-1.0, 1.0)
        })
        .collect();
    let truth: HashSet<usize> = (0..gt.len()).filter(|&i| gt[i] == gt[query]).collect();
    let picked: HashSet<usize> = (0..map.len()).filter(|&i| map[i] >= threshold).collect();
    let inter = truth.intersection(&picked).count() as f64;
    let union = truth.union(&picked).count() as f64;
    let iou = inter / union;
    let f1 = 2.0 * inter / (truth.len() + picked.len()) as f64;
    let l1 = map
        .iter()
        .enumerate()
        .map(|(i, v)| (v.clamp(0.0, 1.0) - truth.contains(&i) as u8 as f64).abs())
        .sum::<f64>()
        / map.len() as f64;
    (map, l1, iou, f1)
}

/// Three tight, well separated blobs on the unit sphere in R^3.
pub fn three_blobs(r: &mut ChaCha8Rng, per_blob: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let centers = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let mut pts = Vec::new();
    let mut labels = Vec::new();
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per_blob {
            let v: Vec<f64> = center.iter().map(|x| x + r.random_range(-0.05..0.05)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            pts.push(v.iter().map(|x| x / n).collect());
            labels.push(c);
        }
    }
    (pts, labels)
}

/// Whether two labelings describe the same partition.
pub fn same_partition(a: &[usize], b: &[usize]) -> bool {
    let mut map = BTreeMap::new();
    let mut back = BTreeMap::new();
    a.iter().zip(b).all(|(x, y)| *map.entry(*x).or_insert(*y) == *y && *back.entry(*y).or_insert(*x) == *x)
}
