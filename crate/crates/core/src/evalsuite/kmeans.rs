use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansSettings {
    pub k_min: usize,
    pub k_max: usize,
    pub restarts: usize,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for KMeansSettings {
    fn default() -> Self {
        Self {
            k_min: 2,
            k_max: 12,
            restarts: 10,
            max_iters: 100,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segmentation {
    pub labels: Vec<usize>,
    pub k: usize,
    pub silhouette: f64,
    /// Set when every point coincides and no clustering is meaningful.
    pub degenerate: bool,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.iter().enumerate() {
        let d = dist2(p, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_init(points: &[Vec<f64>], k: usize, r: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut centers = vec![points[r.random_range(0..points.len())].clone()];
    while centers.len() < k {
        let d: Vec<f64> = points.iter().map(|p| nearest(p, &centers).1).collect();
        let total: f64 = d.iter().sum();
        let idx = if total <= 0.0 {
            r.random_range(0..points.len())
        } else {
            let mut target = r.random::<f64>() * total;
            let mut chosen = points.len() - 1;
            for (i, &di) in d.iter().enumerate() {
                if target < di {
                    chosen = i;
                    break;
                }
                target -= di;
            }
            chosen
        };
        centers.push(points[idx].clone());
    }
    centers
}

/// Lloyd iterations from a K-means++ start. Returns labels and inertia.
pub fn kmeans(points: &[Vec<f64>], k: usize, max_iters: usize, r: &mut impl Rng) -> (Vec<usize>, f64) {
    let dim = points[0].len();
    let mut centers = plus_plus_init(points, k, r);
    let mut labels: Vec<usize> = points.iter().map(|p| nearest(p, &centers).0).collect();
    for _ in 0..max_iters {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            sums[l].iter_mut().zip(p).for_each(|(s, v)| *s += v);
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centers).0).collect();
        if next == labels {
            break;
        }
        labels = next;
    }
    let inertia = points.iter().zip(&labels).map(|(p, &l)| dist2(p, &centers[l])).sum();
    (labels, inertia)
}

/// Mean silhouette with Euclidean distances. Singleton clusters score 0.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> f64 {
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let n = points.len();
    if n < 2 {
        return 0.0;
    }
    let mut sizes = vec![0usize; k];
    labels.iter().for_each(|&l| sizes[l] += 1);
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..n {
        let mut sum = vec![0.0; k];
        for j in 0..n {
            if i != j {
                sum[labels[j]] += dist2(&points[i], &points[j]).sqrt();
            }
        }
        let own = labels[i];
        if sizes[own] <= 1 {
            continue;
        }
        let a = sum[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sum[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    total / n as f64
}

/// Clusters `points` for every K in range and keeps the K with the highest
/// mean silhouette (ties go to the smaller K).
pub fn kmeans_segment(points: &[Vec<f64>], settings: &KMeansSettings) -> Result<Segmentation> {
    let n = points.len();
    if n == 0 {
        return Err(Error::invalid("no points to segment"));
    }
    let degenerate = points.iter().all(|p| p == &points[0]);
    let k_max = settings.k_max.min(n.saturating_sub(1));
    if degenerate || k_max < settings.k_min.max(2) {
        return Ok(Segmentation {
            labels: vec![0; n],
            k: 2,
            silhouette: 0.0,
            degenerate: true,
        });
    }
    let mut best: Option<Segmentation> = None;
    for k in settings.k_min.max(2)..=k_max {
        let mut run: Option<(Vec<usize>, f64)> = None;
        for restart in 0..settings.restarts.max(1) {
            let mut r = rng::stream(settings.seed, &[0x6b6d, k as u64, restart as u64]);
            let (labels, inertia) = kmeans(points, k, settings.max_iters, &mut r);
            if run.as_ref().is_none_or(|(_, best)| inertia < *best) {
                run = Some((labels, inertia));
            }
        }
        let (labels, _) = run.unwrap();
        let s = silhouette(points, &labels);
        if best.as_ref().is_none_or(|b| s > b.silhouette) {
            best = Some(Segmentation {
                labels,
                k,
                silhouette: s,
                degenerate: false,
            });
        }
    }
    Ok(best.unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn antipodal_clusters_pick_two() {
        let mut pts = Vec::new();
        for i in 0..10 {
            let e = i as f64 * 1e-3;
            pts.push(vec![1.0 - e, e]);
            pts.push(vec![-1.0 + e, -e]);
        }
        let s = kmeans_segment(&pts, &KMeansSettings::default()).unwrap();
        assert_eq!(s.k, 2);
        assert!(s.silhouette > 0.99);
    }

    #[test]
    fn identical_points_are_flagged() {
        let pts = vec![vec![0.5, 0.5]; 20];
        let s = kmeans_segment(&pts, &KMeansSettings::default()).unwrap();
        assert!(s.degenerate);
        assert_eq!((s.k, s.silhouette), (2, 0.0));
    }
}
