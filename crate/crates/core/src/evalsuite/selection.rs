use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

/// Cosine similarity of every patch to patch `query`. `patches` is row-major
/// `[P, D]`. The query entry is exactly 1.
pub fn similarity_map(patches: &[f32], dim: usize, query: usize) -> Result<Vec<f64>> {
    if dim == 0 || patches.len() % dim != 0 {
        return Err(Error::Shape(format!("{} values do not split into {dim}-vectors", patches.len())));
    }
    let p = patches.len() / dim;
    if query >= p {
        return Err(Error::invalid(format!("query patch {query} out of range for {p} patches")));
    }
    let rows: Vec<&[f32]> = patches.chunks(dim).collect();
    let sq: Vec<f64> = rows.iter().map(|r| dot(r, r)).collect();
    let q = rows[query];
    Ok(rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            if i == query {
                return 1.0;
            }
            // sqrt of the product keeps identical vectors at exactly 1.
            let denom = (sq[i] * sq[query]).sqrt();
            if denom == 0.0 {
                0.0
            } else {
                (dot(q, r) / denom).clamp(-1.0, 1.0)
            }
        })
        .collect())
}

/// `map ≥ threshold`.
pub fn select_material(map: &[f64], threshold: f64) -> Vec<bool> {
    map.iter().map(|&v| v >= threshold).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectionMetrics {
    pub l1: f64,
    pub iou: f64,
    pub f1: f64,
}

/// IoU and F1 of `mask` against `gt_labels == query_label`; ℓ1 between the
/// clamped map and the binary ground truth.
pub fn selection_metrics(map: &[f64], mask: &[bool], gt_labels: &[usize], query_label: usize) -> Result<SelectionMetrics> {
    if map.len() != mask.len() || mask.len() != gt_labels.len() || map.is_empty() {
        return Err(Error::Shape(format!(
            "map {}, mask {}, labels {} do not share one patch grid",
            map.len(),
            mask.len(),
            gt_labels.len()
        )));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    let mut l1 = 0.0;
    for ((&v, &m), &g) in map.iter().zip(mask).zip(gt_labels) {
        let truth = g == query_label;
        match (m, truth) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
        l1 += (v.clamp(0.0, 1.0) - if truth { 1.0 } else { 0.0 }).abs();
    }
    let union = tp + fp + fn_;
    let iou = if union == 0 { 1.0 } else { tp as f64 / union as f64 };
    let denom = 2 * tp + fp + fn_;
    let f1 = if denom == 0 { 1.0 } else { 2.0 * tp as f64 / denom as f64 };
    Ok(SelectionMetrics {
        l1: l1 / map.len() as f64,
        iou,
        f1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_basics() {
        let p = [1.0f32, 0.0, 0.0, 1.0, 2.0, 0.0];
        let m = similarity_map(&p, 2, 0).unwrap();
        assert_eq!(m, vec![1.0, 0.0, 1.0]);
        assert!(similarity_map(&p, 2, 3).is_err());
        let same = [0.3f32, 0.4, 0.3, 0.4];
        assert_eq!(similarity_map(&same, 2, 1).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn threshold_is_inclusive() {
        assert_eq!(select_material(&[0.49, 0.5, 0.51], 0.5), vec![false, true, true]);
    }

    #[test]
    fn metric_cases() {
        let m = selection_metrics(&[1.0, 0.0], &[true, false], &[0, 1], 0).unwrap();
        assert_eq!((m.l1, m.iou, m.f1), (0.0, 1.0, 1.0));
        let m = selection_metrics(&[1.0; 4], &[true; 4], &[0, 0, 1, 1], 0).unwrap();
        assert_eq!(m.iou, 0.5);
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert!(selection_metrics(&[1.0], &[true, true], &[0, 0], 0).is_err());
    }
}
