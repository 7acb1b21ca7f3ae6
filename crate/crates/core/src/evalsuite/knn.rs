use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Top-1 accuracy plus macro-averaged precision, recall and F1.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub top1: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Similarity-weighted k-NN vote. `sims[j]` is the cosine to gallery item `j`
/// and `allowed[j]` says whether it may vote. Neighbors are ranked by
/// similarity, ties by gallery index; class ties go to the smaller class.
pub fn knn_vote(sims: &[f64], labels: &[usize], allowed: impl Fn(usize) -> bool, k: usize, num_classes: usize) -> Result<usize> {
    let mut cand: Vec<usize> = (0..sims.len()).filter(|&j| allowed(j)).collect();
    if k == 0 || k > cand.len() {
        return Err(Error::invalid(format!("k = {k} with {} gallery items", cand.len())));
    }
    cand.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    let mut score = vec![0f64; num_classes];
    for &j in &cand[..k] {
        score[labels[j]] += sims[j];
    }
    let mut best = 0;
    for c in 1..num_classes {
        if score[c] > score[best] {
            best = c;
        }
    }
    Ok(best)
}

/// Predicts a label for every query from a gallery of unit vectors.
/// `exclude(q, g)` removes gallery item `g` from the vote of query `q`.
pub fn knn_classify(
    gallery: &[Vec<f32>],
    gallery_labels: &[usize],
    queries: &[Vec<f32>],
    k: usize,
    num_classes: usize,
    exclude: impl Fn(usize, usize) -> bool + Sync,
) -> Result<Vec<usize>> {
    use rayon::prelude::*;
    if gallery.len() != gallery_labels.len() {
        return Err(Error::Shape("gallery and labels differ in length".into()));
    }
    if let Some(&bad) = gallery_labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::invalid(format!("label {bad} outside {num_classes} classes")));
    }
    queries
        .par_iter()
        .enumerate()
        .map(|(qi, q)| {
            let sims: Vec<f64> = gallery
                .iter()
                .map(|g| g.iter().zip(q).map(|(a, b)| *a as f64 * *b as f64).sum())
                .collect();
            knn_vote(&sims, gallery_labels, |j| !exclude(qi, j), k, num_classes)
        })
        .collect()
}

/// Accuracy and macro precision/recall/F1. Classes absent from both truth and
/// predictions are skipped; a class with no predictions has precision 0.
pub fn classification_metrics(truth: &[usize], pred: &[usize], num_classes: usize) -> Result<ClassificationMetrics> {
    if truth.len() != pred.len() || truth.is_empty() {
        return Err(Error::Shape("truth and predictions must be non-empty and equal length".into()));
    }
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    for (&t, &p) in truth.iter().zip(pred) {
        if t >= num_classes || p >= num_classes {
            return Err(Error::invalid("label outside the class range"));
        }
        confusion[t][p] += 1;
    }
    let correct: usize = (0..num_classes).map(|c| confusion[c][c]).sum();
    let (mut ps, mut rs, mut fs, mut n) = (0.0, 0.0, 0.0, 0usize);
    for c in 0..num_classes {
        let tp = confusion[c][c] as f64;
        let predicted: usize = (0..num_classes).map(|t| confusion[t][c]).sum();
        let actual: usize = confusion[c].iter().sum();
        if predicted == 0 && actual == 0 {
            continue;
        }
        let p = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
        let r = if actual == 0 { 0.0 } else { tp / actual as f64 };
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        ps += p;
        rs += r;
        fs += f;
        n += 1;
    }
    let n = n as f64;
    Ok(ClassificationMetrics {
        top1: correct as f64 / truth.len() as f64,
        precision: ps / n,
        recall: rs / n,
        f1: fs / n,
    })
}
