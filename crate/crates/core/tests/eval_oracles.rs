mod common;

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::oracle;
use phieat::evalsuite::{kmeans_segment, knn_classify, robustness_hamming, select_material, selection_metrics, similarity_map, KMeansSettings};

#[test]
fn knn_matches_brute_force() {
    for case in 0..20u64 {
        let mut r = ChaCha8Rng::seed_from_u64(100 + case);
        let (n, d, classes) = (r.random_range(10..40), r.random_range(2..6), r.random_range(2..5));
        let mut gallery = oracle::unit_vectors(&mut r, n, d);
        // duplicates force similarity ties
        for _ in 0..3 {
            let (a, b) = (r.random_range(0..n), r.random_range(0..n));
            gallery[b] = gallery[a].clone();
        }
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..classes)).collect();
        let queries = oracle::unit_vectors(&mut r, 8, d);
        let excluded: Vec<HashSet<usize>> = (0..queries.len())
            .map(|_| (0..n).filter(|_| r.random_bool(0.2)).collect())
            .collect();
        let k = r.random_range(1..=8.min(n - excluded.iter().map(|e| e.len()).max().unwrap()));
        let got = knn_classify(&gallery, &labels, &queries, k, classes, |q, g| excluded[q].contains(&g)).unwrap();
        for (qi, q) in queries.iter().enumerate() {
            assert_eq!(got[qi], oracle::knn(&gallery, &labels, q, k, classes, &excluded[qi]), "case {case} query {qi}");
        }
    }
}

#[test]
fn hamming_matches_pooled_pairs() {
    for case in 0..20u64 {
        let mut r = ChaCha8Rng::seed_from_u64(200 + case);
        let preds = oracle::random_grid(&mut r);
        let got = robustness_hamming(&preds).unwrap();
        let (illum, geo) = oracle::hamming(&preds);
        assert!((got.illumination - illum).abs() < 1e-12, "case {case}");
        assert!((got.geometry - geo).abs() < 1e-12, "case {case}");
    }
}

#[test]
fn selection_matches_set_arithmetic() {
    for case in 0..20u64 {
        let mut r = ChaCha8Rng::seed_from_u64(300 + case);
        let (p, d, regions) = (r.random_range(16..64), r.random_range(4..9), r.random_range(2..5));
        let centers = oracle::unit_vectors(&mut r, regions, d);
        let gt: Vec<usize> = (0..p).map(|_| r.random_range(0..regions)).collect();
        let patches: Vec<Vec<f32>> = gt
            .iter()
            .map(|&g| centers[g].iter().map(|c| c + r.random_range(-0.4f32..0.4)).collect())
            .collect();
        let query = r.random_range(0..p);
        let flat = patches.concat();
        let map = similarity_map(&flat, d, query).unwrap();
        let mask = select_material(&map, 0.5);
        let got = selection_metrics(&map, &mask, &gt, gt[query]).unwrap();
        let (want_map, l1, iou, f1) = oracle::selection(&patches, query, &gt, 0.5);
        for (a, b) in map.iter().zip(&want_map) {
            assert!((a - b).abs() < 1e-12, "case {case}: {a} vs {b}");
        }
        assert!((got.l1 - l1).abs() < 1e-12, "case {case}");
        assert!((got.iou - iou).abs() < 1e-12, "case {case}");
        assert!((got.f1 - f1).abs() < 1e-12, "case {case}");
    }
}

#[test]
fn kmeans_finds_three_blobs() {
    let mut r = ChaCha8Rng::seed_from_u64(7);
    let (pts, labels) = oracle::three_blobs(&mut r, 20);
    let seg = kmeans_segment(&pts, &KMeansSettings::default()).unwrap();
    assert_eq!(seg.k, 3);
    assert!(seg.silhouette > 0.9, "silhouette {}", seg.silhouette);
    assert!(oracle::same_partition(&seg.labels, &labels));
}
