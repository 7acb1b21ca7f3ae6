//! Evaluation over frozen features: material selection, k-NN
//! classification, Hamming robustness, and K-means segmentation.

mod embed;
mod kmeans;
mod knn;
pub mod plot;
mod robustness;
mod selection;

use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::synthgen::Family;

pub use embed::{embed_dataset, embed_images, FeatureArchive, SampleInfo, SceneInfo, ARCHIVE_VERSION};
pub use kmeans::{kmeans, kmeans_segment, silhouette, KMeansSettings, Segmentation};
pub use knn::{classification_metrics, knn_classify, knn_vote, ClassificationMetrics};
pub use robustness::{robustness_hamming, HammingScores, KeyedPrediction};
pub use selection::{select_material, selection_metrics, similarity_map, SelectionMetrics};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Knn,
    Select,
    Robust,
    Segment,
}

impl Protocol {
    pub const ALL: [Protocol; 4] = [Protocol::Knn, Protocol::Select, Protocol::Robust, Protocol::Segment];
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "knn" => Ok(Self::Knn),
            "select" => Ok(Self::Select),
            "robust" => Ok(Self::Robust),
            "segment" => Ok(Self::Segment),
            other => Err(Error::invalid(format!(
                "unknown protocol `{other}` (expected knn, select, robust, segment)"
            ))),
        }
    }
}

/// Parses a comma-separated protocol list.
pub fn parse_protocols(list: &str) -> Result<Vec<Protocol>> {
    let mut out: Vec<Protocol> = Vec::new();
    for p in list.split(',').filter(|s| !s.trim().is_empty()) {
        let p: Protocol = p.parse()?;
        if !out.contains(&p) {
            out.push(p);
        }
    }
    if out.is_empty() {
        return Err(Error::invalid("empty protocol list"));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub k: usize,
    pub threshold: f64,
    pub queries_per_scene: usize,
    /// Leave out every render of the query's material, not just the query.
    pub exclude_same_material: bool,
    pub kmeans: KMeansSettings,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 16,
            threshold: 0.5,
            queries_per_scene: 8,
            exclude_same_material: true,
            kmeans: KMeansSettings::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationSummary {
    pub chosen_k: Vec<usize>,
    pub mean_silhouette: f64,
    pub degenerate_scenes: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selection: Option<SelectionMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub knn: Option<ClassificationMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub robustness: Option<HammingScores>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub segmentation: Option<SegmentationSummary>,
}

impl EvalReport {
    /// Range checks on every present metric.
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Numeric(format!("{name} = {v} outside [0, 1]")))
            }
        };
        if let Some(s) = &self.selection {
            unit("selection.l1", s.l1)?;
            unit("selection.iou", s.iou)?;
            unit("selection.f1", s.f1)?;
        }
        if let Some(k) = &self.knn {
            unit("knn.top1", k.top1)?;
            unit("knn.precision", k.precision)?;
            unit("knn.recall", k.recall)?;
            unit("knn.f1", k.f1)?;
        }
        if let Some(r) = &self.robustness {
            unit("robustness.illumination", r.illumination)?;
            unit("robustness.geometry", r.geometry)?;
        }
        Ok(())
    }
}

/// k-NN predictions (family indices) for every sample in the archive.
pub fn knn_predictions(archive: &FeatureArchive, cfg: &EvalConfig) -> Result<Vec<usize>> {
    let labels: Vec<usize> = archive.samples.iter().map(|s| s.family.index()).collect();
    let samples = &archive.samples;
    knn_classify(
        &archive.globals,
        &labels,
        &archive.globals,
        cfg.k,
        Family::ALL.len(),
        |q, g| q == g || (cfg.exclude_same_material && samples[q].material_id == samples[g].material_id),
    )
}

/// Seeded query patches for scene `scene`, cycling through its regions.
pub fn scene_queries(labels: &[usize], scene: usize, cfg: &EvalConfig) -> Vec<usize> {
    let mut regions: Vec<usize> = labels.to_vec();
    regions.sort_unstable();
    regions.dedup();
    let mut r = rng::stream(cfg.seed, &[0x7365_6c65, scene as u64]);
    (0..cfg.queries_per_scene)
        .map(|q| {
            let region = regions[q % regions.len()];
            let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == region).collect();
            members[r.random_range(0..members.len())]
        })
        .collect()
}

/// Mean selection metrics over all queries of all scenes.
pub fn evaluate_selection(archive: &FeatureArchive, cfg: &EvalConfig) -> Result<SelectionMetrics> {
    if archive.scenes.is_empty() {
        return Err(Error::invalid("feature archive has no selection scenes"));
    }
    let per_scene: Vec<Vec<SelectionMetrics>> = archive
        .scenes
        .par_iter()
        .enumerate()
        .map(|(si, scene)| {
            scene_queries(&scene.patch_labels, si, cfg)
                .into_iter()
                .map(|q| {
                    let map = similarity_map(&archive.scene_patches[si], archive.dim, q)?;
                    let mask = select_material(&map, cfg.threshold);
                    let m = selection_metrics(&map, &mask, &scene.patch_labels, scene.patch_labels[q])?;
                    if m.iou > m.f1 + 1e-12 {
                        return Err(Error::Numeric(format!("IoU {} exceeds F1 {}", m.iou, m.f1)));
                    }
                    Ok(m)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let all: Vec<SelectionMetrics> = per_scene.into_iter().flatten().collect();
    let n = all.len() as f64;
    Ok(SelectionMetrics {
        l1: all.iter().map(|m| m.l1).sum::<f64>() / n,
        iou: all.iter().map(|m| m.iou).sum::<f64>() / n,
        f1: all.iter().map(|m| m.f1).sum::<f64>() / n,
    })
}

/// K-means segmentation of every scene's patch embeddings.
pub fn evaluate_segmentation(archive: &FeatureArchive, cfg: &EvalConfig) -> Result<(SegmentationSummary, Vec<Segmentation>)> {
    if archive.scenes.is_empty() {
        return Err(Error::invalid("feature archive has no selection scenes"));
    }
    let segs: Vec<Segmentation> = archive
        .scene_patches
        .par_iter()
        .enumerate()
        .map(|(si, flat)| {
            let points: Vec<Vec<f64>> = flat
                .chunks(archive.dim)
                .map(|r| r.iter().map(|&v| v as f64).collect())
                .collect();
            let settings = KMeansSettings {
                seed: rng::mix(cfg.kmeans.seed, &[si as u64]),
                ..cfg.kmeans.clone()
            };
            kmeans_segment(&points, &settings)
        })
        .collect::<Result<_>>()?;
    let summary = SegmentationSummary {
        chosen_k: segs.iter().map(|s| s.k).collect(),
        mean_silhouette: segs.iter().map(|s| s.silhouette).sum::<f64>() / segs.len() as f64,
        degenerate_scenes: segs.iter().filter(|s| s.degenerate).count(),
    };
    Ok((summary, segs))
}

/// Runs the requested protocols. With `plot_dir`, writes one heatmap, mask
/// and label map per scene.
pub fn evaluate(archive: &FeatureArchive, protocols: &[Protocol], cfg: &EvalConfig, plot_dir: Option<&Path>) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    let needs_preds = protocols.contains(&Protocol::Knn) || protocols.contains(&Protocol::Robust);
    let preds = if needs_preds { Some(knn_predictions(archive, cfg)?) } else { None };
    if protocols.contains(&Protocol::Knn) {
        let truth: Vec<usize> = archive.samples.iter().map(|s| s.family.index()).collect();
        report.knn = Some(classification_metrics(&truth, preds.as_ref().unwrap(), Family::ALL.len())?);
    }
    if protocols.contains(&Protocol::Robust) {
        let keyed: Vec<KeyedPrediction> = archive
            .samples
            .iter()
            .zip(preds.as_ref().unwrap())
            .map(|(s, &label)| KeyedPrediction {
                material: s.material_id.clone(),
                geometry: s.geometry_id.clone(),
                lighting: s.lighting_id.clone(),
                label,
            })
            .collect();
        report.robustness = Some(robustness_hamming(&keyed)?);
    }
    if protocols.contains(&Protocol::Select) {
        report.selection = Some(evaluate_selection(archive, cfg)?);
    }
    let mut segs = None;
    if protocols.contains(&Protocol::Segment) {
        let (summary, s) = evaluate_segmentation(archive, cfg)?;
        report.segmentation = Some(summary);
        segs = Some(s);
    }
    if let Some(dir) = plot_dir {
        write_plots(archive, cfg, segs.as_deref(), dir)?;
    }
    report.validate()?;
    Ok(report)
}

fn write_plots(archive: &FeatureArchive, cfg: &EvalConfig, segs: Option<&[Segmentation]>, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    const SCALE: usize = 8;
    for (si, scene) in archive.scenes.iter().enumerate() {
        if let Some(&q) = scene_queries(&scene.patch_labels, si, cfg).first() {
            let map = similarity_map(&archive.scene_patches[si], archive.dim, q)?;
            plot::save(&plot::heatmap_image(&map, archive.grid, SCALE, Some(q)), &dir.join(format!("scene-{si:03}.heatmap.png")))?;
            let mask = select_material(&map, cfg.threshold);
            plot::save(&plot::mask_image(&mask, archive.grid, SCALE), &dir.join(format!("scene-{si:03}.select.png")))?;
        }
        if let Some(segs) = segs {
            plot::save(
                &plot::label_image(&segs[si].labels, archive.grid, SCALE),
                &dir.join(format!("scene-{si:03}.segments.png")),
            )?;
        }
    }
    Ok(())
}
