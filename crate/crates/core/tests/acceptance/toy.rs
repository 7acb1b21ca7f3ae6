//! Toy-dataset training runs shared by the end-to-end and ablation criteria.
//!
//! `PHIEAT_TOY_SCALE=full` trains the default backbone for the default step
//! count. The default `reduced` scale uses a narrower, shallower backbone and
//! fewer steps so the suite finishes on a single CPU core.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::{Mutex, OnceLock};

use phieat::backbone::{BackboneConfig, ParamSet};
use phieat::evalsuite::{embed_dataset, evaluate, EvalConfig, EvalReport, Protocol};
use phieat::synthgen::{generate_dataset, DatasetConfig, LoadedDataset};
use phieat::trainer::{train, Pairing, TrainConfig, TrainOptions};
use phieat::DType;

use super::Outcome;

const CHANCE: f64 = 0.125;
const SEEDS: [u64; 3] = [0, 1, 2];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Variant {
    Full,
    NoContrast,
    SingleRender,
}

#[derive(Clone, Copy, Debug)]
struct Scores {
    top1: f64,
    iou: f64,
    illumination: f64,
    geometry: f64,
}

struct Toy {
    dir: PathBuf,
    data: LoadedDataset,
    runs: Mutex<BTreeMap<(Variant, u64), Scores>>,
}

fn full_scale() -> bool {
    std::env::var("PHIEAT_TOY_SCALE").is_ok_and(|v| v == "full")
}

fn base_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    if !full_scale() {
        cfg.total_steps = 300;
        cfg.batch_pairs = 16;
        // keep the teacher's effective averaging horizon in steps comparable
        // to a full-length run
        cfg.momentum_start = 1.0 - (1.0 - cfg.momentum_start) * 2000.0 / cfg.total_steps as f64;
        cfg.backbone = BackboneConfig {
            embed_dim: 64,
            depth: 2,
            num_heads: 4,
            prototype_count: 256,
            head_hidden_dim: 128,
            head_bottleneck_dim: 64,
            ibot_head_dim: 64,
            ..BackboneConfig::default()
        };
    }
    cfg.checkpoint_every = 0;
    cfg
}

static TOY: OnceLock<Result<Toy, String>> = OnceLock::new();

fn toy() -> Result<&'static Toy, String> {
    TOY.get_or_init(|| {
        let dir = std::env::temp_dir().join(format!("phieat-acceptance-{}", std::process::id()));
        let cfg = DatasetConfig { instances_per_family: 32, ..DatasetConfig::default() };
        generate_dataset(&cfg, &dir.join("data")).map_err(|e| e.to_string())?;
        let data = LoadedDataset::load(&dir.join("data")).map_err(|e| e.to_string())?;
        Ok(Toy { dir, data, runs: Mutex::new(BTreeMap::new()) })
    })
    .as_ref()
    .map_err(Clone::clone)
}

fn scores(data: &LoadedDataset, params: &ParamSet, bb: &BackboneConfig) -> phieat::Result<Scores> {
    let archive = embed_dataset(data, params, bb)?;
    let report: EvalReport = evaluate(&archive, &[Protocol::Knn, Protocol::Select, Protocol::Robust], &EvalConfig::default(), None)?;
    let (knn, sel, rob) = (report.knn.unwrap(), report.selection.unwrap(), report.robustness.unwrap());
    Ok(Scores { top1: knn.top1, iou: sel.iou, illumination: rob.illumination, geometry: rob.geometry })
}

fn run(toy: &Toy, variant: Variant, seed: u64) -> phieat::Result<Scores> {
    if let Some(s) = toy.runs.lock().unwrap().get(&(variant, seed)) {
        return Ok(*s);
    }
    let mut cfg = base_config();
    cfg.seed = seed;
    match variant {
        Variant::Full => {}
        Variant::NoContrast => cfg.loss.lambda_c = 0.0,
        Variant::SingleRender => cfg.pairing = Pairing::Single,
    }
    let out = toy.dir.join(format!("{variant:?}-{seed}"));
    let outcome = train(&cfg, &toy.data, &out, &TrainOptions::default())?;
    let s = scores(&toy.data, &outcome.state.teacher, &cfg.backbone)?;
    eprintln!("  {variant:?} seed {seed}: {s:?}");
    toy.runs.lock().unwrap().insert((variant, seed), s);
    Ok(s)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

pub fn end_to_end() -> Outcome {
    let toy = toy()?;
    let cfg = base_config();
    let random = scores(&toy.data, &ParamSet::init(&cfg.backbone, cfg.seed, DType::F32)?, &cfg.backbone)?;
    let trained = run(toy, Variant::Full, SEEDS[0])?;
    let knn = trained.top1 >= 3.0 * CHANCE && trained.top1 >= 2.0 * random.top1;
    let iou = trained.iou - random.iou >= 0.15;
    let hamming = trained.illumination < random.illumination && trained.geometry < random.geometry;
    Ok((
        knn && iou && hamming,
        format!(
            "{} steps; knn top1 {:.3} vs random {:.3} ({knn}); iou {:.3} vs {:.3} ({iou}); hamming illum {:.3} vs {:.3}, geom {:.3} vs {:.3} ({hamming})",
            cfg.total_steps, trained.top1, random.top1, trained.iou, random.iou, trained.illumination, random.illumination, trained.geometry, random.geometry
        ),
    ))
}

pub fn ablation_direction() -> Outcome {
    let toy = toy()?;
    let mut med = BTreeMap::new();
    for variant in [Variant::Full, Variant::NoContrast, Variant::SingleRender] {
        let tops = SEEDS.iter().map(|&s| run(toy, variant, s).map(|r| r.top1)).collect::<phieat::Result<Vec<_>>>()?;
        med.insert(variant, median(tops));
    }
    let (full, no_c, single) = (med[&Variant::Full], med[&Variant::NoContrast], med[&Variant::SingleRender]);
    let contrast = full >= no_c;
    let pairing = full >= single;
    Ok((
        contrast && pairing,
        format!("median knn top1 over {} seeds: lambda_c 0.25 {full:.3} vs 0 {no_c:.3} ({contrast}); multi-render {full:.3} vs single-render {single:.3} ({pairing})", SEEDS.len()),
    ))
}

/// Removes the rendered dataset and run directories, if any were created.
pub fn cleanup() {
    if let Some(Ok(t)) = TOY.get() {
        let _ = std::fs::remove_dir_all(&t.dir);
    }
}
