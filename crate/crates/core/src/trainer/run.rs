use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use candle_core::DType;
use rand::seq::index;

use super::{load_checkpoint, save_checkpoint, train_step, Pairing, StepMetrics, TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::rng;
use crate::synthgen::LoadedDataset;
use crate::views::{assemble_batch, sample_pair_from, PairDraw};

pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const LAST_CHECKPOINT: &str = "last.safetensors";
pub const METRICS_FILE: &str = "metrics.jsonl";
const PAIRS_TAG: u64 = 0x7061_6972;

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Continue from `<out>/checkpoints/last.safetensors` when present.
    pub resume: bool,
    /// Stop (with a checkpoint) once this many steps are complete.
    pub stop_after: Option<u64>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    /// Metrics of the steps run by this call.
    pub metrics: Vec<StepMetrics>,
    pub checkpoint: PathBuf,
    pub metrics_path: PathBuf,
}

/// The pairs of step `step`: `batch_pairs` distinct materials, each with two
/// views chosen by the pairing mode.
pub fn draw_pairs(groups: &[(String, Vec<usize>)], cfg: &TrainConfig, step: u64) -> Result<Vec<PairDraw>> {
    if groups.len() < cfg.batch_pairs {
        return Err(Error::invalid(format!(
            "batch_pairs {} exceeds the {} materials in the dataset",
            cfg.batch_pairs,
            groups.len()
        )));
    }
    let mut r = rng::stream(cfg.seed, &[PAIRS_TAG, step]);
    let mut chosen = index::sample(&mut r, groups.len(), cfg.batch_pairs).into_vec();
    chosen.sort_unstable();
    chosen
        .into_iter()
        .map(|g| {
            let (id, variants) = &groups[g];
            let views = match cfg.pairing {
                Pairing::Multi => {
                    let (a, b) = sample_pair_from(variants, id, &mut r)?;
                    [a, b]
                }
                Pairing::Single => {
                    let a = variants[index::sample(&mut r, variants.len(), 1).index(0)];
                    [a, a]
                }
            };
            Ok(PairDraw {
                material_id: id.clone(),
                views,
            })
        })
        .collect()
}

fn write_metrics_prefix(path: &Path, keep_below: u64) -> Result<()> {
    let mut kept = Vec::new();
    if path.exists() {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        for line in BufReader::new(f).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let m: StepMetrics = serde_json::from_str(&line)?;
            if m.step < keep_below {
                kept.push(line);
            }
        }
    }
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    for line in kept {
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Runs training to `total_steps` (or `stop_after`), writing
/// `<out>/metrics.jsonl` and checkpoints under `<out>/checkpoints/`.
pub fn train(cfg: &TrainConfig, data: &LoadedDataset, out: &Path, options: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let ckpt_dir = out.join(CHECKPOINT_DIR);
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let last = ckpt_dir.join(LAST_CHECKPOINT);
    let metrics_path = out.join(METRICS_FILE);

    let mut state = if options.resume && last.exists() {
        let state = load_checkpoint(&last, Some(&cfg.backbone))?;
        if &state.config != cfg {
            return Err(Error::Checkpoint(format!(
                "{}: training config differs from the checkpoint; resume needs the same config",
                last.display()
            )));
        }
        log::info!("resuming from step {}", state.step);
        state
    } else {
        if options.resume {
            log::warn!("no checkpoint at {}, starting fresh", last.display());
        }
        TrainState::new(cfg, DType::F32)?
    };
    write_metrics_prefix(&metrics_path, state.step)?;

    let groups: Vec<(String, Vec<usize>)> = data.manifest.by_material().into_iter().collect();
    let stop = options.stop_after.unwrap_or(cfg.total_steps).min(cfg.total_steps);
    let mut log_file = OpenOptions::new()
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let mut metrics = Vec::new();
    while state.step < stop {
        let pairs = draw_pairs(&groups, cfg, state.step)?;
        let batch = assemble_batch(&pairs, &data.images, &cfg.views, cfg.seed, state.step)?;
        let m = train_step(&mut state, &batch)?;
        writeln!(log_file, "{}", serde_json::to_string(&m)?).map_err(|e| Error::io(&metrics_path, e))?;
        if m.step % 10 == 0 {
            log::info!("step {} total {:.4} image {:.4} contrast {:.4}", m.step, m.total, m.image, m.contrast);
        }
        metrics.push(m);
        if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 {
            let numbered = ckpt_dir.join(format!("step-{:06}.safetensors", state.step));
            save_checkpoint(&state, &numbered)?;
            save_checkpoint(&state, &last)?;
        }
    }
    save_checkpoint(&state, &last)?;
    Ok(TrainOutcome {
        state,
        metrics,
        checkpoint: last,
        metrics_path,
    })
}
