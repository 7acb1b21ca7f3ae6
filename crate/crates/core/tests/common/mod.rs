#![allow(dead_code)]

use std::path::Path;

use phieat::backbone::BackboneConfig;
use phieat::synthgen::{generate_dataset, DatasetConfig, Family, LoadedDataset};
use phieat::trainer::TrainConfig;
use phieat::views::ViewConfig;

pub fn tiny_dataset(dir: &Path, seed: u64) -> LoadedDataset {
    let cfg = DatasetConfig {
        families: vec![Family::Checker, Family::Stripes, Family::Dots],
        instances_per_family: 2,
        geometries_per_material: 2,
        lightings_per_material: 2,
        resolution: 32,
        scenes: 2,
        seed,
        geometry_override: None,
    };
    generate_dataset(&cfg, dir).unwrap();
    LoadedDataset::load(dir).unwrap()
}

pub fn tiny_backbone() -> BackboneConfig {
    BackboneConfig {
        image_size: 16,
        patch_size: 8,
        embed_dim: 16,
        depth: 1,
        num_heads: 2,
        num_registers: 2,
        prototype_count: 16,
        head_hidden_dim: 16,
        head_bottleneck_dim: 8,
        ibot_head_dim: 8,
        ..BackboneConfig::default()
    }
}

pub fn tiny_train_config(total_steps: u64) -> TrainConfig {
    TrainConfig {
        total_steps,
        batch_pairs: 3,
        checkpoint_every: 0,
        backbone: tiny_backbone(),
        views: ViewConfig {
            global_size: 16,
            local_size: 8,
            locals_per_view: 2,
            ..ViewConfig::default()
        },
        ..TrainConfig::default()
    }
}
pub mod oracle;
