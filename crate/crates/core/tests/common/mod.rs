#![allow(dead_code)]

use std::path::Path;

use pdlab_core::encoder::{EncoderConfig, TowerConfig};
use pdlab_core::synth::DataConfig;
use pdlab_core::ExperimentConfig;

pub fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        text: TowerConfig {
            layers: 1,
            width: 16,
            heads: 2,
            mlp_ratio: 2,
        },
        image: TowerConfig {
            layers: 1,
            width: 12,
            heads: 2,
            mlp_ratio: 2,
        },
        joint_dim: 8,
        ..EncoderConfig::default()
    }
}

pub fn tiny_data() -> DataConfig {
    DataConfig {
        source_ids: 16,
        source_val_ids: 2,
        source_test_ids: 4,
        source_images_per_id: 2,
        target_train_ids: 6,
        target_test_ids: 4,
        target_images_per_id: 2,
        ..DataConfig::default()
    }
}

/// A configuration that trains in well under a second per phase.
pub fn tiny_config(out: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig {
        encoder: tiny_encoder(),
        data: tiny_data(),
        batch_size: 8,
        seeds: vec![0, 1],
        out_dir: out.to_path_buf(),
        ..ExperimentConfig::default()
    };
    c.schedule.total_epochs = 2;
    c.schedule.warmup_epochs = 1;
    c.pretrain_schedule.total_epochs = 2;
    c.pretrain_schedule.warmup_epochs = 1;
    c
}
