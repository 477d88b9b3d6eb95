#![allow(dead_code)]

use std::path::Path;

use xdec_core::dataset::DatasetConfig;
use xdec_core::train::TrainConfig;

pub const SIZE: usize = 32;

/// Coarse phantoms and 32×32 images keep a full dataset build to a few seconds.
pub fn small_dataset() -> DatasetConfig {
    DatasetConfig {
        image_size: SIZE,
        images_per_domain: 16,
        eval_images: 4,
        grid_extents: [80, 60, 80],
        voxel_mm: 4.0,
        ..DatasetConfig::default()
    }
}

pub fn small_training(steps: u64) -> TrainConfig {
    TrainConfig {
        image_size: SIZE,
        batch_size: 2,
        steps,
        base_width: 4,
        checkpoint_interval: 0,
        ..TrainConfig::default()
    }
}

pub fn write_config<T: serde::Serialize>(path: &Path, value: &T) {
    std::fs::write(path, serde_json::to_vec_pretty(value).unwrap()).unwrap();
}

pub fn xdec(args: &[&str]) -> i32 {
    xdec::cli::run(std::iter::once("xdec").chain(args.iter().copied()))
}
