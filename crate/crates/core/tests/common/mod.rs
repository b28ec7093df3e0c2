#![allow(dead_code)]

use polarbev::harness::ExperimentConfig;

/// Small but complete configuration that trains in well under a second.
pub fn tiny_config() -> ExperimentConfig {
    ExperimentConfig {
        seed: 3,
        image_width: 64,
        image_height: 24,
        azimuth_bins: 32,
        radial_bins: 8,
        channels: 8,
        depth_bins: 4,
        cpbt_heads: 2,
        mbie_scales: vec![8, 16],
        mbie_points: 1,
        head_hidden: 8,
        train_resolution: 16,
        baseline_grid: 16,
        eval_resolutions: vec![8, 16, 24],
        epochs: 2,
        batch_size: 2,
        train_scenes: 8,
        eval_scenes: 4,
        bench_frames: 3,
        bench_warmup: 1,
        ..ExperimentConfig::default()
    }
}
