#![allow(dead_code)]

use nfkit::data::{preprocess, synth_generate, Dataset, PreprocessOptions, SynthConfig};
use nfkit::flow::TrainConfig;
use nfkit::transformer::TransformerConfig;

/// Two drifting blobs, coordinates and features standardized.
pub fn drift_dataset(cells: usize, timepoints: usize, seed: u64) -> Dataset {
    let cfg = SynthConfig { cells_per_slide: cells, num_timepoints: timepoints, feature_dim: 4, ..Default::default() };
    let raw = synth_generate(&cfg, seed).unwrap();
    let opts = PreprocessOptions { normalize: false, log1p: false, pca_components: None, seed, ..Default::default() };
    preprocess(&raw, &opts).unwrap()
}

pub fn small_network() -> TransformerConfig {
    TransformerConfig {
        embed_dim: 16,
        mlp_hidden: 32,
        heads: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        time_frequencies: 8,
        ..Default::default()
    }
}

/// A configuration small enough for a few hundred steps in a test.
pub fn small_train_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig { network: small_network(), radius: 0.2, steps: 50, instances: 2, seed, ..Default::default() };
    cfg.coupling.m = 32;
    cfg.coupling.n = 8;
    cfg.coupling.k_regions = 8;
    cfg.optimizer.lr = 2e-3;
    cfg.early_stop_window = 0;
    cfg
}

pub fn tempdir(tag: &str) -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("nfkit-{tag}-{}-{:?}", std::process::id(), std::thread::current().id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}
