//! Shared fixtures for the benchmarks.

use hjreach_core::train::{sample_batch, Sample};
use hjreach_core::{rng, NetParams, SystemSpec, TrainConfig, Variant};

/// The desk-scale rimless wheel configuration with a given batch size.
pub fn rimless_config(variant: Variant, batch_size: usize) -> TrainConfig {
    TrainConfig {
        hidden_width: 128,
        batch_size,
        ..TrainConfig::new(variant)
    }
}

/// Freshly initialized parameters and one batch over the full time interval.
pub fn rimless_batch(cfg: &TrainConfig) -> (SystemSpec, NetParams, Vec<Sample>) {
    let sys = SystemSpec::rimless_wheel();
    let params = cfg.init_params(&sys).expect("valid config");
    let mut r = rng::iteration(cfg.seed, rng::Stream::Train, 0);
    let samples = sample_batch(&sys, (0.0, sys.horizon), cfg, &mut r);
    (sys, params, samples)
}
