//! Shared fixtures for the benchmarks.

use dpl_core::gradcheck::{CheckInstance, CheckShape};
use dpl_core::trainer::train;
use dpl_core::{
    generate_synthetic, split, Dataset, GeneratorSpec, LossConfig, ModelState, RunConfig,
};

/// Desk preset split 70/30.
pub fn desk_data(seed: u64) -> (Dataset, Dataset) {
    let data = generate_synthetic(&GeneratorSpec::desk(seed)).expect("desk preset is valid");
    split(&data, 0.7, seed).expect("desk preset splits")
}

/// Desk model trained for `steps` steps on the training split.
pub fn desk_model(seed: u64, steps: u64) -> ModelState {
    let (train_set, _) = desk_data(seed);
    let cfg = RunConfig {
        steps,
        ..RunConfig::desk(seed)
    };
    train(&cfg, &train_set)
        .map(|(m, _)| m)
        .expect("desk training converges")
}

/// One desk-sized training batch with frozen noise.
pub fn desk_batch(seed: u64, batch: usize, num_samples: usize) -> CheckInstance {
    let shape = CheckShape {
        d_in: 64,
        d: 16,
        num_classes: 4,
        batch,
        num_samples,
    };
    let cfg = LossConfig {
        num_samples,
        ..LossConfig::default()
    };
    CheckInstance::seeded(shape, seed, cfg).expect("fixture shape is valid")
}
