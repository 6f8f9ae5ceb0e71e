//! Shared fixtures for the benchmarks.

use slpnet_core::dataset::DatasetRecord;
use slpnet_core::{
    generate_dataset, train, Checkpoint, LiftedProblem, RotationConvention, TrainConfig,
};

/// Test records for `K` users and `N` antennas with targets drawn from 0–35 dB.
pub fn records(k: usize, n: usize, count: usize, seed: u64) -> Vec<DatasetRecord> {
    let cfg = TrainConfig {
        k,
        n,
        n_train: 1,
        n_test: count,
        batch: 1,
        seed,
        ..TrainConfig::default()
    };
    generate_dataset(&cfg).expect("valid config").1
}

pub fn problems(records: &[DatasetRecord]) -> Vec<LiftedProblem> {
    records
        .iter()
        .map(|r| {
            r.lift(RotationConvention::Reference)
                .expect("generated records lift")
        })
        .collect()
}

/// A briefly trained network; inference cost does not depend on training length.
pub fn checkpoint(k: usize, n: usize, seed: u64) -> Checkpoint {
    let cfg = TrainConfig {
        k,
        n,
        n_train: 512,
        n_test: 1,
        epochs: 2,
        seed,
        ..TrainConfig::default()
    };
    let (train_set, _) = generate_dataset(&cfg).expect("valid config");
    train(&cfg, &train_set, |_| {})
        .expect("training finishes")
        .checkpoint
}
