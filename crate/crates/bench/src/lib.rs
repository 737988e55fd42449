//! Shared fixtures for the benchmark targets.

use fskd_core::config::RunConfig;
use fskd_core::synth::{generate, Dataset};

/// A small but representative dataset/config pair for benchmarking.
pub fn bench_setup() -> (RunConfig, Dataset) {
    let config = RunConfig {
        species_count: 3,
        images_per_species: 12,
        test_species_fraction: 0.34,
        ..Default::default()
    };
    config.validate().expect("bench config");
    let dataset = generate(&config).expect("bench dataset");
    (config, dataset)
}
