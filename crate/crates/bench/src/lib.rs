//! Shared fixtures for the benchmark targets.

use polyshield_core::{generate_synthetic, Dataset, SyntheticSpec};

/// Paper-scale synthetic dataset: 512-dimensional embeddings.
pub fn bench_dataset(subjects: usize, seed: u64) -> Dataset {
    generate_synthetic(&SyntheticSpec::new(subjects, 512, 0.02, seed))
        .expect("bench spec is valid")
}
