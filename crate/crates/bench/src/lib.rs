//! Benchmarks live in `benches/`; run with `cargo bench -p pba-bench`.

use pba_core::data::{generate_synthetic, DatasetSplits, SyntheticSpec};

/// Small synthetic dataset shared by the benchmarks.
pub fn bench_dataset() -> DatasetSplits {
    generate_synthetic(&SyntheticSpec {
        train_samples: 256,
        val_samples: 128,
        test_samples: 128,
        ..Default::default()
    })
    .expect("valid spec")
}
