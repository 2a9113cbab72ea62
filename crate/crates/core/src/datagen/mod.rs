//! Synthetic datasets, analytic regression targets and file loaders.
//!
//! All randomness comes from `ChaCha8Rng` (crate `rand_chacha` 0.9) seeded
//! with `seed_from_u64(seed)`, so a `(spec, seed)` pair replays exactly.

mod dataset;
mod gmm;
mod loaders;
mod regression;

pub use dataset::{split_indices, LabeledDataset, Targets};
pub use gmm::{sample_gmm, GmmSpec};
pub use loaders::{load_auto_mpg, load_idx, load_idx_dir, parse_auto_mpg};
pub use regression::{sample_regression_dataset, target_1d_a, target_1d_b, target_2d, RegressionTarget};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator every sampler in this crate draws from.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
