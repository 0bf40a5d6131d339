//! Shared fixtures for the benchmarks.

use proxasym::{gen_design, Design, EntryLaw, NoiseModel};

/// Gaussian design with standard normal errors and `p = n / 2`.
pub fn half_aspect_design(n: usize, seed: u64) -> Design {
    gen_design(n, n / 2, EntryLaw::Gaussian, &NoiseModel::gaussian(1.0), seed).expect("valid sizes")
}
