//! Shared workloads for the benchmarks.

use amplab::{make_dense_profile, sample_t_correlated, CorrelationProfile, EntryDistribution, SampledMatrix, VarianceProfile};

pub fn dense(n: usize) -> VarianceProfile {
    make_dense_profile(n, false).expect("n >= 2")
}

pub fn gaussian_matrix(n: usize, rho: f64, seed: u64) -> (SampledMatrix, CorrelationProfile) {
    let t = CorrelationProfile::constant(rho).expect("valid correlation");
    let w = sample_t_correlated(&dense(n), &t, EntryDistribution::StandardGaussian, seed).expect("valid sample");
    (w, t)
}

/// Heterogeneous start so Density Evolution cannot collapse index classes.
pub fn ramp(n: usize) -> Vec<f64> {
    (0..n).map(|i| -1.0 + 2.0 * i as f64 / n as f64).collect()
}
