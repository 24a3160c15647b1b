//! Sampling of T-correlated matrices and the derived operators `W`, `V` and
//! the spiked model `A = lambda u v^T + W`.
//!
//! Entries are drawn from counter-based ChaCha streams: the unordered pair
//! `{a, b}` with `a < b` reads two 64-bit words from stream `a` at word
//! position `4 b`, the diagonal entry `(i, i)` from stream `i` at position
//! `4 i`. A sample therefore does not depend on traversal order.

use std::fmt::Write as _;
use std::sync::OnceLock;

use nalgebra::DMatrix;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{AmpError, Result};
use crate::gaussian::normal_cdf;
use crate::profiles::{CorrelationProfile, VarianceProfile};

/// Standardized (mean 0, variance 1) entry law.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EntryDistribution {
    StandardGaussian,
    Rademacher,
    CenteredUniform,
}

impl EntryDistribution {
    pub const ALL: [EntryDistribution; 3] = [
        EntryDistribution::StandardGaussian,
        EntryDistribution::Rademacher,
        EntryDistribution::CenteredUniform,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EntryDistribution::StandardGaussian => "standard-gaussian",
            EntryDistribution::Rademacher => "rademacher",
            EntryDistribution::CenteredUniform => "centered-uniform",
        }
    }

    /// Moment growth exponent: `E|X|^k <= (C k^{nu/2})^k`.
    pub fn moment_exponent(self) -> f64 {
        match self {
            EntryDistribution::StandardGaussian => 1.0,
            EntryDistribution::Rademacher | EntryDistribution::CenteredUniform => 0.0,
        }
    }

    /// Every correlation in `[-1, 1]` is attainable for the builtin families.
    pub fn check_correlation(self, tau: f64) -> Result<()> {
        if tau.is_finite() && (-1.0..=1.0).contains(&tau) {
            Ok(())
        } else {
            Err(AmpError::UnattainableCorrelation {
                tau,
                family: self.name(),
            })
        }
    }

    /// Mirrored pair `(X_ab, X_ba)` with correlation `tau` from two uniforms.
    pub fn pair(self, tau: f64, u1: f64, u2: f64) -> (f64, f64) {
        match self {
            EntryDistribution::StandardGaussian => {
                let (g1, g2) = box_muller(u1, u2);
                (g1, tau * g1 + (1.0 - tau * tau).max(0.0).sqrt() * g2)
            }
            EntryDistribution::Rademacher => {
                let x = if u1 < 0.5 { 1.0 } else { -1.0 };
                let y = if u2 < 0.5 * (1.0 + tau) { x } else { -x };
                (x, y)
            }
            EntryDistribution::CenteredUniform => {
                // Gaussian copula; the latent correlation maps back to tau exactly.
                let (g1, g2) = box_muller(u1, u2);
                let rho = 2.0 * (std::f64::consts::PI * tau / 6.0).sin();
                let z = rho * g1 + (1.0 - rho * rho).max(0.0).sqrt() * g2;
                (uniform_from_gaussian(g1), uniform_from_gaussian(z))
            }
        }
    }

    /// Diagonal entry from two uniforms.
    pub fn single(self, u1: f64, u2: f64) -> f64 {
        match self {
            EntryDistribution::StandardGaussian => box_muller(u1, u2).0,
            EntryDistribution::Rademacher => {
                if u1 < 0.5 {
                    1.0
                } else {
                    -1.0
                }
            }
            EntryDistribution::CenteredUniform => 3f64.sqrt() * (2.0 * u1 - 1.0),
        }
    }
}

fn box_muller(u1: f64, u2: f64) -> (f64, f64) {
    let r = (-2.0 * u1.ln()).sqrt();
    let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
    (r * c, r * s)
}

fn uniform_from_gaussian(g: f64) -> f64 {
    3f64.sqrt() * (2.0 * normal_cdf(g) - 1.0)
}

/// Uniform on the open interval `(0, 1)`.
fn open_unit(word: u64) -> f64 {
    ((word >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// Counter-based uniform pairs; seeks only when the next request is not
/// adjacent to the previous one.
struct PairStream {
    rng: ChaCha8Rng,
    stream: Option<u64>,
    pos: u128,
}

impl PairStream {
    fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            stream: None,
            pos: 0,
        }
    }

    fn uniforms(&mut self, stream: usize, slot: usize) -> (f64, f64) {
        let stream = stream as u64;
        let pos = 4 * slot as u128;
        if self.stream != Some(stream) {
            self.rng.set_stream(stream);
            self.rng.set_word_pos(pos);
            self.stream = Some(stream);
        } else if self.pos != pos {
            self.rng.set_word_pos(pos);
        }
        let u1 = open_unit(self.rng.next_u64());
        let u2 = open_unit(self.rng.next_u64());
        self.pos = pos + 4;
        (u1, u2)
    }
}

/// Values aligned with the support of a variance profile.
#[derive(Debug, Clone)]
pub struct ProfileMatrix {
    profile: VarianceProfile,
    values: Vec<f64>,
}

impl ProfileMatrix {
    pub fn new(profile: VarianceProfile, values: Vec<f64>) -> Result<Self> {
        if values.len() != profile.nnz() {
            return Err(AmpError::DimensionMismatch {
                what: "support-aligned values",
                expected: profile.nnz(),
                got: values.len(),
            });
        }
        Ok(Self { profile, values })
    }

    pub fn zeros(profile: VarianceProfile) -> Self {
        let values = vec![0.0; profile.nnz()];
        Self { profile, values }
    }

    pub fn n(&self) -> usize {
        self.profile.n()
    }

    pub fn profile(&self) -> &VarianceProfile {
        &self.profile
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.profile.position(i, j).map_or(0.0, |p| self.values[p])
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let start = self.profile.row_start(i);
        self.profile
            .row_cols(i)
            .zip(&self.values[start..start + self.profile.row_len(i)])
            .map(|(j, &v)| (j, v))
    }

    /// `M x`, parallel over rows.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n())
            .into_par_iter()
            .map(|i| self.row(i).map(|(j, v)| v * x[j]).sum())
            .collect()
    }

    /// `M^T x`.
    pub fn matvec_transpose(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n()];
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for (j, v) in self.row(i) {
                out[j] += v * xi;
            }
        }
        out
    }

    /// Entrywise product with the transpose, aligned with the same support.
    pub fn hadamard_transpose(&self) -> ProfileMatrix {
        let values = (0..self.n())
            .flat_map(|i| self.row(i).map(move |(j, v)| (i, j, v)))
            .map(|(i, j, v)| v * self.get(j, i))
            .collect();
        ProfileMatrix {
            profile: self.profile.clone(),
            values,
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.n();
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            for (j, v) in self.row(i) {
                m[(i, j)] = v;
            }
        }
        m
    }

    /// Triplet dump in the profile text format.
    pub fn to_triplet_text(&self) -> String {
        let p = &self.profile;
        let mut out = String::new();
        writeln!(out, "{} {} {}", p.n(), p.k_n(), p.zero_diagonal()).unwrap();
        for i in 0..self.n() {
            for (j, v) in self.row(i) {
                writeln!(out, "{i} {j} {v}").unwrap();
            }
        }
        out
    }
}

/// Square operator with forward and transposed products.
pub trait LinearOperator: Sync {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[f64]) -> Vec<f64>;
    fn apply_transpose(&self, x: &[f64]) -> Vec<f64>;
}

impl LinearOperator for ProfileMatrix {
    fn dim(&self) -> usize {
        self.n()
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.matvec(x)
    }

    fn apply_transpose(&self, x: &[f64]) -> Vec<f64> {
        self.matvec_transpose(x)
    }
}

impl LinearOperator for DMatrix<f64> {
    fn dim(&self) -> usize {
        self.nrows()
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (self * nalgebra::DVector::from_column_slice(x))
            .iter()
            .copied()
            .collect()
    }

    fn apply_transpose(&self, x: &[f64]) -> Vec<f64> {
        (self.transpose() * nalgebra::DVector::from_column_slice(x))
            .iter()
            .copied()
            .collect()
    }
}

/// A sampled `W = S^{1/2} * X` with provenance.
#[derive(Debug)]
pub struct SampledMatrix {
    w: ProfileMatrix,
    seed: u64,
    distribution: Option<EntryDistribution>,
    correlation_id: String,
    w_wt: OnceLock<ProfileMatrix>,
}

impl Clone for SampledMatrix {
    fn clone(&self) -> Self {
        Self {
            w: self.w.clone(),
            seed: self.seed,
            distribution: self.distribution,
            correlation_id: self.correlation_id.clone(),
            w_wt: OnceLock::new(),
        }
    }
}

impl SampledMatrix {
    /// Wraps explicit `W` values aligned with the profile support.
    pub fn from_values(profile: VarianceProfile, values: Vec<f64>, label: impl Into<String>) -> Result<Self> {
        Ok(Self {
            w: ProfileMatrix::new(profile, values)?,
            seed: 0,
            distribution: None,
            correlation_id: label.into(),
            w_wt: OnceLock::new(),
        })
    }

    pub fn n(&self) -> usize {
        self.w.n()
    }

    pub fn w(&self) -> &ProfileMatrix {
        &self.w
    }

    pub fn profile(&self) -> &VarianceProfile {
        self.w.profile()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn distribution(&self) -> Option<EntryDistribution> {
        self.distribution
    }

    pub fn correlation_id(&self) -> &str {
        &self.correlation_id
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.w.get(i, j)
    }

    /// Standardized entry `X_ij = W_ij / sqrt(s_ij)` on the support.
    pub fn x_entry(&self, i: usize, j: usize) -> Option<f64> {
        let p = self.profile().position(i, j)?;
        Some(self.w.values()[p] / self.profile().value_at(p).sqrt())
    }

    /// `W (.) W^T`, computed on first use.
    pub fn w_hadamard_wt(&self) -> &ProfileMatrix {
        self.w_wt.get_or_init(|| self.w.hadamard_transpose())
    }

    pub fn to_triplet_text(&self) -> String {
        self.w.to_triplet_text()
    }
}

impl LinearOperator for SampledMatrix {
    fn dim(&self) -> usize {
        self.n()
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.w.matvec(x)
    }

    fn apply_transpose(&self, x: &[f64]) -> Vec<f64> {
        self.w.matvec_transpose(x)
    }
}

/// Samples `X` with mirrored correlations `T` and returns `W = S^{1/2} * X`.
pub fn sample_t_correlated(
    s: &VarianceProfile,
    t: &CorrelationProfile,
    dist: EntryDistribution,
    seed: u64,
) -> Result<SampledMatrix> {
    let n = s.n();
    t.check_dimension(n)?;
    let mut values = vec![0.0; s.nnz()];
    let mut rng = PairStream::new(seed);
    for a in 0..n {
        for (pos, b) in (s.row_start(a)..).zip(s.row_cols(a)) {
            match b.cmp(&a) {
                std::cmp::Ordering::Less => {
                    // Drawn with pair (b, a) unless (b, a) is not in the support.
                    if s.position(b, a).is_none() {
                        let tau = t.tau(a, b);
                        dist.check_correlation(tau)?;
                        let (u1, u2) = rng.uniforms(b, a);
                        values[pos] = dist.pair(tau, u1, u2).1;
                    }
                }
                std::cmp::Ordering::Equal => {
                    let (u1, u2) = rng.uniforms(a, a);
                    values[pos] = dist.single(u1, u2);
                }
                std::cmp::Ordering::Greater => {
                    let tau = t.tau(a, b);
                    dist.check_correlation(tau)?;
                    let (u1, u2) = rng.uniforms(a, b);
                    let (xab, xba) = dist.pair(tau, u1, u2);
                    values[pos] = xab;
                    if let Some(q) = s.position(b, a) {
                        values[q] = xba;
                    }
                }
            }
        }
    }
    for (pos, v) in values.iter_mut().enumerate() {
        *v *= s.value_at(pos).sqrt();
    }
    Ok(SampledMatrix {
        w: ProfileMatrix::new(s.clone(), values)?,
        seed,
        distribution: Some(dist),
        correlation_id: t.id().to_string(),
        w_wt: OnceLock::new(),
    })
}

/// `V_ij = tau_ij sqrt(s_ij s_ji)`, aligned with the support of `S`.
///
/// On the diagonal `tau_ii` is whatever the correlation profile reports
/// (the block value for block profiles).
pub fn compute_v(s: &VarianceProfile, t: &CorrelationProfile) -> Result<ProfileMatrix> {
    t.check_dimension(s.n())?;
    let values = (0..s.n())
        .flat_map(|i| s.row(i).map(move |(j, v)| (i, j, v)))
        .map(|(i, j, sij)| t.tau(i, j) * (sij * s.get(j, i)).sqrt())
        .collect();
    ProfileMatrix::new(s.clone(), values)
}

/// `A = lambda u v^T + W`, applied without forming the rank-one term.
#[derive(Debug, Clone)]
pub struct SpikedMatrix {
    base: SampledMatrix,
    lambda: f64,
    u: Vec<f64>,
    v: Vec<f64>,
}

pub fn add_rank_one(base: SampledMatrix, lambda: f64, u: Vec<f64>, v: Vec<f64>) -> Result<SpikedMatrix> {
    let n = base.n();
    for (what, len) in [("spike vector u", u.len()), ("spike vector v", v.len())] {
        if len != n {
            return Err(AmpError::DimensionMismatch {
                what,
                expected: n,
                got: len,
            });
        }
    }
    Ok(SpikedMatrix { base, lambda, u, v })
}

impl SpikedMatrix {
    pub fn base(&self) -> &SampledMatrix {
        &self.base
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = self.base.w().to_dense();
        let n = self.base.n();
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] += self.lambda * self.u[i] * self.v[j];
            }
        }
        m
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl LinearOperator for SpikedMatrix {
    fn dim(&self) -> usize {
        self.base.n()
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.base.apply(x);
        let c = self.lambda * dot(&self.v, x);
        if c != 0.0 {
            for (yi, ui) in y.iter_mut().zip(&self.u) {
                *yi += c * ui;
            }
        }
        y
    }

    fn apply_transpose(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.base.apply_transpose(x);
        let c = self.lambda * dot(&self.u, x);
        for (yi, vi) in y.iter_mut().zip(&self.v) {
            *yi += c * vi;
        }
        y
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpectralEstimate {
    pub estimate: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Largest singular value by power iteration on `M^T M`. The estimate is the
/// running maximum of `|M x_k|` over unit vectors, hence non-decreasing.
pub fn estimate_spectral_norm<M: LinearOperator + ?Sized>(
    m: &M,
    max_iters: usize,
    tol: f64,
) -> SpectralEstimate {
    let n = m.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_5eed);
    let mut x: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() - 0.5).collect();
    normalize(&mut x);
    let mut best = 0.0_f64;
    let max_iters = max_iters.max(1);
    for k in 1..=max_iters {
        let y = m.apply(&x);
        let norm = dot(&y, &y).sqrt();
        let prev = best;
        best = best.max(norm);
        if norm == 0.0 {
            return SpectralEstimate {
                estimate: best,
                iterations: k,
                converged: true,
            };
        }
        if k > 1 && (best - prev) <= tol * best {
            return SpectralEstimate {
                estimate: best,
                iterations: k,
                converged: true,
            };
        }
        x = m.apply_transpose(&y);
        if normalize(&mut x) == 0.0 {
            return SpectralEstimate {
                estimate: best,
                iterations: k,
                converged: true,
            };
        }
    }
    SpectralEstimate {
        estimate: best,
        iterations: max_iters,
        converged: false,
    }
}

fn normalize(x: &mut [f64]) -> f64 {
    let norm = dot(x, x).sqrt();
    if norm > 0.0 {
        x.iter_mut().for_each(|v| *v /= norm);
    }
    norm
}
