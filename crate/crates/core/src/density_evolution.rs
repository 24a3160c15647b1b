//! Density Evolution: the per-index covariance recursion `R_i^{t+1} =
//! sum_j s_ij H_j^t`, its index-free collapse for homogeneous profiles and the
//! non-centered variant with a mean schedule `mu_t`.
//!
//! Matrix positions are 0-based: entry `(a, b)` of `R_i` is
//! `Cov(Z_i^{a+1}, Z_i^{b+1})`, entry `(a, b)` of `H_j` pairs
//! `h(Z_j^a)` with `h(Z_j^b)` where `Z_j^0` stands for the deterministic `x0_j`.
//! States are grown one row and column per step; earlier entries are never
//! recomputed, so every leading block is bitwise the earlier state.

use std::collections::HashMap;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activations::Activation;
use crate::error::{AmpError, Result};
use crate::gaussian::{factor_2x2, min_eigenvalue, GaussHermite, SplitRule, COVARIANCE_TOLERANCE};
use crate::profiles::VarianceProfile;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExpectationMethod {
    #[default]
    GaussHermite,
    MonteCarlo,
}

/// Numerical engine for Gaussian expectations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianExpectationConfig {
    #[serde(default)]
    pub method: ExpectationMethod,
    /// Quadrature nodes per axis.
    #[serde(default = "default_nodes")]
    pub nodes: usize,
    #[serde(default = "default_mc_samples")]
    pub mc_samples: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_nodes() -> usize {
    40
}

fn default_mc_samples() -> usize {
    100_000
}

impl Default for GaussianExpectationConfig {
    fn default() -> Self {
        Self::gauss_hermite(default_nodes())
    }
}

impl GaussianExpectationConfig {
    pub fn gauss_hermite(nodes: usize) -> Self {
        Self {
            method: ExpectationMethod::GaussHermite,
            nodes,
            mc_samples: default_mc_samples(),
            seed: 0,
        }
    }

    pub fn monte_carlo(mc_samples: usize, seed: u64) -> Self {
        Self {
            method: ExpectationMethod::MonteCarlo,
            nodes: default_nodes(),
            mc_samples,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nodes < 2 {
            return Err(AmpError::InvalidQuadrature(format!(
                "nodes = {} must be at least 2",
                self.nodes
            )));
        }
        if self.mc_samples < 100 {
            return Err(AmpError::InvalidQuadrature(format!(
                "mc_samples = {} must be at least 100",
                self.mc_samples
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum EngineKind {
    /// Hermite nodes for smooth integrands, split Legendre nodes for kinked ones.
    Quadrature(GaussHermite, SplitRule),
    /// Common random numbers shared by every expectation.
    MonteCarlo { xi1: Vec<f64>, xi2: Vec<f64> },
}

/// Realization of a [`GaussianExpectationConfig`].
#[derive(Debug, Clone)]
pub struct GaussianEngine {
    kind: EngineKind,
}

/// Kink location in standard units, `None` when no cut is needed.
fn cut_point(kink: Option<f64>, scale: f64) -> Option<f64> {
    match kink {
        Some(k) if scale > 0.0 => Some(k / scale),
        _ => None,
    }
}

fn clamp_variance(var: f64) -> Result<f64> {
    if !var.is_finite() || var < -COVARIANCE_TOLERANCE {
        return Err(AmpError::InvalidCovariance { min_eigenvalue: var });
    }
    Ok(var.max(0.0))
}

impl GaussianEngine {
    pub fn new(cfg: &GaussianExpectationConfig) -> Result<Self> {
        cfg.validate()?;
        let kind = match cfg.method {
            ExpectationMethod::GaussHermite => {
                EngineKind::Quadrature(GaussHermite::new(cfg.nodes)?, SplitRule::new(cfg.nodes)?)
            }
            ExpectationMethod::MonteCarlo => {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                let mut draw = || -> f64 { StandardNormal.sample(&mut rng) };
                let xi1 = (0..cfg.mc_samples).map(|_| draw()).collect();
                let xi2 = (0..cfg.mc_samples).map(|_| draw()).collect();
                EngineKind::MonteCarlo { xi1, xi2 }
            }
        };
        Ok(Self { kind })
    }

    /// `E f(Z)` for `Z ~ N(0, var)`.
    pub fn expect1<F: Fn(f64) -> f64>(&self, var: f64, f: F) -> Result<f64> {
        self.expect1_cut(var, f, None)
    }

    /// As [`Self::expect1`] for an `f` that is smooth except at `kink`.
    pub fn expect1_cut<F: Fn(f64) -> f64>(&self, var: f64, f: F, kink: Option<f64>) -> Result<f64> {
        let sigma = clamp_variance(var)?.sqrt();
        Ok(match &self.kind {
            EngineKind::Quadrature(gh, split) => match cut_point(kink, sigma) {
                None => gh.expect(sigma, f),
                cut => split.points(cut).iter().map(|&(x, w)| w * f(sigma * x)).sum(),
            },
            EngineKind::MonteCarlo { xi1, .. } => {
                xi1.iter().map(|x| f(sigma * x)).sum::<f64>() / xi1.len() as f64
            }
        })
    }

    /// `E f(Z_a) g(Z_b)` for `(Z_a, Z_b) ~ N(0, [[a, b], [b, c]])`, with the
    /// Monte Carlo standard error (zero for quadrature).
    pub fn expect2_with_se<F, G>(&self, cov: [f64; 3], f: F, g: G) -> Result<(f64, f64)>
    where
        F: Fn(f64) -> f64,
        G: Fn(f64) -> f64,
    {
        self.expect2_cut(cov, f, None, g, None)
    }

    /// Pair expectation where `f` and `g` may each have one kink.
    pub fn expect2_cut<F, G>(
        &self,
        cov: [f64; 3],
        f: F,
        kink_f: Option<f64>,
        g: G,
        kink_g: Option<f64>,
    ) -> Result<(f64, f64)>
    where
        F: Fn(f64) -> f64,
        G: Fn(f64) -> f64,
    {
        let [l11, l21, l22] = factor_2x2(cov[0], cov[1], cov[2])?;
        Ok(match &self.kind {
            EngineKind::Quadrature(_, split) if kink_f.is_some() || kink_g.is_some() => {
                let mut total = 0.0;
                for (x1, w1) in split.points(cut_point(kink_f, l11)) {
                    let fa = f(l11 * x1);
                    if fa == 0.0 {
                        continue;
                    }
                    let base = l21 * x1;
                    let inner_cut = cut_point(kink_g.map(|k| k - base), l22);
                    let inner: f64 = split
                        .points(inner_cut)
                        .iter()
                        .map(|&(x2, w2)| w2 * g(base + l22 * x2))
                        .sum();
                    total += w1 * fa * inner;
                }
                (total, 0.0)
            }
            EngineKind::Quadrature(gh, _) => {
                let mut total = 0.0;
                for (&x1, &w1) in gh.nodes().iter().zip(gh.weights()) {
                    let fa = f(l11 * x1);
                    if fa == 0.0 {
                        continue;
                    }
                    let inner: f64 = gh
                        .nodes()
                        .iter()
                        .zip(gh.weights())
                        .map(|(&x2, &w2)| w2 * g(l21 * x1 + l22 * x2))
                        .sum();
                    total += w1 * fa * inner;
                }
                (total, 0.0)
            }
            EngineKind::MonteCarlo { xi1, xi2 } => {
                let m = xi1.len() as f64;
                let (mut s, mut s2) = (0.0, 0.0);
                for (&x1, &x2) in xi1.iter().zip(xi2) {
                    let v = f(l11 * x1) * g(l21 * x1 + l22 * x2);
                    s += v;
                    s2 += v * v;
                }
                let mean = s / m;
                let var = (s2 / m - mean * mean).max(0.0);
                (mean, (var / (m - 1.0)).sqrt())
            }
        })
    }

    pub fn expect2<F, G>(&self, cov: [f64; 3], f: F, g: G) -> Result<f64>
    where
        F: Fn(f64) -> f64,
        G: Fn(f64) -> f64,
    {
        self.expect2_with_se(cov, f, g).map(|(v, _)| v)
    }
}

/// `E g1(Z_a) g2(Z_b)` for a centered Gaussian pair with covariance `cov`.
pub fn gaussian_pair_expectation<F, G>(
    cov: [[f64; 2]; 2],
    g1: F,
    g2: G,
    cfg: &GaussianExpectationConfig,
) -> Result<f64>
where
    F: Fn(f64) -> f64,
    G: Fn(f64) -> f64,
{
    let asym = (cov[0][1] - cov[1][0]).abs();
    if asym > 1e-12 * cov[0][1].abs().max(cov[1][0].abs()).max(1.0) {
        return Err(AmpError::Inconsistent(format!(
            "covariance is not symmetric: {} vs {}",
            cov[0][1], cov[1][0]
        )));
    }
    GaussianEngine::new(cfg)?.expect2([cov[0][0], cov[0][1], cov[1][1]], g1, g2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeMode {
    PerIndex,
    Asymptotic,
}

/// Mean schedule `mu_1, mu_2, ...` of the non-centered model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MuSchedule {
    values: Vec<f64>,
}

impl MuSchedule {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `mu_t` for `t >= 1`.
    pub fn mu(&self, t: usize) -> f64 {
        self.values[t - 1]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// CSV with columns `t, mu`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["t", "mu"])?;
        for (k, mu) in self.values.iter().enumerate() {
            w.serialize((k + 1, mu))?;
        }
        into_string(w)
    }
}

pub(crate) fn into_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| AmpError::Io(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Output of a Density Evolution run.
#[derive(Debug, Clone)]
pub struct DEState {
    mode: DeMode,
    n: usize,
    depth: usize,
    /// Per index (a single entry in asymptotic mode), `depth x depth` row-major.
    r: Vec<Vec<f64>>,
    h: Vec<Vec<f64>>,
    mu: Option<MuSchedule>,
    spike: Option<SpikeRecord>,
    x0: Vec<f64>,
    eta: Vec<f64>,
    activation: Activation,
    profile_id: String,
    engine: GaussianExpectationConfig,
}

impl DEState {
    pub fn mode(&self) -> DeMode {
        self.mode
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of Gaussian layers `Z^1..Z^depth`.
    pub fn depth(&self) -> usize {
        self.depth
    }

    fn slot(&self, i: usize) -> usize {
        match self.mode {
            DeMode::PerIndex => i,
            DeMode::Asymptotic => 0,
        }
    }

    /// `Cov(Z_i^{a+1}, Z_i^{b+1})`.
    pub fn r_entry(&self, i: usize, a: usize, b: usize) -> f64 {
        self.r[self.slot(i)][a * self.depth + b]
    }

    /// `R_i^t`, the covariance of `(Z_i^1, ..., Z_i^t)`.
    pub fn r_matrix(&self, i: usize, t: usize) -> DMatrix<f64> {
        DMatrix::from_fn(t, t, |a, b| self.r_entry(i, a, b))
    }

    /// `Var Z_i^s` for `s >= 1`.
    pub fn variance(&self, i: usize, s: usize) -> f64 {
        self.r_entry(i, s - 1, s - 1)
    }

    /// `H_i` at its final size `depth x depth`.
    pub fn h_matrix(&self, i: usize) -> DMatrix<f64> {
        let d = self.depth;
        let h = &self.h[self.slot(i)];
        DMatrix::from_fn(d, d, |a, b| h[a * d + b])
    }

    pub fn mu(&self) -> Option<&MuSchedule> {
        self.mu.as_ref()
    }

    /// `(lambda, u, v)` of a non-centered state.
    pub fn spike(&self) -> Option<(f64, &[f64], &[f64])> {
        self.spike.as_ref().map(|s| (s.lambda, s.u.as_slice(), s.v.as_slice()))
    }

    /// Mean shift `mu_s u_i` of layer `s` (zero for centered states).
    pub fn shift(&self, i: usize, s: usize) -> f64 {
        match (&self.mu, &self.spike) {
            (Some(mu), Some(sp)) => normalize_zero(mu.mu(s) * sp.u[i]),
            _ => 0.0,
        }
    }

    pub fn x0(&self) -> &[f64] {
        &self.x0
    }

    pub fn eta(&self) -> &[f64] {
        &self.eta
    }

    pub fn activation(&self) -> &Activation {
        &self.activation
    }

    pub fn profile_id(&self) -> &str {
        &self.profile_id
    }

    pub fn engine(&self) -> &GaussianExpectationConfig {
        &self.engine
    }

    /// `E dh(Z_i^t + mu_t u_i, eta_i, t)` for every `i`.
    pub fn expected_derivative(&self, t: usize) -> Result<Vec<f64>> {
        if t == 0 || t > self.depth {
            return Err(AmpError::MissingDensityEvolution(format!(
                "step {t} outside the computed depth {}",
                self.depth
            )));
        }
        let engine = GaussianEngine::new(&self.engine)?;
        let h = &self.activation;
        let mut memo: HashMap<[u64; 4], f64> = HashMap::new();
        let mut out = Vec::with_capacity(self.n);
        for i in 0..self.n {
            let var = self.variance(i, t);
            let shift = self.shift(i, t);
            let eta = self.eta[i];
            let idx = if h.is_index_dependent() { i as u64 } else { 0 };
            let key = [var.to_bits(), shift.to_bits(), eta.to_bits(), idx];
            let value = match memo.get(&key) {
                Some(&v) => v,
                None => {
                    let kink = h.kink(eta).map(|k| k - shift);
                    let v = engine.expect1_cut(var, |z| h.deriv(z + shift, eta, i, t), kink)?;
                    memo.insert(key, v);
                    v
                }
            };
            out.push(value);
        }
        Ok(out)
    }

    /// `min_i Var Z_i^t` for `t = 1..=depth`.
    pub fn variance_floor(&self) -> Vec<f64> {
        (1..=self.depth)
            .map(|t| {
                (0..self.r.len())
                    .map(|k| self.r[k][(t - 1) * self.depth + t - 1])
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    /// CSV with columns `i, t, s, r_value`: `Cov(Z_i^t, Z_i^s)` for `s <= t`.
    /// Asymptotic states report their shared matrix under `i = 0`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["i", "t", "s", "r_value"])?;
        for (k, r) in self.r.iter().enumerate() {
            for t in 1..=self.depth {
                for s in 1..=t {
                    w.serialize((k, t, s, r[(t - 1) * self.depth + s - 1]))?;
                }
            }
        }
        into_string(w)
    }

    /// CSV with columns `t, min_diag, max_diag, mean_diag`.
    pub fn summary_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["t", "min_diag", "max_diag", "mean_diag"])?;
        for t in 1..=self.depth {
            let diag: Vec<f64> = self
                .r
                .iter()
                .map(|r| r[(t - 1) * self.depth + t - 1])
                .collect();
            let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = diag.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mean = diag.iter().sum::<f64>() / diag.len() as f64;
            w.serialize((t, min, max, mean))?;
        }
        into_string(w)
    }
}

fn normalize_zero(v: f64) -> f64 {
    if v == 0.0 {
        0.0
    } else {
        v
    }
}

#[derive(Debug, Clone)]
struct SpikeRecord {
    lambda: f64,
    u: Vec<f64>,
    v: Vec<f64>,
}

/// Spike coupling of the non-centered recursion.
#[derive(Debug, Clone, Copy)]
struct Spike<'a> {
    lambda: f64,
    u: &'a [f64],
    v: &'a [f64],
}

/// New column `H_j(a, t)` for `a = 0..=t` and `E h(Z_j^t + shift)`.
#[allow(clippy::too_many_arguments)]
fn h_column(
    engine: &GaussianEngine,
    h: &Activation,
    t: usize,
    r: &[f64],
    stride: usize,
    h0: f64,
    eta: f64,
    i: usize,
    shifts: &[f64],
) -> Result<(Vec<f64>, f64)> {
    if t == 0 {
        return Ok((vec![h0 * h0], h0));
    }
    let var_t = r[(t - 1) * stride + t - 1];
    let st = shifts[t - 1];
    let ht = |z: f64| h.eval(z + st, eta, i, t);
    let kink = h.kink(eta);
    let kt = kink.map(|k| k - st);
    let mean = engine.expect1_cut(var_t, ht, kt)?;
    let mut col = Vec::with_capacity(t + 1);
    col.push(h0 * mean);
    for a in 1..t {
        let sa = shifts[a - 1];
        let cov = [r[(a - 1) * stride + a - 1], r[(a - 1) * stride + t - 1], var_t];
        let ka = kink.map(|k| k - sa);
        col.push(engine.expect2_cut(cov, |z| h.eval(z + sa, eta, i, a), ka, ht, kt)?.0);
    }
    col.push(engine.expect1_cut(
        var_t,
        |z| {
            let v = ht(z);
            v * v
        },
        kt,
    )?);
    Ok((col, mean))
}

fn check_lengths(n: usize, x0: &[f64], eta: &[f64]) -> Result<()> {
    if x0.len() != n {
        return Err(AmpError::DimensionMismatch {
            what: "x0",
            expected: n,
            got: x0.len(),
        });
    }
    if eta.len() != n {
        return Err(AmpError::DimensionMismatch {
            what: "eta",
            expected: n,
            got: eta.len(),
        });
    }
    Ok(())
}

fn run_per_index(
    s: &VarianceProfile,
    h: &Activation,
    x0: &[f64],
    eta: &[f64],
    t_max: usize,
    cfg: &GaussianExpectationConfig,
    spike: Option<Spike<'_>>,
) -> Result<DEState> {
    let n = s.n();
    check_lengths(n, x0, eta)?;
    if t_max == 0 {
        return Err(AmpError::Precondition("t_max must be at least 1".into()));
    }
    if let Some(sp) = spike {
        for (what, len) in [("spike vector u", sp.u.len()), ("spike vector v", sp.v.len())] {
            if len != n {
                return Err(AmpError::DimensionMismatch {
                    what,
                    expected: n,
                    got: len,
                });
            }
        }
    }
    let engine = GaussianEngine::new(cfg)?;
    let d = t_max;
    let h0: Vec<f64> = (0..n).map(|i| h.eval(x0[i], eta[i], i, 0)).collect();
    let mut r: Vec<Vec<f64>> = vec![vec![0.0; d * d]; n];
    let mut hm = vec![vec![0.0; d * d]; n];
    let mut mu: Vec<f64> = Vec::new();
    if let Some(sp) = spike {
        mu.push(sp.lambda * sp.v.iter().zip(&h0).map(|(a, b)| a * b).sum::<f64>());
    }
    let index_dependent = h.is_index_dependent();

    for t in 0..d {
        // Shifts of layers 1..=t for every index.
        let shifts_of = |j: usize| -> Vec<f64> {
            match spike {
                Some(sp) => (0..t).map(|a| normalize_zero(mu[a] * sp.u[j])).collect(),
                None => vec![0.0; t],
            }
        };
        // Group indices whose new column has identical inputs.
        let mut key_to_class: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut class_of = Vec::with_capacity(n);
        let mut reps: Vec<usize> = Vec::new();
        for j in 0..n {
            let mut key = Vec::with_capacity(3 * t + 4);
            for a in 0..t {
                key.push(r[j][a * d + a].to_bits());
                if t > 0 {
                    key.push(r[j][a * d + t - 1].to_bits());
                }
            }
            key.push(h0[j].to_bits());
            key.push(eta[j].to_bits());
            key.extend(shifts_of(j).iter().map(|v| v.to_bits()));
            if index_dependent {
                key.push(j as u64);
            }
            let next = reps.len();
            let class = *key_to_class.entry(key).or_insert(next);
            if class == next {
                reps.push(j);
            }
            class_of.push(class);
        }
        let columns: Vec<(Vec<f64>, f64)> = reps
            .par_iter()
            .map(|&j| h_column(&engine, h, t, &r[j], d, h0[j], eta[j], j, &shifts_of(j)))
            .collect::<Result<_>>()?;

        for j in 0..n {
            let col = &columns[class_of[j]].0;
            for (a, &v) in col.iter().enumerate() {
                hm[j][a * d + t] = v;
                hm[j][t * d + a] = v;
            }
        }
        let new_rows: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut acc = vec![0.0; t + 1];
                for (j, sij) in s.row(i) {
                    for (a, v) in columns[class_of[j]].0.iter().enumerate() {
                        acc[a] += sij * v;
                    }
                }
                acc
            })
            .collect();
        for (ri, acc) in r.iter_mut().zip(new_rows) {
            for (a, v) in acc.into_iter().enumerate() {
                ri[a * d + t] = v;
                ri[t * d + a] = v;
            }
        }
        check_psd(&r, d, t + 1)?;

        if let Some(sp) = spike {
            if t >= 1 && mu.len() < d {
                let m: f64 = (0..n).map(|j| sp.v[j] * columns[class_of[j]].1).sum();
                mu.push(sp.lambda * m);
            }
        }
    }

    Ok(DEState {
        mode: DeMode::PerIndex,
        n,
        depth: d,
        r,
        h: hm,
        mu: spike.map(|_| MuSchedule::new(mu)),
        spike: spike.map(|sp| SpikeRecord {
            lambda: sp.lambda,
            u: sp.u.to_vec(),
            v: sp.v.to_vec(),
        }),
        x0: x0.to_vec(),
        eta: eta.to_vec(),
        activation: h.clone(),
        profile_id: s.id().to_string(),
        engine: *cfg,
    })
}

/// Rejects covariances whose leading `t x t` block is indefinite beyond tolerance.
fn check_psd(r: &[Vec<f64>], d: usize, t: usize) -> Result<()> {
    let mut seen: HashMap<Vec<u64>, ()> = HashMap::new();
    for ri in r {
        let key: Vec<u64> = (0..t)
            .flat_map(|a| (0..t).map(move |b| (a, b)))
            .map(|(a, b)| ri[a * d + b].to_bits())
            .collect();
        if seen.insert(key, ()).is_some() {
            continue;
        }
        let m = DMatrix::from_fn(t, t, |a, b| ri[a * d + b]);
        let min = min_eigenvalue(&m);
        if min < -COVARIANCE_TOLERANCE * m.amax().max(1.0) {
            return Err(AmpError::InvalidCovariance { min_eigenvalue: min });
        }
    }
    Ok(())
}

/// Per-index Density Evolution up to `Z^t_max`.
pub fn de_run(
    s: &VarianceProfile,
    h: &Activation,
    x0: &[f64],
    eta: &[f64],
    t_max: usize,
    cfg: &GaussianExpectationConfig,
) -> Result<DEState> {
    run_per_index(s, h, x0, eta, t_max, cfg, None)
}

/// Non-centered Density Evolution for `A = lambda u v^T + W`.
#[allow(clippy::too_many_arguments)]
pub fn de_run_noncentered(
    s: &VarianceProfile,
    h: &Activation,
    x0: &[f64],
    eta: &[f64],
    lambda: f64,
    u: &[f64],
    v: &[f64],
    t_max: usize,
    cfg: &GaussianExpectationConfig,
) -> Result<(DEState, MuSchedule)> {
    let state = run_per_index(s, h, x0, eta, t_max, cfg, Some(Spike { lambda, u, v }))?;
    let mu = state.mu.clone().expect("non-centered run records mu");
    Ok((state, mu))
}

/// Index-free recursion `R^{t+1} = c H^t` for profiles whose rows all sum
/// to `c`, with constant `x0` and `eta`.
pub fn de_run_asymptotic(
    s: &VarianceProfile,
    h: &Activation,
    x0: f64,
    eta: f64,
    t_max: usize,
    cfg: &GaussianExpectationConfig,
) -> Result<DEState> {
    let c = s.common_row_sum(1e-12).ok_or_else(|| {
        AmpError::Precondition("row sums of the profile are not all equal".into())
    })?;
    if h.is_index_dependent() {
        return Err(AmpError::Precondition(
            "asymptotic recursion needs an index-free activation".into(),
        ));
    }
    if t_max == 0 {
        return Err(AmpError::Precondition("t_max must be at least 1".into()));
    }
    let engine = GaussianEngine::new(cfg)?;
    let d = t_max;
    let h0 = h.eval(x0, eta, 0, 0);
    let mut r = vec![0.0; d * d];
    let mut hm = vec![0.0; d * d];
    let zeros = vec![0.0; d];
    for t in 0..d {
        let (col, _) = h_column(&engine, h, t, &r, d, h0, eta, 0, &zeros[..t])?;
        for (a, &v) in col.iter().enumerate() {
            hm[a * d + t] = v;
            hm[t * d + a] = v;
            r[a * d + t] = c * v;
            r[t * d + a] = c * v;
        }
        check_psd(std::slice::from_ref(&r), d, t + 1)?;
    }
    let n = s.n();
    Ok(DEState {
        mode: DeMode::Asymptotic,
        n,
        depth: d,
        r: vec![r],
        h: vec![hm],
        mu: None,
        spike: None,
        x0: vec![x0; n],
        eta: vec![eta; n],
        activation: h.clone(),
        profile_id: s.id().to_string(),
        engine: *cfg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activations::PolynomialFamily;
    use crate::profiles::{make_block_profiles, make_dense_profile, make_dregular_profile};
    use proptest::prelude::*;

    fn gh() -> GaussianExpectationConfig {
        GaussianExpectationConfig::default()
    }

    /// Closed form of `E[X+ Y+]` for a centered pair.
    fn relu_cross(sa: f64, sb: f64, rho: f64) -> f64 {
        sa * sb / (2.0 * std::f64::consts::PI)
            * ((1.0 - rho * rho).sqrt() + rho * (std::f64::consts::FRAC_PI_2 + rho.asin()))
    }

    #[test]
    fn pair_expectation_examples() {
        let id = |x: f64| x;
        let v = gaussian_pair_expectation([[1.0, 0.0], [0.0, 1.0]], id, id, &gh()).unwrap();
        assert!(v.abs() < 1e-12);
        for rho in [-0.8, 0.1, 0.65] {
            let v = gaussian_pair_expectation([[1.0, rho], [rho, 1.0]], id, id, &gh()).unwrap();
            assert!((v - rho).abs() < 1e-12);
        }
        let relu = |x: f64| x.max(0.0);
        let v = gaussian_pair_expectation([[1.0, 1.0], [1.0, 1.0]], relu, relu, &gh()).unwrap();
        assert!((v - 0.5).abs() < 1e-6, "{v}");
        assert!(matches!(
            gaussian_pair_expectation([[1.0, 2.0], [2.0, 1.0]], id, id, &gh()),
            Err(AmpError::InvalidCovariance { .. })
        ));
    }

    #[test]
    fn positive_part_cross_moment_accuracy() {
        let relu = |x: f64| x.max(0.0);
        let engine = GaussianEngine::new(&gh()).unwrap();
        for (sa, sb) in [(1.0, 1.0), (0.3, 2.0)] {
            for rho in [-0.9, -0.5, 0.0, 0.3, 0.7, 0.95] {
                let cov = [sa * sa, rho * sa * sb, sb * sb];
                let (v, _) = engine.expect2_cut(cov, relu, Some(0.0), relu, Some(0.0)).unwrap();
                assert!((v - relu_cross(sa, sb, rho)).abs() < 1e-10, "rho = {rho}");
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(GaussianEngine::new(&GaussianExpectationConfig::gauss_hermite(1)).is_err());
        assert!(GaussianEngine::new(&GaussianExpectationConfig::monte_carlo(10, 0)).is_err());
    }

    #[test]
    fn identity_dense_gives_identity_covariances() {
        let n = 50;
        let s = make_dense_profile(n, false).unwrap();
        let de = de_run(&s, &Activation::identity(), &vec![1.0; n], &vec![0.0; n], 6, &gh()).unwrap();
        for i in 0..n {
            let diff = de.r_matrix(i, 6) - DMatrix::<f64>::identity(6, 6);
            assert!(diff.amax() < 1e-10, "{diff}");
        }
    }

    #[test]
    fn positive_part_variance_ladder() {
        let n = 20;
        let s = make_dense_profile(n, false).unwrap();
        let de = de_run(&s, &Activation::positive_part(), &vec![1.0; n], &vec![0.0; n], 6, &gh()).unwrap();
        for t in 1..=6 {
            let expect = 2f64.powi(1 - t as i32);
            assert!((de.variance(3, t) - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn positive_part_off_diagonals_match_closed_form() {
        let n = 10;
        let s = make_dense_profile(n, false).unwrap();
        let de = de_run(&s, &Activation::positive_part(), &vec![1.0; n], &vec![0.0; n], 4, &gh()).unwrap();
        // Cov(Z^2, Z^3) = E[Z^1+ Z^2+] with the (Z^1, Z^2) law of R^2.
        let (v1, v2, c) = (de.r_entry(0, 0, 0), de.r_entry(0, 1, 1), de.r_entry(0, 0, 1));
        let rho = c / (v1 * v2).sqrt();
        let exact = relu_cross(v1.sqrt(), v2.sqrt(), rho);
        assert!((de.r_entry(0, 1, 2) - exact).abs() < 1e-10);
        // First row: E[h(x0) Z^t+] = sigma_t / sqrt(2 pi).
        let exact = (v2 / (2.0 * std::f64::consts::PI)).sqrt();
        assert!((de.r_entry(0, 0, 2) - exact).abs() < 1e-12);
    }

    #[test]
    fn nesting_is_bitwise() {
        let s = make_dregular_profile(30, 4, 2).unwrap();
        let x0: Vec<f64> = (0..30).map(|i| 0.5 + (i % 7) as f64 / 7.0).collect();
        let eta = vec![0.2; 30];
        let h = Activation::tanh();
        let long = de_run(&s, &h, &x0, &eta, 5, &gh()).unwrap();
        for t in 1..5 {
            let short = de_run(&s, &h, &x0, &eta, t, &gh()).unwrap();
            for i in 0..30 {
                for a in 0..t {
                    for b in 0..t {
                        assert_eq!(short.r_entry(i, a, b).to_bits(), long.r_entry(i, a, b).to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn asymptotic_collapse() {
        let s = make_dregular_profile(40, 6, 9).unwrap();
        let h = Activation::tanh();
        let per = de_run(&s, &h, &vec![0.8; 40], &vec![0.0; 40], 5, &gh()).unwrap();
        let asy = de_run_asymptotic(&s, &h, 0.8, 0.0, 5, &gh()).unwrap();
        for i in 0..40 {
            for a in 0..5 {
                for b in 0..5 {
                    assert!((per.r_entry(i, a, b) - per.r_entry(0, a, b)).abs() <= 1e-12);
                    assert!((per.r_entry(i, a, b) - asy.r_entry(i, a, b)).abs() <= 1e-10);
                }
            }
        }
        let dense = make_dense_profile(25, true).unwrap();
        assert!(de_run_asymptotic(&dense, &h, 0.8, 0.0, 3, &gh()).is_ok());
    }

    #[test]
    fn asymptotic_rejects_inhomogeneous_profiles() {
        let rows = vec![vec![(1, 0.5)], vec![(0, 0.5), (2, 0.5)], vec![(1, 1.0)]];
        let s = VarianceProfile::from_rows(3, rows, 2, true, "uneven").unwrap();
        assert!(matches!(
            de_run_asymptotic(&s, &Activation::tanh(), 1.0, 0.0, 2, &gh()),
            Err(AmpError::Precondition(_))
        ));
    }

    #[test]
    fn noncentered_identity_mu_is_geometric() {
        let n = 30;
        let s = make_dense_profile(n, false).unwrap();
        let u: Vec<f64> = (0..n).map(|i| ((i as f64) * 0.37).sin()).collect();
        let v: Vec<f64> = (0..n).map(|i| ((i as f64) * 0.11).cos() / n as f64).collect();
        let uv: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
        let lambda = 1.3;
        let (_, mu) = de_run_noncentered(&s, &Activation::identity(), &vec![1.0; n], &vec![0.0; n], lambda, &u, &v, 6, &gh()).unwrap();
        assert_eq!(mu.len(), 6);
        assert!((mu.mu(1) - lambda * v.iter().sum::<f64>()).abs() < 1e-12);
        for t in 1..6 {
            assert!((mu.mu(t + 1) - lambda * uv * mu.mu(t)).abs() < 1e-10);
        }
    }

    #[test]
    fn noncentered_reduces_to_centered() {
        let n = 12;
        let s = make_dregular_profile(n, 4, 1).unwrap();
        let h = Activation::tanh();
        let x0 = vec![0.7; n];
        let eta = vec![0.0; n];
        let base = de_run(&s, &h, &x0, &eta, 4, &gh()).unwrap();
        let u: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
        let (off, mu) = de_run_noncentered(&s, &h, &x0, &eta, 0.0, &u, &u, 4, &gh()).unwrap();
        assert!(mu.values().iter().all(|&m| m == 0.0));
        let (no_u, mu_u) = de_run_noncentered(&s, &h, &x0, &eta, 2.0, &vec![0.0; n], &u, 4, &gh()).unwrap();
        assert!(mu_u.mu(1) != 0.0);
        for i in 0..n {
            for a in 0..4 {
                for b in 0..4 {
                    assert_eq!(off.r_entry(i, a, b).to_bits(), base.r_entry(i, a, b).to_bits());
                    assert_eq!(no_u.r_entry(i, a, b).to_bits(), base.r_entry(i, a, b).to_bits());
                }
            }
        }
    }

    #[test]
    fn orthogonal_spike_kills_second_mean() {
        let n = 4;
        let s = make_dense_profile(n, false).unwrap();
        let u = vec![0.5, 0.5, -0.5, -0.5];
        let v = vec![0.5, -0.5, 0.5, -0.5];
        let (_, mu) = de_run_noncentered(&s, &Activation::identity(), &[1.0, 2.0, 3.0, 4.0], &vec![0.0; n], 1.5, &u, &v, 3, &gh()).unwrap();
        assert!(mu.mu(1) != 0.0);
        assert!(mu.mu(2).abs() < 1e-14);
    }

    #[test]
    fn per_index_polynomial_family_is_honoured() {
        let n = 6;
        let s = make_dense_profile(n, false).unwrap();
        // p_i(u) = (i + 1) u at every step.
        let coeffs: Vec<f64> = (0..n).flat_map(|i| [0.0, (i + 1) as f64]).collect();
        let h = Activation::polynomial(PolynomialFamily::new(1, n, 1, coeffs).unwrap());
        let de = de_run(&s, &h, &vec![1.0; n], &vec![0.0; n], 3, &gh()).unwrap();
        // R^1 = mean of (i+1)^2 = 91/6, R^2(1,1) = R^1 * 91/6.
        let m2 = 91.0 / 6.0;
        assert!((de.variance(0, 1) - m2).abs() < 1e-12);
        assert!((de.variance(0, 2) - m2 * m2).abs() < 1e-9);
    }

    #[test]
    fn csv_exports() {
        let s = make_dense_profile(3, false).unwrap();
        let de = de_run(&s, &Activation::identity(), &[1.0; 3], &[0.0; 3], 2, &gh()).unwrap();
        let csv = de.to_csv().unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("i,t,s,r_value"));
        let rows: Vec<Vec<f64>> = lines
            .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
            .collect();
        assert_eq!(rows.len(), 3 * 3);
        for row in &rows {
            let expect = if row[1] == row[2] { 1.0 } else { 0.0 };
            assert!((row[3] - expect).abs() < 1e-12);
        }
        let summary = de.summary_csv().unwrap();
        assert!(summary.starts_with("t,min_diag,max_diag,mean_diag\n1,1.0,1.0,1.0\n2,"));
        let mu = MuSchedule::new(vec![0.5, 0.25]);
        assert_eq!(mu.to_csv().unwrap(), "t,mu\n1,0.5\n2,0.25\n");
    }

    #[test]
    fn block_profile_runs_and_floor_is_positive() {
        let (s, _) = make_block_profiles(10, 15, 0.3, -0.2).unwrap();
        let x0: Vec<f64> = (0..25).map(|i| if i < 10 { 1.0 } else { -0.5 }).collect();
        let de = de_run(&s, &Activation::tanh(), &x0, &[0.0; 25], 6, &gh()).unwrap();
        assert!(de.variance_floor().iter().all(|&v| v > 0.0));
        assert!(de.expected_derivative(3).unwrap().iter().all(|&d| d > 0.0 && d <= 1.0));
        assert!(de.expected_derivative(7).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn engines_agree(a in 0.05f64..2.0, c in 0.05f64..2.0, rho in -0.95f64..0.95, which in 0usize..4) {
            let b = rho * (a * c).sqrt();
            let hs = [Activation::identity(), Activation::positive_part(), Activation::tanh(),
                      Activation::polynomial(PolynomialFamily::uniform(&[0.0, 1.0, 0.5]).unwrap())];
            let h = &hs[which];
            let k = h.kink(0.0);
            let (q, _) = GaussianEngine::new(&gh()).unwrap().expect2_cut([a, b, c], |x| h.eval(x, 0.0, 0, 0), k, |x| h.eval(x, 0.0, 0, 1), k).unwrap();
            let mc = GaussianEngine::new(&GaussianExpectationConfig::monte_carlo(1_000_000, 17)).unwrap();
            let (m, se) = mc.expect2_with_se([a, b, c], |x| h.eval(x, 0.0, 0, 0), |x| h.eval(x, 0.0, 0, 1)).unwrap();
            prop_assert!((q - m).abs() <= 4.0 * se, "q={} mc={} se={}", q, m, se);
        }

        #[test]
        fn states_are_psd(seed in any::<u64>(), x in 0.2f64..2.0) {
            let s = make_dregular_profile(16, 4, seed).unwrap();
            let x0: Vec<f64> = (0..16).map(|i| x * (1.0 + (i % 3) as f64)).collect();
            let de = de_run(&s, &Activation::tanh(), &x0, &[0.1; 16], 5, &gh()).unwrap();
            for i in 0..16 {
                prop_assert!(min_eigenvalue(&de.r_matrix(i, 5)) >= -1e-10);
                prop_assert!(min_eigenvalue(&de.h_matrix(i)) >= -1e-8);
            }
        }
    }
}
