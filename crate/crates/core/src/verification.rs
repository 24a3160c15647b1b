//! Statistical comparison of AMP trajectories with Density Evolution.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::amp::Trajectory;
use crate::density_evolution::{into_string, DEState};
use crate::error::{AmpError, Result};
use crate::gaussian::COVARIANCE_TOLERANCE;

/// Pseudo-Lipschitz test function `phi(eta, x^1, ..., x^t)`.
///
/// Coordinates are 1-based iteration indices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TestFunction {
    /// `(x^coord)^power` with `power` in {1, 2}.
    CoordinatePower { coord: usize, power: u32 },
    /// `x^a x^b`.
    ProductPair { a: usize, b: usize },
    AbsoluteValue { coord: usize },
    /// Linear ramp from 0 to 1 over `[threshold - width/2, threshold + width/2]`.
    IndicatorSmoothed { coord: usize, threshold: f64, width: f64 },
    Constant { value: f64 },
}

impl TestFunction {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AmpError::Precondition(m));
        match *self {
            Self::CoordinatePower { coord, power } => {
                if coord == 0 {
                    return bad("coordinates are 1-based".into());
                }
                if !(1..=2).contains(&power) {
                    return bad(format!("power {power} is not pseudo-Lipschitz of order 2"));
                }
            }
            Self::ProductPair { a, b } if a == 0 || b == 0 => return bad("coordinates are 1-based".into()),
            Self::AbsoluteValue { coord: 0 } => return bad("coordinates are 1-based".into()),
            Self::IndicatorSmoothed { coord, width, .. } => {
                if coord == 0 {
                    return bad("coordinates are 1-based".into());
                }
                if !(width > 0.0) {
                    return bad(format!("ramp width {width} must be positive"));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Number of iterates the function reads.
    pub fn arity(&self) -> usize {
        match *self {
            Self::CoordinatePower { coord, .. }
            | Self::AbsoluteValue { coord }
            | Self::IndicatorSmoothed { coord, .. } => coord,
            Self::ProductPair { a, b } => a.max(b),
            Self::Constant { .. } => 0,
        }
    }

    /// Declared constant `L` in `|phi(x) - phi(y)| <= L |x - y| (1 + |x| + |y|)`.
    pub fn pl_constant(&self) -> f64 {
        match *self {
            Self::IndicatorSmoothed { width, .. } => 1.0 / width,
            Self::Constant { .. } => 0.0,
            _ => 1.0,
        }
    }

    pub fn tag(&self) -> String {
        match *self {
            Self::CoordinatePower { coord, power } => format!("x{coord}^{power}"),
            Self::ProductPair { a, b } => format!("x{a}*x{b}"),
            Self::AbsoluteValue { coord } => format!("|x{coord}|"),
            Self::IndicatorSmoothed { coord, threshold, width } => {
                format!("ramp(x{coord};{threshold},{width})")
            }
            Self::Constant { value } => format!("const({value})"),
        }
    }

    /// `phi(eta, xs)` where `xs[s - 1] = x^s`.
    pub fn eval(&self, _eta: f64, xs: &[f64]) -> f64 {
        match *self {
            Self::CoordinatePower { coord, power } => xs[coord - 1].powi(power as i32),
            Self::ProductPair { a, b } => xs[a - 1] * xs[b - 1],
            Self::AbsoluteValue { coord } => xs[coord - 1].abs(),
            Self::IndicatorSmoothed { coord, threshold, width } => {
                ((xs[coord - 1] - threshold) / width + 0.5).clamp(0.0, 1.0)
            }
            Self::Constant { value } => value,
        }
    }
}

fn check_beta(beta: &[f64], n: usize) -> Result<()> {
    if beta.len() != n {
        return Err(AmpError::DimensionMismatch {
            what: "beta",
            expected: n,
            got: beta.len(),
        });
    }
    Ok(())
}

/// `(1/n) sum_i beta_i phi(eta_i, x_i^1, ..., x_i^t)`.
pub fn empirical_statistic(traj: &Trajectory, phi: &TestFunction, beta: &[f64]) -> Result<f64> {
    phi.validate()?;
    let n = traj.n();
    check_beta(beta, n)?;
    if phi.arity() > traj.depth() {
        return Err(AmpError::ArityMismatch {
            needed: phi.arity(),
            available: traj.depth(),
        });
    }
    if n == 0 {
        return Err(AmpError::EmptyInput("trajectory"));
    }
    let k = phi.arity();
    let mut xs = vec![0.0; k];
    let mut total = 0.0;
    for i in 0..n {
        for (s, slot) in xs.iter_mut().enumerate() {
            *slot = traj.x(s + 1)[i];
        }
        total += beta[i] * phi.eval(traj.eta()[i], &xs);
    }
    Ok(total / n as f64)
}

/// Symmetric square root with eigenvalues in `[-tol, 0)` set to zero.
fn covariance_root(r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(r.clone());
    let scale = r.amax().max(1.0);
    let mut d = eig.eigenvalues.clone();
    for v in d.iter_mut() {
        if *v < -COVARIANCE_TOLERANCE * scale {
            return Err(AmpError::InvalidCovariance { min_eigenvalue: *v });
        }
        *v = v.max(0.0).sqrt();
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&d))
}

const SEED_MASK: u64 = (1 << 24) - 1;

fn mix(mut h: u64, word: u64) -> u64 {
    // splitmix64 finalizer over a running xor.
    h ^= word.wrapping_add(0x9e37_79b9_7f4a_7c15);
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

/// `(1/n) sum_i beta_i E phi(eta_i, Z_i^1 + mu_1 u_i, ..., Z_i^t + mu_t u_i)`
/// by Monte Carlo, with its standard error.
///
/// Indices with identical covariance, `eta` and shifts share draws. The
/// draws of a group depend only on its content and `seed`, so the result is
/// invariant under permutations of the indices.
pub fn de_statistic(
    de: &DEState,
    phi: &TestFunction,
    eta: &[f64],
    beta: &[f64],
    mc_samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    phi.validate()?;
    let n = de.n();
    check_beta(beta, n)?;
    if eta.len() != n {
        return Err(AmpError::DimensionMismatch {
            what: "eta",
            expected: n,
            got: eta.len(),
        });
    }
    let t = phi.arity();
    if t > de.depth() {
        return Err(AmpError::ArityMismatch {
            needed: t,
            available: de.depth(),
        });
    }
    if mc_samples < 2 {
        return Err(AmpError::Precondition("at least two Monte Carlo samples are needed".into()));
    }
    if n == 0 {
        return Err(AmpError::EmptyInput("density evolution state"));
    }

    let mut groups: HashMap<Vec<u64>, (usize, f64)> = HashMap::new();
    for i in 0..n {
        let mut key = Vec::with_capacity(t * t + t + 1);
        for a in 0..t {
            for b in 0..t {
                key.push(de.r_entry(i, a, b).to_bits());
            }
        }
        for s in 1..=t {
            key.push(de.shift(i, s).to_bits());
        }
        key.push(eta[i].to_bits());
        let entry = groups.entry(key).or_insert((i, 0.0));
        entry.1 += beta[i];
    }
    let mut groups: Vec<(Vec<u64>, (usize, f64))> = groups.into_iter().collect();
    groups.sort_by(|a, b| a.0.cmp(&b.0));

    let parts: Vec<(f64, f64)> = groups
        .par_iter()
        .map(|(key, (rep, weight))| -> Result<(f64, f64)> {
            let i = *rep;
            let root = covariance_root(&de.r_matrix(i, t))?;
            let shifts: Vec<f64> = (1..=t).map(|s| de.shift(i, s)).collect();
            // Low mantissa bits are dropped so that summation-order noise in R
            // does not change the stream.
            let stream = key.iter().fold(seed, |h, &w| mix(h, w & !SEED_MASK));
            let mut rng = ChaCha8Rng::seed_from_u64(stream);
            let mut xi = DVector::zeros(t);
            let mut xs = vec![0.0; t];
            let (mut sum, mut sum2) = (0.0, 0.0);
            for _ in 0..mc_samples {
                for v in xi.iter_mut() {
                    *v = StandardNormal.sample(&mut rng);
                }
                let z = &root * &xi;
                for s in 0..t {
                    xs[s] = z[s] + shifts[s];
                }
                let v = phi.eval(eta[i], &xs);
                sum += v;
                sum2 += v * v;
            }
            let m = mc_samples as f64;
            let mean = sum / m;
            let var = ((sum2 - m * mean * mean) / (m - 1.0)).max(0.0);
            Ok((weight * mean, weight * weight * var / m))
        })
        .collect::<Result<_>>()?;
    let nf = n as f64;
    let value = parts.iter().map(|p| p.0).sum::<f64>() / nf;
    let se = parts.iter().map(|p| p.1).sum::<f64>().sqrt() / nf;
    Ok((value, se))
}

/// Empirical statistic against its Density Evolution prediction.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapReport {
    pub phi_tag: String,
    pub variant: String,
    /// Empirical value of the seed realizing the median gap.
    pub empirical: f64,
    pub reference: f64,
    pub gap: f64,
    /// Monte Carlo standard error of `reference`.
    pub se: f64,
    pub n: usize,
    pub t: usize,
    pub seeds: Vec<u64>,
    /// Per-seed `|empirical - reference|`, in seed order.
    pub per_seed_gaps: Vec<f64>,
}

/// Configuration of the reference Monte Carlo in [`convergence_gap`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GapConfig {
    pub mc_samples: usize,
    pub seed: u64,
}

impl Default for GapConfig {
    fn default() -> Self {
        Self {
            mc_samples: 100_000,
            seed: 0,
        }
    }
}

/// Median (lower median for even counts) over seeds of `|empirical - DE|`.
pub fn convergence_gap(
    trajs: &[Trajectory],
    de: &DEState,
    phi: &TestFunction,
    cfg: &GapConfig,
) -> Result<GapReport> {
    let first = trajs.first().ok_or(AmpError::EmptyInput("trajectory set"))?;
    for tr in &trajs[1..] {
        let same = tr.n() == first.n()
            && tr.depth() == first.depth()
            && tr.variant() == first.variant()
            && tr.profile_id() == first.profile_id()
            && tr.config_hash() == first.config_hash()
            && tr.x0() == first.x0()
            && tr.eta() == first.eta()
            && tr.beta() == first.beta();
        if !same {
            return Err(AmpError::Inconsistent(
                "trajectories in a gap report must share their configuration".into(),
            ));
        }
    }
    if de.n() != first.n() {
        return Err(AmpError::DimensionMismatch {
            what: "density evolution state",
            expected: first.n(),
            got: de.n(),
        });
    }
    let (reference, se) = de_statistic(de, phi, first.eta(), first.beta(), cfg.mc_samples, cfg.seed)?;
    let empirical: Vec<f64> = trajs
        .iter()
        .map(|tr| empirical_statistic(tr, phi, tr.beta()))
        .collect::<Result<_>>()?;
    let gaps: Vec<f64> = empirical.iter().map(|e| (e - reference).abs()).collect();
    let mut order: Vec<usize> = (0..gaps.len()).collect();
    order.sort_by(|&a, &b| gaps[a].total_cmp(&gaps[b]).then(a.cmp(&b)));
    let pick = order[(gaps.len() - 1) / 2];
    Ok(GapReport {
        phi_tag: phi.tag(),
        variant: first.variant().to_string(),
        empirical: empirical[pick],
        reference,
        gap: gaps[pick],
        se,
        n: first.n(),
        t: phi.arity(),
        seeds: trajs.iter().map(|tr| tr.seed()).collect(),
        per_seed_gaps: gaps,
    })
}

/// CSV with columns `experiment_id, n, t, phi_tag, variant, empirical,
/// reference, gap, se, seeds` (seeds joined by `;`).
pub fn gap_reports_to_csv<'a>(rows: impl IntoIterator<Item = (&'a str, &'a GapReport)>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "experiment_id", "n", "t", "phi_tag", "variant", "empirical", "reference", "gap", "se", "seeds",
    ])?;
    for (id, r) in rows {
        let seeds = r.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(";");
        w.serialize((id, r.n, r.t, &r.phi_tag, &r.variant, r.empirical, r.reference, r.gap, r.se, seeds))?;
    }
    into_string(w)
}

/// Order-1 Wasserstein distance between two empirical laws.
///
/// Equal sizes use the sorted-sample L1 average; otherwise the exact
/// integral of `|F_a - F_b|` over the merged support.
pub fn wasserstein1d(samples_a: &[f64], samples_b: &[f64]) -> Result<f64> {
    if samples_a.is_empty() || samples_b.is_empty() {
        return Err(AmpError::EmptyInput("wasserstein samples"));
    }
    let sorted = |s: &[f64]| {
        let mut v = s.to_vec();
        v.sort_by(f64::total_cmp);
        v
    };
    let (a, b) = (sorted(samples_a), sorted(samples_b));
    if a.len() == b.len() {
        return Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64);
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut ia, mut ib) = (0usize, 0usize);
    let mut prev = a[0].min(b[0]);
    let mut total = 0.0;
    while ia < a.len() || ib < b.len() {
        let next = match (a.get(ia), b.get(ib)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        total += (ia as f64 / na - ib as f64 / nb).abs() * (next - prev);
        while ia < a.len() && a[ia] == next {
            ia += 1;
        }
        while ib < b.len() && b[ib] == next {
            ib += 1;
        }
        prev = next;
    }
    Ok(total)
}

/// Per-step `|x_a^t - x_b^t| / sqrt(n)` between the three Onsager variants.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariantGaps {
    pub ampz_ampw: Vec<f64>,
    pub ampz_amp: Vec<f64>,
    pub ampw_amp: Vec<f64>,
}

impl VariantGaps {
    /// CSV with columns `t, ampz_ampw, ampz_amp, ampw_amp`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["t", "ampz_ampw", "ampz_amp", "ampw_amp"])?;
        for t in 0..self.ampz_ampw.len() {
            w.serialize((t + 1, self.ampz_ampw[t], self.ampz_amp[t], self.ampw_amp[t]))?;
        }
        into_string(w)
    }
}

fn normalized_distance(a: &[f64], b: &[f64]) -> f64 {
    let ss: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (ss / a.len().max(1) as f64).sqrt()
}

pub fn onsager_variant_gap(traj_z: &Trajectory, traj_w: &Trajectory, traj_v: &Trajectory) -> Result<VariantGaps> {
    let all = [traj_z, traj_w, traj_v];
    for tr in &all[1..] {
        let same = tr.n() == traj_z.n()
            && tr.depth() == traj_z.depth()
            && tr.seed() == traj_z.seed()
            && tr.matrix_id() == traj_z.matrix_id()
            && tr.x0() == traj_z.x0()
            && tr.eta() == traj_z.eta();
        if !same {
            return Err(AmpError::Inconsistent(
                "variant trajectories must share seed, matrix and inputs".into(),
            ));
        }
    }
    let per_step = |a: &Trajectory, b: &Trajectory| -> Vec<f64> {
        (1..=a.depth()).map(|t| normalized_distance(a.x(t), b.x(t))).collect()
    };
    Ok(VariantGaps {
        ampz_ampw: per_step(traj_z, traj_w),
        ampz_amp: per_step(traj_z, traj_v),
        ampw_amp: per_step(traj_w, traj_v),
    })
}
