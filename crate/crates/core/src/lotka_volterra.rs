//! Equilibria of Lotka-Volterra systems: `z = (A - I) z^+ + 1`, abundances `z^+`.

use serde::Serialize;

use crate::density_evolution::into_string;
use crate::error::{AmpError, Result};
use crate::sampler::{estimate_spectral_norm, LinearOperator};

pub const DEFAULT_RELAXATION: f64 = 0.5;

/// `factor * A`.
pub struct Scaled<'a> {
    inner: &'a dyn LinearOperator,
    factor: f64,
}

impl<'a> Scaled<'a> {
    pub fn new(inner: &'a dyn LinearOperator, factor: f64) -> Self {
        Self { inner, factor }
    }
}

impl LinearOperator for Scaled<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.inner.apply(x);
        y.iter_mut().for_each(|v| *v *= self.factor);
        y
    }

    fn apply_transpose(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.inner.apply_transpose(x);
        y.iter_mut().for_each(|v| *v *= self.factor);
        y
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquilibriumResult {
    pub z: Vec<f64>,
    pub x_star: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    pub surviving_fraction: f64,
    /// Power-iteration estimate of the operator norm of `A`.
    pub a_norm: f64,
    pub seed: Option<u64>,
}

impl EquilibriumResult {
    pub fn n(&self) -> usize {
        self.z.len()
    }

    pub fn mean_abundance(&self) -> f64 {
        self.x_star.iter().sum::<f64>() / self.n().max(1) as f64
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn csv_header() -> &'static str {
        "n,seed,residual,iterations,surviving_fraction,mean_abundance"
    }

    pub fn to_csv(&self) -> Result<String> {
        results_to_csv(std::slice::from_ref(self))
    }
}

pub fn results_to_csv(results: &[EquilibriumResult]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(EquilibriumResult::csv_header().split(','))?;
    for r in results {
        w.write_record([
            r.n().to_string(),
            r.seed.map_or(String::new(), |s| s.to_string()),
            format!("{:e}", r.residual),
            r.iterations.to_string(),
            r.surviving_fraction.to_string(),
            r.mean_abundance().to_string(),
        ])?;
    }
    into_string(w)
}

fn positive_part(z: &[f64]) -> Vec<f64> {
    z.iter().map(|&v| v.max(0.0)).collect()
}

/// `(A - I) z^+ + 1`.
fn lv_map(a: &dyn LinearOperator, z: &[f64]) -> Vec<f64> {
    let zp = positive_part(z);
    let az = a.apply(&zp);
    az.iter().zip(&zp).map(|(a, p)| a - p + 1.0).collect()
}

/// `||z - (A - I) z^+ - 1|| / sqrt(n)`.
pub fn lv_residual(a: &dyn LinearOperator, z: &[f64]) -> f64 {
    let f = lv_map(a, z);
    let ss: f64 = z.iter().zip(&f).map(|(z, f)| (z - f).powi(2)).sum();
    (ss / z.len().max(1) as f64).sqrt()
}

/// Damped Picard iteration from `z = 1`. Non-convergence is reported through
/// the `converged` flag.
pub fn lv_equilibrium(a: &dyn LinearOperator, tol: f64, max_iter: usize, theta: f64) -> Result<EquilibriumResult> {
    if !(tol > 0.0) {
        return Err(AmpError::Precondition(format!("tolerance must be positive, got {tol}")));
    }
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(AmpError::Precondition(format!("relaxation must lie in (0, 1], got {theta}")));
    }
    let n = a.dim();
    if n == 0 {
        return Err(AmpError::EmptyInput("interaction matrix"));
    }
    let mut z = vec![1.0; n];
    let mut iterations = 0;
    while iterations < max_iter {
        let f = lv_map(a, &z);
        let step: f64 = z.iter().zip(&f).map(|(z, f)| (z - f).powi(2)).sum::<f64>();
        if (step / n as f64).sqrt() <= tol {
            break;
        }
        for (zi, fi) in z.iter_mut().zip(&f) {
            *zi = (1.0 - theta) * *zi + theta * fi;
        }
        iterations += 1;
        if z.iter().any(|v| !v.is_finite()) {
            break;
        }
    }
    let residual = lv_residual(a, &z);
    let x_star = positive_part(&z);
    let surviving_fraction = z.iter().filter(|&&v| v > 0.0).count() as f64 / n as f64;
    Ok(EquilibriumResult {
        converged: residual <= tol,
        a_norm: estimate_spectral_norm(a, 200, 1e-8).estimate,
        z,
        x_star,
        residual,
        iterations,
        surviving_fraction,
        seed: None,
    })
}
