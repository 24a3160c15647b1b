//! Gaussian expectation machinery shared by density evolution, the activation
//! projections and the statistical checks.
//!
//! Quadrature nodes are for the probabilists' Hermite weight, so that
//! `sum_k w_k f(x_k)` approximates `E f(xi)` with `xi ~ N(0, 1)`.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{AmpError, Result};

/// Eigenvalues below this are raised to it before factorization.
pub const EIGEN_CLAMP: f64 = 1e-12;
/// Eigenvalues below minus this are reported as an invalid covariance.
pub const COVARIANCE_TOLERANCE: f64 = 1e-6;

/// Largest supported rule; beyond it the tail weights underflow.
pub const MAX_NODES: usize = 150;

/// Gauss–Hermite rule normalized to the standard normal density.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussHermite {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussHermite {
    pub fn new(count: usize) -> Result<Self> {
        if count < 1 {
            return Err(AmpError::InvalidQuadrature(
                "at least one node is required".into(),
            ));
        }
        if count > MAX_NODES {
            return Err(AmpError::InvalidQuadrature(format!(
                "{count} nodes exceeds the supported maximum of {MAX_NODES}"
            )));
        }
        let (x, w) = physicists_rule(count);
        let scale = std::f64::consts::PI.sqrt();
        let nodes = x.iter().map(|v| v * std::f64::consts::SQRT_2).collect();
        let weights = w.iter().map(|v| v / scale).collect();
        Ok(Self { nodes, weights })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `E f(sigma * xi)`.
    pub fn expect<F: Fn(f64) -> f64>(&self, sigma: f64, f: F) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| w * f(sigma * x))
            .sum()
    }
}

/// Half-width, in standard deviations, of the window used by [`SplitRule`].
pub const SPLIT_WINDOW: f64 = 12.0;

/// Gauss–Legendre rule on `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussLegendre {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussLegendre {
    pub fn new(count: usize) -> Result<Self> {
        if count < 1 {
            return Err(AmpError::InvalidQuadrature(
                "at least one node is required".into(),
            ));
        }
        let n = count;
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        for i in 0..n.div_ceil(2) {
            let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 1.0;
            for _ in 0..100 {
                let (p, d) = legendre_with_derivative(z, n);
                dp = d;
                let z1 = z;
                z = z1 - p / d;
                if (z - z1).abs() <= 1e-16 {
                    let (_, d) = legendre_with_derivative(z, n);
                    dp = d;
                    break;
                }
            }
            nodes[i] = -z;
            nodes[n - 1 - i] = z;
            weights[i] = 2.0 / ((1.0 - z * z) * dp * dp);
            weights[n - 1 - i] = weights[i];
        }
        Ok(Self { nodes, weights })
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

fn legendre_with_derivative(z: f64, n: usize) -> (f64, f64) {
    let (mut p1, mut p2) = (1.0, 0.0);
    for j in 0..n {
        let p3 = p2;
        p2 = p1;
        let jf = j as f64;
        p1 = ((2.0 * jf + 1.0) * z * p2 - jf * p3) / (jf + 1.0);
    }
    (p1, n as f64 * (z * p1 - p2) / (z * z - 1.0))
}

/// Standard normal expectations of functions with a single known kink.
///
/// The window `[-SPLIT_WINDOW, SPLIT_WINDOW]` is cut at the kink and each
/// piece gets its own Gauss–Legendre rule against the normal density.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitRule {
    legendre: GaussLegendre,
}

impl SplitRule {
    pub fn new(nodes_per_piece: usize) -> Result<Self> {
        Ok(Self {
            legendre: GaussLegendre::new(nodes_per_piece)?,
        })
    }

    /// Nodes and density-weighted weights for `E f(xi)` with a cut at `cut`.
    pub fn points(&self, cut: Option<f64>) -> Vec<(f64, f64)> {
        let lim = SPLIT_WINDOW;
        let pieces: Vec<(f64, f64)> = match cut {
            Some(c) if c.is_finite() && c > -lim && c < lim => vec![(-lim, c), (c, lim)],
            _ => vec![(-lim, lim)],
        };
        let norm = (2.0 * std::f64::consts::PI).sqrt();
        let mut out = Vec::with_capacity(pieces.len() * self.legendre.nodes.len());
        for (a, b) in pieces {
            let (mid, half) = (0.5 * (a + b), 0.5 * (b - a));
            for (x, w) in self.legendre.nodes.iter().zip(&self.legendre.weights) {
                let xi = mid + half * x;
                out.push((xi, half * w * (-0.5 * xi * xi).exp() / norm));
            }
        }
        out
    }
}

/// Newton iteration on the orthonormal Hermite recurrence (weight `exp(-x^2)`).
fn physicists_rule(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let nf = n as f64;
    let m = n.div_ceil(2);
    let mut z = 0.0_f64;
    for i in 0..m {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-0.16667),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        if n % 2 == 1 && i == m - 1 {
            z = 0.0;
        } else {
            for _ in 0..200 {
                let (p, dp) = hermite_with_derivative(z, n);
                let z1 = z;
                z = z1 - p / dp;
                if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                    break;
                }
            }
        }
        let (_, dp) = hermite_with_derivative(z, n);
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (dp * dp);
        w[n - 1 - i] = w[i];
    }
    x.reverse();
    w.reverse();
    (x, w)
}

/// Orthonormal Hermite polynomial of degree `n` and its derivative at `z`.
fn hermite_with_derivative(z: f64, n: usize) -> (f64, f64) {
    const PIM4: f64 = 0.751_125_544_464_942_5;
    let mut p1 = PIM4;
    let mut p2 = 0.0;
    for j in 0..n {
        let p3 = p2;
        p2 = p1;
        let jf = j as f64;
        p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
    }
    (p1, (2.0 * n as f64).sqrt() * p2)
}

/// Lower-triangular factor `L` of a 2x2 covariance with `L L^T` equal to the
/// eigenvalue-clamped matrix. Entries are `[l11, l21, l22]`.
pub fn factor_2x2(a: f64, b: f64, c: f64) -> Result<[f64; 3]> {
    let mean = 0.5 * (a + c);
    let diff = 0.5 * (a - c);
    let rad = (diff * diff + b * b).sqrt();
    let lo = mean - rad;
    let hi = mean + rad;
    if lo < -COVARIANCE_TOLERANCE || !lo.is_finite() || !hi.is_finite() {
        return Err(AmpError::InvalidCovariance { min_eigenvalue: lo });
    }
    let (a, b, c) = if lo < EIGEN_CLAMP {
        // Rebuild from the clamped spectrum.
        let lo_c = EIGEN_CLAMP;
        let hi_c = hi.max(EIGEN_CLAMP);
        // Eigenvector of `hi`: (b, hi - a) or (hi - c, b), choose the stabler one.
        let (vx, vy) = if (hi - a).abs() + b.abs() > (hi - c).abs() + b.abs() {
            (b, hi - a)
        } else {
            (hi - c, b)
        };
        let norm = (vx * vx + vy * vy).sqrt();
        let (ux, uy) = if norm > 0.0 {
            (vx / norm, vy / norm)
        } else if a >= c {
            (1.0, 0.0)
        } else {
            (0.0, 1.0)
        };
        (
            hi_c * ux * ux + lo_c * uy * uy,
            (hi_c - lo_c) * ux * uy,
            hi_c * uy * uy + lo_c * ux * ux,
        )
    } else {
        (a, b, c)
    };
    let l11 = a.sqrt();
    let l21 = if l11 > 0.0 { b / l11 } else { 0.0 };
    let l22 = (c - l21 * l21).max(0.0).sqrt();
    Ok([l11, l21, l22])
}

/// Lower-triangular factor of a symmetric PSD matrix after clamping its
/// eigenvalues at [`EIGEN_CLAMP`].
pub fn psd_factor(matrix: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = matrix.nrows();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let sym = (matrix + matrix.transpose()) * 0.5;
    if let Some(chol) = sym.clone().cholesky() {
        let min_diag = (0..n).map(|k| chol.l()[(k, k)]).fold(f64::INFINITY, f64::min);
        if min_diag * min_diag >= EIGEN_CLAMP {
            return Ok(chol.l());
        }
    }
    let eig = SymmetricEigen::new(sym);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < -COVARIANCE_TOLERANCE || !min.is_finite() {
        return Err(AmpError::InvalidCovariance { min_eigenvalue: min });
    }
    let clamped = eig.eigenvalues.map(|v| v.max(EIGEN_CLAMP));
    let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose();
    let rebuilt = (&rebuilt + rebuilt.transpose()) * 0.5;
    rebuilt
        .cholesky()
        .map(|c| c.l())
        .ok_or(AmpError::InvalidCovariance { min_eigenvalue: min })
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(matrix: &DMatrix<f64>) -> f64 {
    if matrix.nrows() == 0 {
        return 0.0;
    }
    let sym = (matrix + matrix.transpose()) * 0.5;
    SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Standard normal cumulative distribution function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

#[cfg(test)]
mod tests {
    #[test]
    fn legendre_integrates_polynomials() {
        let gl = GaussLegendre::new(12).unwrap();
        let int: f64 = gl.nodes().iter().zip(gl.weights()).map(|(x, w)| w * x.powi(10)).sum();
        assert!((int - 2.0 / 11.0).abs() < 1e-14);
    }

    #[test]
    fn split_rule_resolves_kinks() {
        let rule = SplitRule::new(64).unwrap();
        let e: f64 = rule.points(Some(0.0)).iter().map(|(x, w)| w * x.max(0.0)).sum();
        assert!((e - 1.0 / (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-13);
        let c = 0.7;
        let e: f64 = rule.points(Some(c)).iter().map(|(x, w)| w * (x - c).max(0.0)).sum();
        let phi = (-0.5 * c * c).exp() / (2.0 * std::f64::consts::PI).sqrt();
        assert!((e - (phi - c * (1.0 - normal_cdf(c)))).abs() < 1e-13);
    }

    use super::*;

    fn double_factorial(k: u32) -> f64 {
        (1..=k).rev().step_by(2).map(f64::from).product()
    }

    #[test]
    fn weights_sum_to_one_and_nodes_are_symmetric() {
        for n in [1, 2, 5, 20, 40, 41, 100, MAX_NODES] {
            let gh = GaussHermite::new(n).unwrap();
            let total: f64 = gh.weights().iter().sum();
            assert!((total - 1.0).abs() < 1e-12, "n={n} total={total}");
            for k in 0..n {
                assert!((gh.nodes()[k] + gh.nodes()[n - 1 - k]).abs() < 1e-12);
            }
            assert!(gh.nodes().windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn even_moments_are_exact() {
        let gh = GaussHermite::new(40).unwrap();
        for k in 1..=20u32 {
            let m = gh.expect(1.0, |x| x.powi(2 * k as i32));
            let exact = double_factorial(2 * k - 1);
            assert!((m / exact - 1.0).abs() < 1e-10, "k={k} m={m} exact={exact}");
        }
    }

    #[test]
    fn factor_2x2_reproduces_covariance() {
        let [l11, l21, l22] = factor_2x2(2.0, 0.6, 1.0).unwrap();
        assert!((l11 * l11 - 2.0).abs() < 1e-14);
        assert!((l11 * l21 - 0.6).abs() < 1e-14);
        assert!((l21 * l21 + l22 * l22 - 1.0).abs() < 1e-14);
    }

    #[test]
    fn factor_2x2_handles_singular_and_rejects_indefinite() {
        let [l11, l21, l22] = factor_2x2(1.0, 1.0, 1.0).unwrap();
        assert!((l11 - 1.0).abs() < 1e-9 && (l21 - 1.0).abs() < 1e-9 && l22 < 1e-5);
        let [l11, l21, l22] = factor_2x2(0.0, 0.0, 0.0).unwrap();
        assert!(l11 < 1e-5 && l21.abs() < 1e-5 && l22 < 1e-5);
        assert!(matches!(
            factor_2x2(1.0, 2.0, 1.0),
            Err(AmpError::InvalidCovariance { .. })
        ));
    }

    #[test]
    fn psd_factor_clamps_rank_deficient() {
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 2.0]);
        let l = psd_factor(&m).unwrap();
        let back = &l * l.transpose();
        assert!((back - m).abs().max() < 1e-9);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 3.0, 3.0, 1.0]);
        assert!(psd_factor(&bad).is_err());
    }

    #[test]
    fn normal_cdf_values() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-15);
        assert!((normal_cdf(1.959963984540054) - 0.975).abs() < 1e-11);
        assert!(GaussHermite::new(MAX_NODES + 1).is_err());
        assert!(GaussHermite::new(0).is_err());
    }
}
