//! Activation functions `h(x, eta, t)` with almost-everywhere derivatives,
//! per-index polynomial families and Gaussian-measure polynomial projection.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{AmpError, Result};
use crate::gaussian::GaussHermite;

/// How the parameter `eta` enters a builtin activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EtaMode {
    /// `h(x, eta, t) = h0(x)`.
    #[default]
    Ignore,
    /// `h(x, eta, t) = h0(x + eta)`.
    Shift,
    /// `h(x, eta, t) = eta * h0(x)`.
    Scale,
}

/// Polynomials `p(u, i, t) = sum_l alpha_l(i, t) u^l` for `l = 0..=degree`.
///
/// A family with one index is shared by all coordinates. Steps past the last
/// stored one reuse the last coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct PolynomialFamily {
    degree: usize,
    indices: usize,
    steps: usize,
    coeffs: Vec<f64>,
}

#[derive(Debug, Deserialize, Serialize)]
struct CoefficientRow {
    i: usize,
    t: usize,
    l: usize,
    alpha: f64,
}

impl PolynomialFamily {
    /// `coeffs` is laid out as `[(i * steps + t) * (degree + 1) + l]`.
    pub fn new(degree: usize, indices: usize, steps: usize, coeffs: Vec<f64>) -> Result<Self> {
        if indices == 0 || steps == 0 {
            return Err(AmpError::InvalidActivation(
                "polynomial family needs at least one index and one step".into(),
            ));
        }
        let expected = indices * steps * (degree + 1);
        if coeffs.len() != expected {
            return Err(AmpError::DimensionMismatch {
                what: "polynomial coefficients",
                expected,
                got: coeffs.len(),
            });
        }
        if let Some(bad) = coeffs.iter().find(|c| !c.is_finite()) {
            return Err(AmpError::InvalidActivation(format!(
                "non-finite coefficient {bad}"
            )));
        }
        Ok(Self {
            degree,
            indices,
            steps,
            coeffs,
        })
    }

    /// One polynomial `alpha_0 + alpha_1 u + ...` shared by every index and step.
    pub fn uniform(alphas: &[f64]) -> Result<Self> {
        if alphas.is_empty() {
            return Err(AmpError::EmptyInput("polynomial coefficients"));
        }
        Self::new(alphas.len() - 1, 1, 1, alphas.to_vec())
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn indices(&self) -> usize {
        self.indices
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn is_index_dependent(&self) -> bool {
        self.indices > 1
    }

    /// Uniform bound `max |alpha_l(i, t)|`.
    pub fn bound(&self) -> f64 {
        self.coeffs.iter().fold(0.0_f64, |m, c| m.max(c.abs()))
    }

    pub fn has_constant_term(&self) -> bool {
        self.coeffs
            .chunks(self.degree + 1)
            .any(|c| c[0] != 0.0)
    }

    /// Coefficients `alpha_0..=alpha_d` at `(i, t)`.
    pub fn coefficients(&self, i: usize, t: usize) -> &[f64] {
        let i = if self.indices == 1 { 0 } else { i };
        let t = t.min(self.steps - 1);
        let start = (i * self.steps + t) * (self.degree + 1);
        &self.coeffs[start..start + self.degree + 1]
    }

    pub fn eval(&self, u: f64, i: usize, t: usize) -> f64 {
        self.coefficients(i, t)
            .iter()
            .rev()
            .fold(0.0, |acc, &a| acc * u + a)
    }

    pub fn deriv(&self, u: f64, i: usize, t: usize) -> f64 {
        let c = self.coefficients(i, t);
        (1..c.len())
            .rev()
            .fold(0.0, |acc, l| acc * u + l as f64 * c[l])
    }

    /// Parses `i,t,l,alpha` rows; the shape is the smallest one holding every
    /// row and absent coefficients are zero.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let mut rows = Vec::new();
        for (k, row) in reader.deserialize::<CoefficientRow>().enumerate() {
            let row = row.map_err(|e| AmpError::Parse {
                line: k + 2,
                message: e.to_string(),
            })?;
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(AmpError::EmptyInput("polynomial coefficient file"));
        }
        let indices = rows.iter().map(|r| r.i).max().unwrap() + 1;
        let steps = rows.iter().map(|r| r.t).max().unwrap() + 1;
        let degree = rows.iter().map(|r| r.l).max().unwrap();
        let mut coeffs = vec![0.0; indices * steps * (degree + 1)];
        for r in rows {
            coeffs[(r.i * steps + r.t) * (degree + 1) + r.l] = r.alpha;
        }
        Self::new(degree, indices, steps, coeffs)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut writer = csv::Writer::from_writer(Vec::new());
        for i in 0..self.indices {
            for t in 0..self.steps {
                for (l, &alpha) in self.coefficients(i, t).iter().enumerate() {
                    writer.serialize(CoefficientRow { i, t, l, alpha })?;
                }
            }
        }
        let bytes = writer
            .into_inner()
            .map_err(|e| AmpError::Io(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Kind {
    Identity,
    PositivePart,
    Tanh,
    Polynomial(Arc<PolynomialFamily>),
}

/// `h(x, eta, t)` with its almost-everywhere derivative in `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct Activation {
    kind: Kind,
    eta_mode: EtaMode,
}

impl Activation {
    pub fn identity() -> Self {
        Self {
            kind: Kind::Identity,
            eta_mode: EtaMode::Ignore,
        }
    }

    pub fn positive_part() -> Self {
        Self {
            kind: Kind::PositivePart,
            eta_mode: EtaMode::Ignore,
        }
    }

    pub fn tanh() -> Self {
        Self {
            kind: Kind::Tanh,
            eta_mode: EtaMode::Ignore,
        }
    }

    pub fn polynomial(family: PolynomialFamily) -> Self {
        Self {
            kind: Kind::Polynomial(Arc::new(family)),
            eta_mode: EtaMode::Ignore,
        }
    }

    pub fn with_eta_mode(mut self, eta_mode: EtaMode) -> Self {
        self.eta_mode = eta_mode;
        self
    }

    pub fn eta_mode(&self) -> EtaMode {
        self.eta_mode
    }

    pub fn tag(&self) -> String {
        let base = match &self.kind {
            Kind::Identity => "identity".to_string(),
            Kind::PositivePart => "positive-part".to_string(),
            Kind::Tanh => "tanh".to_string(),
            Kind::Polynomial(p) => format!("polynomial(d={})", p.degree()),
        };
        match self.eta_mode {
            EtaMode::Ignore => base,
            EtaMode::Shift => format!("{base}[x+eta]"),
            EtaMode::Scale => format!("{base}[eta*h]"),
        }
    }

    pub fn polynomial_family(&self) -> Option<&PolynomialFamily> {
        match &self.kind {
            Kind::Polynomial(p) => Some(p),
            _ => None,
        }
    }

    /// True when `h` depends on the coordinate index beyond `eta`.
    pub fn is_index_dependent(&self) -> bool {
        matches!(&self.kind, Kind::Polynomial(p) if p.is_index_dependent())
    }

    fn base(&self, x: f64, i: usize, t: usize) -> f64 {
        match &self.kind {
            Kind::Identity => x,
            Kind::PositivePart => x.max(0.0),
            Kind::Tanh => x.tanh(),
            Kind::Polynomial(p) => p.eval(x, i, t),
        }
    }

    fn base_deriv(&self, x: f64, i: usize, t: usize) -> f64 {
        match &self.kind {
            Kind::Identity => 1.0,
            // Derivative at the kink is taken to be 0.
            Kind::PositivePart => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Kind::Tanh => {
                let c = x.cosh();
                1.0 / (c * c)
            }
            Kind::Polynomial(p) => p.deriv(x, i, t),
        }
    }

    /// `h(x, eta, t)` at coordinate `i`.
    pub fn eval(&self, x: f64, eta: f64, i: usize, t: usize) -> f64 {
        match self.eta_mode {
            EtaMode::Ignore => self.base(x, i, t),
            EtaMode::Shift => self.base(x + eta, i, t),
            EtaMode::Scale => eta * self.base(x, i, t),
        }
    }

    /// `dh/dx (x, eta, t)` at coordinate `i`.
    pub fn deriv(&self, x: f64, eta: f64, i: usize, t: usize) -> f64 {
        match self.eta_mode {
            EtaMode::Ignore => self.base_deriv(x, i, t),
            EtaMode::Shift => self.base_deriv(x + eta, i, t),
            EtaMode::Scale => eta * self.base_deriv(x, i, t),
        }
    }

    /// Point where `x -> h(x, eta, t)` fails to be smooth, if any.
    pub fn kink(&self, eta: f64) -> Option<f64> {
        match (&self.kind, self.eta_mode) {
            (Kind::PositivePart, EtaMode::Shift) => Some(-eta),
            (Kind::PositivePart, _) => Some(0.0),
            _ => None,
        }
    }

    /// Lipschitz constant in `x` at parameter `eta`, `None` if unbounded.
    pub fn lipschitz_bound(&self, eta: f64) -> Option<f64> {
        let base = match &self.kind {
            Kind::Identity | Kind::PositivePart | Kind::Tanh => 1.0,
            Kind::Polynomial(p) if p.degree() <= 1 => {
                if p.degree() == 0 {
                    0.0
                } else {
                    p.coeffs.chunks(2).fold(0.0_f64, |m, c| m.max(c[1].abs()))
                }
            }
            Kind::Polynomial(_) => return None,
        };
        Some(match self.eta_mode {
            EtaMode::Scale => base * eta.abs(),
            _ => base,
        })
    }
}

/// Config-level description of an activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActivationSpec {
    /// `identity`, `positive-part`, `tanh` or `polynomial`.
    pub family: String,
    /// `alpha_0..=alpha_d` for `polynomial`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub coefficients: Vec<f64>,
    #[serde(default)]
    pub eta: EtaMode,
}

impl ActivationSpec {
    pub fn named(family: &str) -> Self {
        Self {
            family: family.to_string(),
            coefficients: Vec::new(),
            eta: EtaMode::Ignore,
        }
    }
}

pub fn make_activation(spec: &ActivationSpec) -> Result<Activation> {
    let base = match spec.family.as_str() {
        "identity" => Activation::identity(),
        "positive-part" => Activation::positive_part(),
        "tanh" => Activation::tanh(),
        "polynomial" => Activation::polynomial(PolynomialFamily::uniform(&spec.coefficients)?),
        other => return Err(AmpError::UnknownActivation(other.to_string())),
    };
    if spec.family != "polynomial" && !spec.coefficients.is_empty() {
        return Err(AmpError::InvalidActivation(format!(
            "`{}` takes no coefficients",
            spec.family
        )));
    }
    Ok(base.with_eta_mode(spec.eta))
}

/// Result of [`hermite_project`].
#[derive(Debug, Clone, PartialEq)]
pub struct HermiteProjection {
    /// Single-index, single-step polynomial in `x`.
    pub polynomial: PolynomialFamily,
    /// `E (h - g)^2` under `N(0, sigma_max^2)`.
    pub l2_error: f64,
    /// `max |E h'(sigma xi) - E g'(sigma xi)|` over a grid of `[sigma_min, sigma_max]`.
    pub derivative_error: f64,
}

/// Least-squares polynomial of degree `degree` for `x -> h(x, eta, 0)` under
/// `N(0, sigma_max^2)`, computed with `quad_nodes` Gauss-Hermite nodes.
pub fn hermite_project(
    h: &Activation,
    degree: usize,
    sigma_range: (f64, f64),
    eta: f64,
    quad_nodes: usize,
) -> Result<HermiteProjection> {
    let (sigma_min, sigma_max) = sigma_range;
    if !(sigma_min > 0.0 && sigma_min <= sigma_max && sigma_max.is_finite()) {
        return Err(AmpError::Precondition(format!(
            "sigma range [{sigma_min}, {sigma_max}] must satisfy 0 < min <= max"
        )));
    }
    if quad_nodes < degree + 1 {
        return Err(AmpError::InvalidQuadrature(format!(
            "{quad_nodes} nodes cannot resolve degree {degree}"
        )));
    }
    let gh = GaussHermite::new(quad_nodes)?;
    let f = |x: f64| h.eval(x, eta, 0, 0);

    // He_k(y) in the monomial basis, normalized by sqrt(k!).
    let mut he: Vec<Vec<f64>> = vec![vec![1.0]];
    if degree >= 1 {
        he.push(vec![0.0, 1.0]);
    }
    for k in 1..degree {
        let mut next = vec![0.0; k + 2];
        for (m, &c) in he[k].iter().enumerate() {
            next[m + 1] += c;
        }
        for (m, &c) in he[k - 1].iter().enumerate() {
            next[m] -= k as f64 * c;
        }
        he.push(next);
    }
    let mut factorial = 1.0;
    for (k, poly) in he.iter_mut().enumerate() {
        if k > 0 {
            factorial *= k as f64;
        }
        let norm = factorial.sqrt();
        poly.iter_mut().for_each(|c| *c /= norm);
    }
    let eval_he = |k: usize, y: f64| he[k].iter().rev().fold(0.0, |acc, &c| acc * y + c);

    let proj: Vec<f64> = (0..=degree)
        .map(|k| {
            gh.nodes()
                .iter()
                .zip(gh.weights())
                .map(|(&y, &w)| w * f(sigma_max * y) * eval_he(k, y))
                .sum()
        })
        .collect();

    let mut alphas = vec![0.0; degree + 1];
    for (k, &c) in proj.iter().enumerate() {
        for (m, &a) in he[k].iter().enumerate() {
            alphas[m] += c * a / sigma_max.powi(m as i32);
        }
    }
    let polynomial = PolynomialFamily::uniform(&alphas)?;

    // Errors are measured with a fine composite rule so that kinks in `h`
    // do not bias the report.
    let l2_error = gaussian_simpson(sigma_max, |x| {
        let r = f(x) - polynomial.eval(x, 0, 0);
        r * r
    });

    let grid = 16;
    let derivative_error = (0..=grid)
        .map(|k| sigma_min + (sigma_max - sigma_min) * k as f64 / grid as f64)
        .map(|sigma| {
            gaussian_simpson(sigma, |x| h.deriv(x, eta, 0, 0) - polynomial.deriv(x, 0, 0)).abs()
        })
        .fold(0.0_f64, f64::max);

    Ok(HermiteProjection {
        polynomial,
        l2_error,
        derivative_error,
    })
}

/// `E f(sigma xi)` by composite Simpson on `xi in [-12, 12]`.
fn gaussian_simpson<F: Fn(f64) -> f64>(sigma: f64, f: F) -> f64 {
    let panels = 24_000;
    let (a, b) = (-12.0, 12.0);
    let step = (b - a) / panels as f64;
    let norm = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
    let g = |xi: f64| norm * (-0.5 * xi * xi).exp() * f(sigma * xi);
    let mut sum = g(a) + g(b);
    for k in 1..panels {
        let xi = a + k as f64 * step;
        sum += if k % 2 == 1 { 4.0 } else { 2.0 } * g(xi);
    }
    sum * step / 3.0
}

/// Numerical non-degeneracy quantities of an activation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NonDegeneracy {
    /// `min h(x0_i, eta_i, 0)^2` over the supplied initial points.
    pub initial_floor: f64,
    /// `min over eta of int_{-D}^{D} h(x, eta, t)^2 dx` for each requested step, minimized.
    pub integral_floor: f64,
}

/// Evaluates the non-degeneracy condition on the supplied `x0`, `eta` values
/// for steps `1..=t_max`, integrating over `[-d, d]` by composite Simpson.
pub fn check_nondegeneracy(
    h: &Activation,
    x0: &[f64],
    eta: &[f64],
    t_max: usize,
    d: f64,
) -> Result<NonDegeneracy> {
    if x0.is_empty() || eta.is_empty() {
        return Err(AmpError::EmptyInput("initial points or parameters"));
    }
    let initial_floor = x0
        .iter()
        .zip(eta.iter().cycle())
        .enumerate()
        .map(|(i, (&x, &e))| h.eval(x, e, i, 0).powi(2))
        .fold(f64::INFINITY, f64::min);
    let panels = 2000;
    let step = 2.0 * d / panels as f64;
    let mut integral_floor = f64::INFINITY;
    for t in 1..=t_max.max(1) {
        for (i, &e) in eta.iter().enumerate() {
            let g = |x: f64| h.eval(x, e, i, t).powi(2);
            let mut sum = g(-d) + g(d);
            for k in 1..panels {
                let x = -d + k as f64 * step;
                sum += if k % 2 == 1 { 4.0 } else { 2.0 } * g(x);
            }
            integral_floor = integral_floor.min(sum * step / 3.0);
        }
    }
    Ok(NonDegeneracy {
        initial_floor,
        integral_floor,
    })
}
