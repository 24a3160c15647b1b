//! AMP iterations with the three Onsager corrections and the spiked
//! (non-centered) recursion.

use serde::{Deserialize, Serialize};

use crate::activations::Activation;
use crate::density_evolution::{into_string, DEState};
use crate::error::{AmpError, Result};
use crate::profiles::CorrelationProfile;
use crate::sampler::{compute_v, LinearOperator, ProfileMatrix, SampledMatrix, SpikedMatrix};

/// Iterates beyond this magnitude abort the run.
pub const DIVERGENCE_THRESHOLD: f64 = 1e12;

/// Source of the diagonal Onsager coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OnsagerVariant {
    /// `V E dh(Z^t)` from Density Evolution.
    #[serde(rename = "AMPZ", alias = "ampz")]
    Ampz,
    /// `(W (.) W^T) dh(x^t)`.
    #[serde(rename = "AMPW", alias = "ampw")]
    Ampw,
    /// `V dh(x^t)`.
    #[serde(rename = "AMP", alias = "amp")]
    Amp,
}

impl OnsagerVariant {
    pub const ALL: [OnsagerVariant; 3] = [Self::Ampz, Self::Ampw, Self::Amp];

    pub fn tag(self) -> &'static str {
        match self {
            Self::Ampz => "AMPZ",
            Self::Ampw => "AMPW",
            Self::Amp => "AMP",
        }
    }
}

/// Iterates `x^1..x^t` of one run with provenance.
#[derive(Debug, Clone)]
pub struct Trajectory {
    variant: String,
    x0: Vec<f64>,
    eta: Vec<f64>,
    beta: Vec<f64>,
    iterates: Vec<Vec<f64>>,
    /// Coefficients applied when forming `x^t`; zero at `t = 1`.
    onsager: Vec<Vec<f64>>,
    seed: u64,
    profile_id: String,
    matrix_id: String,
    config_hash: String,
}

impl Trajectory {
    pub fn variant(&self) -> &str {
        &self.variant
    }

    pub fn n(&self) -> usize {
        self.x0.len()
    }

    pub fn depth(&self) -> usize {
        self.iterates.len()
    }

    /// `x^t` for `1 <= t <= depth`.
    pub fn x(&self, t: usize) -> &[f64] {
        &self.iterates[t - 1]
    }

    pub fn iterates(&self) -> &[Vec<f64>] {
        &self.iterates
    }

    pub fn onsager(&self, t: usize) -> &[f64] {
        &self.onsager[t - 1]
    }

    pub fn x0(&self) -> &[f64] {
        &self.x0
    }

    pub fn eta(&self) -> &[f64] {
        &self.eta
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn profile_id(&self) -> &str {
        &self.profile_id
    }

    pub fn matrix_id(&self) -> &str {
        &self.matrix_id
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn with_beta(mut self, beta: Vec<f64>) -> Result<Self> {
        if beta.len() != self.n() {
            return Err(AmpError::DimensionMismatch {
                what: "beta",
                expected: self.n(),
                got: beta.len(),
            });
        }
        self.beta = beta;
        Ok(self)
    }

    pub fn with_config_hash(mut self, hash: impl Into<String>) -> Self {
        self.config_hash = hash.into();
        self
    }

    /// Reorders every per-index vector by `perm` (new index `k` takes old `perm[k]`).
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let take = |v: &[f64]| perm.iter().map(|&p| v[p]).collect::<Vec<f64>>();
        Self {
            variant: self.variant.clone(),
            x0: take(&self.x0),
            eta: take(&self.eta),
            beta: take(&self.beta),
            iterates: self.iterates.iter().map(|x| take(x)).collect(),
            onsager: self.onsager.iter().map(|x| take(x)).collect(),
            seed: self.seed,
            profile_id: self.profile_id.clone(),
            matrix_id: self.matrix_id.clone(),
            config_hash: self.config_hash.clone(),
        }
    }

    /// `(1/n) sum_i (x_i^t)^2`.
    pub fn second_moment(&self, t: usize) -> f64 {
        let x = self.x(t);
        x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
    }

    /// CSV with columns `i, t, x_value, seed, config_hash`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["i", "t", "x_value", "seed", "config_hash"])?;
        for (k, x) in self.iterates.iter().enumerate() {
            for (i, v) in x.iter().enumerate() {
                w.serialize((i, k + 1, v, self.seed, &self.config_hash))?;
            }
        }
        into_string(w)
    }

    /// CSV with columns `t, mean, second_moment, onsager_mean, seed, config_hash`.
    pub fn summary_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["t", "mean", "second_moment", "onsager_mean", "seed", "config_hash"])?;
        let n = self.n().max(1) as f64;
        for t in 1..=self.depth() {
            let mean = self.x(t).iter().sum::<f64>() / n;
            let ons = self.onsager(t).iter().sum::<f64>() / n;
            w.serialize((t, mean, self.second_moment(t), ons, self.seed, &self.config_hash))?;
        }
        into_string(w)
    }
}

/// Iterate or Density Evolution input for [`onsager_coefficients`].
#[derive(Debug, Clone, Copy)]
pub enum OnsagerInput<'a> {
    Iterate(&'a [f64]),
    DensityEvolution(&'a DEState),
}

/// Diagonal Onsager vector at step `t`.
///
/// `matrix` is `V` for AMPZ and AMP and `W (.) W^T` for AMPW.
pub fn onsager_coefficients(
    variant: OnsagerVariant,
    matrix: &ProfileMatrix,
    h: &Activation,
    input: OnsagerInput<'_>,
    eta: &[f64],
    t: usize,
) -> Result<Vec<f64>> {
    let n = matrix.n();
    if eta.len() != n {
        return Err(AmpError::DimensionMismatch {
            what: "eta",
            expected: n,
            got: eta.len(),
        });
    }
    let derivative = match (variant, input) {
        (OnsagerVariant::Ampz, OnsagerInput::DensityEvolution(de)) => {
            if de.n() != n {
                return Err(AmpError::DimensionMismatch {
                    what: "density evolution state",
                    expected: n,
                    got: de.n(),
                });
            }
            de.expected_derivative(t)?
        }
        (OnsagerVariant::Ampw | OnsagerVariant::Amp, OnsagerInput::Iterate(x)) => {
            if x.len() != n {
                return Err(AmpError::DimensionMismatch {
                    what: "iterate",
                    expected: n,
                    got: x.len(),
                });
            }
            x.iter()
                .enumerate()
                .map(|(i, &xi)| h.deriv(xi, eta[i], i, t))
                .collect()
        }
        (v, _) => {
            return Err(AmpError::Inconsistent(format!(
                "{} coefficients need {}",
                v.tag(),
                if v == OnsagerVariant::Ampz {
                    "a density evolution state"
                } else {
                    "the current iterate"
                }
            )))
        }
    };
    Ok(matrix.matvec(&derivative))
}

fn check_inputs(n: usize, x0: &[f64], eta: &[f64], t_max: usize) -> Result<()> {
    for (what, len) in [("x0", x0.len()), ("eta", eta.len())] {
        if len != n {
            return Err(AmpError::DimensionMismatch {
                what,
                expected: n,
                got: len,
            });
        }
    }
    if t_max == 0 {
        return Err(AmpError::Precondition("t_max must be at least 1".into()));
    }
    Ok(())
}

/// Checks that `de` was computed for this run.
fn check_de(de: &DEState, s_id: &str, h: &Activation, x0: &[f64], eta: &[f64], t_max: usize) -> Result<()> {
    let same = |a: &[f64], b: &[f64]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
    if de.depth() + 1 < t_max {
        return Err(AmpError::MissingDensityEvolution(format!(
            "depth {} does not cover {t_max} iterations",
            de.depth()
        )));
    }
    if de.profile_id() != s_id || de.activation() != h || !same(de.x0(), x0) || !same(de.eta(), eta) {
        return Err(AmpError::Inconsistent(
            "density evolution state was computed for a different (S, h, x0, eta)".into(),
        ));
    }
    Ok(())
}

/// Shared recursion `x^{t+1} = A h(x^t) - b^t * h(x^{t-1})`.
fn iterate<A, F>(
    a: &A,
    h: &Activation,
    x0: &[f64],
    eta: &[f64],
    t_max: usize,
    mut coefficients: F,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)>
where
    A: LinearOperator + ?Sized,
    F: FnMut(usize, &[f64]) -> Result<Vec<f64>>,
{
    let n = x0.len();
    let apply_h = |x: &[f64], t: usize| -> Vec<f64> {
        x.iter().enumerate().map(|(i, &v)| h.eval(v, eta[i], i, t)).collect()
    };
    let mut prev_h = apply_h(x0, 0);
    let mut iterates = vec![a.apply(&prev_h)];
    let mut onsager = vec![vec![0.0; n]];
    check_divergence(&iterates[0], 1)?;
    for t in 1..t_max {
        let x = &iterates[t - 1];
        let b = coefficients(t, x)?;
        let hx = apply_h(x, t);
        let mut next = a.apply(&hx);
        for ((y, bi), ph) in next.iter_mut().zip(&b).zip(&prev_h) {
            *y -= bi * ph;
        }
        check_divergence(&next, t + 1)?;
        iterates.push(next);
        onsager.push(b);
        prev_h = hx;
    }
    Ok((iterates, onsager))
}

fn check_divergence(x: &[f64], step: usize) -> Result<()> {
    let max_abs = x.iter().fold(0.0_f64, |m, v| if v.is_nan() { f64::INFINITY } else { m.max(v.abs()) });
    if max_abs > DIVERGENCE_THRESHOLD {
        return Err(AmpError::Divergence { step, max_abs });
    }
    Ok(())
}

/// Runs `t_max` iterations of the chosen variant on `M = W`.
#[allow(clippy::too_many_arguments)]
pub fn amp_run(
    m: &SampledMatrix,
    t: &CorrelationProfile,
    h: &Activation,
    x0: &[f64],
    eta: &[f64],
    variant: OnsagerVariant,
    t_max: usize,
    de: Option<&DEState>,
) -> Result<Trajectory> {
    let n = m.n();
    check_inputs(n, x0, eta, t_max)?;
    let s = m.profile();
    let (iterates, onsager) = match variant {
        OnsagerVariant::Ampz => {
            let v = compute_v(s, t)?;
            let de = de.ok_or_else(|| {
                AmpError::MissingDensityEvolution("the AMPZ variant needs a density evolution state".into())
            })?;
            check_de(de, s.id(), h, x0, eta, t_max)?;
            if de.mu().is_some() {
                return Err(AmpError::Inconsistent(
                    "centered AMPZ was given a non-centered density evolution state".into(),
                ));
            }
            iterate(m, h, x0, eta, t_max, |step, _| {
                onsager_coefficients(variant, &v, h, OnsagerInput::DensityEvolution(de), eta, step)
            })?
        }
        OnsagerVariant::Amp => {
            let v = compute_v(s, t)?;
            iterate(m, h, x0, eta, t_max, |step, x| {
                onsager_coefficients(variant, &v, h, OnsagerInput::Iterate(x), eta, step)
            })?
        }
        OnsagerVariant::Ampw => {
            let ww = m.w_hadamard_wt();
            iterate(m, h, x0, eta, t_max, |step, x| {
                onsager_coefficients(variant, ww, h, OnsagerInput::Iterate(x), eta, step)
            })?
        }
    };
    Ok(Trajectory {
        variant: variant.tag().to_string(),
        x0: x0.to_vec(),
        eta: eta.to_vec(),
        beta: vec![1.0; n],
        iterates,
        onsager,
        seed: m.seed(),
        profile_id: s.id().to_string(),
        matrix_id: matrix_id(m),
        config_hash: String::new(),
    })
}

fn matrix_id(m: &SampledMatrix) -> String {
    let dist = m.distribution().map_or("explicit", |d| d.name());
    format!("{}|{}|{}|seed={}", m.profile().id(), m.correlation_id(), dist, m.seed())
}

/// AMPZ on `A = lambda u v^T + W` with shifted Density Evolution.
pub fn amp_run_noncentered(
    a: &SpikedMatrix,
    t: &CorrelationProfile,
    h: &Activation,
    x0: &[f64],
    eta: &[f64],
    t_max: usize,
    de: &DEState,
) -> Result<Trajectory> {
    let base = a.base();
    let n = base.n();
    check_inputs(n, x0, eta, t_max)?;
    let s = base.profile();
    check_de(de, s.id(), h, x0, eta, t_max)?;
    let mu = de.mu().ok_or_else(|| {
        AmpError::MissingDensityEvolution("the spiked recursion needs a mean schedule".into())
    })?;
    if mu.len() + 1 < t_max {
        return Err(AmpError::Inconsistent(format!(
            "mean schedule has {} steps, {} are needed",
            mu.len(),
            t_max - 1
        )));
    }
    let (lambda, u, v) = de.spike().expect("non-centered state records its spike");
    let same = |x: &[f64], y: &[f64]| x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits());
    if lambda.to_bits() != a.lambda().to_bits() || !same(u, a.u()) || !same(v, a.v()) {
        return Err(AmpError::Inconsistent(
            "mean schedule was computed for a different (lambda, u, v)".into(),
        ));
    }
    let vm = compute_v(s, t)?;
    let (iterates, onsager) = iterate(a, h, x0, eta, t_max, |step, _| {
        onsager_coefficients(OnsagerVariant::Ampz, &vm, h, OnsagerInput::DensityEvolution(de), eta, step)
    })?;
    Ok(Trajectory {
        variant: "AMPZ-spiked".to_string(),
        x0: x0.to_vec(),
        eta: eta.to_vec(),
        beta: vec![1.0; n],
        iterates,
        onsager,
        seed: base.seed(),
        profile_id: s.id().to_string(),
        matrix_id: format!("{}|lambda={}", matrix_id(base), a.lambda()),
        config_hash: String::new(),
    })
}
