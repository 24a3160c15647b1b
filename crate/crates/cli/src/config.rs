//! Experiment configuration: TOML schema, validation and hashing.

use std::fmt;
use std::path::{Path, PathBuf};

use amplab::activations::{make_activation, Activation, ActivationSpec};
use amplab::profiles::{make_dense_profile, make_dregular_profile, CorrelationProfile, VarianceProfile};
use amplab::sampler::EntryDistribution;
use amplab::tree_oracle::{multi_indices, MarkedPolynomial, MAX_CHILDREN, MAX_DEPTH, MAX_MARKS, MAX_TYPES};
use amplab::verification::TestFunction;
use amplab::{GaussianExpectationConfig, OnsagerVariant};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Bumped whenever a CSV schema changes.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub n: Vec<usize>,
    #[serde(default)]
    pub seeds: Vec<u64>,
    pub t_max: usize,
    #[serde(default = "default_variants")]
    pub variants: Vec<OnsagerVariant>,
    #[serde(default = "default_distribution")]
    pub distribution: EntryDistribution,
    /// Relative paths resolve against the config file's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Also write every iterate, not only per-step summaries.
    #[serde(default)]
    pub write_iterates: bool,
    pub profile: ProfileSpec,
    #[serde(default)]
    pub correlation: CorrelationSpec,
    pub activation: ActivationSpec,
    #[serde(default = "one")]
    pub x0: VectorSpec,
    #[serde(default = "zero")]
    pub eta: VectorSpec,
    #[serde(default = "one")]
    pub beta: VectorSpec,
    #[serde(default)]
    pub engine: GaussianExpectationConfig,
    #[serde(default)]
    pub verify: VerifySpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spike: Option<SpikeSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tree_oracle: Option<TreeOracleSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lv: Option<LvSpec>,
}

fn default_variants() -> Vec<OnsagerVariant> {
    vec![OnsagerVariant::Ampz]
}

fn default_distribution() -> EntryDistribution {
    EntryDistribution::StandardGaussian
}

fn one() -> VectorSpec {
    VectorSpec::Constant(1.0)
}

fn zero() -> VectorSpec {
    VectorSpec::Constant(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ProfileSpec {
    Dense {
        #[serde(default)]
        zero_diagonal: bool,
    },
    DRegular {
        degree: usize,
        #[serde(default)]
        seed: u64,
    },
    /// Triplet text file.
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CorrelationSpec {
    Constant { rho: f64 },
    /// Blocks of sizes `fraction * n`; the last block absorbs rounding.
    Blocks { fractions: Vec<f64>, rho: Vec<Vec<f64>> },
}

impl Default for CorrelationSpec {
    fn default() -> Self {
        CorrelationSpec::Constant { rho: 0.0 }
    }
}

/// `{ constant = 1.0 }` or `{ file = "x0.txt" }` (one value per line).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum VectorSpec {
    Constant(f64),
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySpec {
    /// Defaults to `(x^t_max)^2`.
    #[serde(default)]
    pub phi: Vec<TestFunction>,
    #[serde(default = "default_mc")]
    pub mc_samples: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_mc() -> usize {
    100_000
}

impl Default for VerifySpec {
    fn default() -> Self {
        Self { phi: Vec::new(), mc_samples: default_mc(), seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpikeSpec {
    pub lambda: f64,
    #[serde(default = "one")]
    pub u: VectorSpec,
    /// Defaults to `1/n` in every coordinate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v: Option<VectorSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeOracleSpec {
    pub n: usize,
    #[serde(default = "one_usize")]
    pub marks: usize,
    pub degree: usize,
    pub depth: usize,
    /// One coefficient per multi-index in lexicographic order, shared by
    /// marks, types and steps.
    pub coefficients: Vec<f64>,
    #[serde(default)]
    pub rho: f64,
}

fn one_usize() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LvSpec {
    /// `A = scale * W`.
    pub scale: f64,
    #[serde(default = "default_lv_tol")]
    pub tol: f64,
    #[serde(default = "default_lv_iter")]
    pub max_iter: usize,
    #[serde(default = "default_relaxation")]
    pub relaxation: f64,
}

fn default_lv_tol() -> f64 {
    1e-10
}

fn default_lv_iter() -> usize {
    10_000
}

fn default_relaxation() -> f64 {
    amplab::lotka_volterra::DEFAULT_RELAXATION
}

/// Invalid configuration, located at a source line when possible.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub field: String,
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(line) => write!(f, "config error at line {line}: `{}`: {}", self.field, self.message),
            None => write!(f, "config error: `{}`: {}", self.field, self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

fn err(field: &str, message: impl fmt::Display) -> ConfigError {
    ConfigError { field: field.to_string(), line: None, message: message.to_string() }
}

/// 1-based line of `path` (`table.key` or `key`) in TOML source `text`.
pub fn locate(text: &str, path: &str) -> Option<usize> {
    let (table, key) = match path.rsplit_once('.') {
        Some((t, k)) => (Some(t), k),
        None => (None, path),
    };
    let key_of = |line: &str| {
        let l = line.trim_start();
        l.split_once('=').map(|(k, _)| k.trim().trim_matches('"').to_string())
    };
    let mut current: Option<String> = None;
    let mut table_line = None;
    for (k, line) in text.lines().enumerate() {
        let l = line.trim();
        if l.starts_with('[') {
            current = Some(l.trim_matches(|c| c == '[' || c == ']').trim().to_string());
            if current.as_deref() == table {
                table_line = Some(k + 1);
            }
            continue;
        }
        if current.as_deref() == table && key_of(l).as_deref() == Some(key) {
            return Some(k + 1);
        }
        // Inline table: `correlation = { kind = "constant", rho = 2.0 }`.
        if current.is_none() {
            if let Some(t) = table {
                if key_of(l).as_deref() == Some(t) {
                    return Some(k + 1);
                }
            }
        }
    }
    table_line
}

impl ExperimentConfig {
    /// Parses and validates; errors carry the offending line.
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let config: ExperimentConfig = toml::from_str(text).map_err(|e| ConfigError {
            field: "toml".into(),
            line: e.span().map(|s| text[..s.start].matches('\n').count() + 1),
            message: e.message().to_string(),
        })?;
        config.validate().map_err(|mut e| {
            e.line = locate(text, &e.field);
            e
        })?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment configs serialize")
    }

    /// SHA-256 of the canonical TOML with `seeds` and `out` removed, so
    /// per-seed outputs do not depend on which other seeds were requested.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.seeds.clear();
        c.out = None;
        hex::encode(Sha256::digest(c.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(err("name", "must be a non-empty file name"));
        }
        if self.n.is_empty() {
            return Err(err("n", "at least one dimension is required"));
        }
        if let Some(&bad) = self.n.iter().find(|&&n| n < 2) {
            return Err(err("n", format!("dimension {bad} is below 2")));
        }
        // TOML integers are signed 64-bit.
        let max_seed = i64::MAX as u64;
        if self.seeds.iter().any(|&s| s > max_seed) {
            return Err(err("seeds", format!("seeds must not exceed {max_seed}")));
        }
        if self.engine.seed > max_seed || self.verify.seed > max_seed {
            return Err(err("seed", format!("seeds must not exceed {max_seed}")));
        }
        if self.t_max == 0 {
            return Err(err("t_max", "must be at least 1"));
        }
        if self.variants.is_empty() {
            return Err(err("variants", "at least one Onsager variant is required"));
        }
        match &self.profile {
            ProfileSpec::Dense { .. } | ProfileSpec::File { .. } => {}
            ProfileSpec::DRegular { degree, seed } => {
                for &n in &self.n {
                    make_dregular_profile(n, *degree, *seed).map_err(|e| err("profile.degree", e))?;
                }
            }
        }
        match &self.correlation {
            CorrelationSpec::Constant { rho } => {
                CorrelationProfile::constant(*rho).map_err(|e| err("correlation.rho", e))?;
                self.distribution.check_correlation(*rho).map_err(|e| err("correlation.rho", e))?;
            }
            CorrelationSpec::Blocks { fractions, rho } => {
                let total: f64 = fractions.iter().sum();
                if fractions.iter().any(|f| !(*f > 0.0)) || (total - 1.0).abs() > 1e-9 {
                    return Err(err("correlation.fractions", "fractions must be positive and sum to 1"));
                }
                for n in &self.n {
                    self.correlation_profile(*n).map_err(|e| err("correlation.rho", e))?;
                }
                for v in rho.iter().flatten() {
                    self.distribution.check_correlation(*v).map_err(|e| err("correlation.rho", e))?;
                }
            }
        }
        make_activation(&self.activation).map_err(|e| err("activation.family", e))?;
        self.engine.validate().map_err(|e| err("engine", e))?;
        for phi in &self.verify.phi {
            phi.validate().map_err(|e| err("verify.phi", e))?;
            if phi.arity() > self.t_max {
                return Err(err("verify.phi", format!("`{}` reads beyond t_max = {}", phi.tag(), self.t_max)));
            }
        }
        if self.verify.mc_samples < 100 {
            return Err(err("verify.mc_samples", "must be at least 100"));
        }
        if let Some(spike) = &self.spike {
            if !spike.lambda.is_finite() {
                return Err(err("spike.lambda", "must be finite"));
            }
            if self.variants != [OnsagerVariant::Ampz] {
                return Err(err("variants", "a spiked experiment runs the AMPZ variant only"));
            }
        }
        if let Some(tree) = &self.tree_oracle {
            if tree.n < 2 || tree.n > MAX_TYPES {
                return Err(err("tree_oracle.n", format!("must lie in 2..={MAX_TYPES}")));
            }
            if tree.marks == 0 || tree.marks > MAX_MARKS {
                return Err(err("tree_oracle.marks", format!("must lie in 1..={MAX_MARKS}")));
            }
            if tree.degree > MAX_CHILDREN {
                return Err(err("tree_oracle.degree", format!("must be at most {MAX_CHILDREN}")));
            }
            if tree.depth == 0 || tree.depth > MAX_DEPTH {
                return Err(err("tree_oracle.depth", format!("must lie in 1..={MAX_DEPTH}")));
            }
            let expected = multi_indices(tree.marks, tree.degree).len();
            if tree.coefficients.len() != expected {
                return Err(err(
                    "tree_oracle.coefficients",
                    format!("expected {expected} coefficients, got {}", tree.coefficients.len()),
                ));
            }
            CorrelationProfile::constant(tree.rho).map_err(|e| err("tree_oracle.rho", e))?;
        }
        if let Some(lv) = &self.lv {
            if !lv.scale.is_finite() {
                return Err(err("lv.scale", "must be finite"));
            }
            if !(lv.tol > 0.0) {
                return Err(err("lv.tol", "must be positive"));
            }
            if !(lv.relaxation > 0.0 && lv.relaxation <= 1.0) {
                return Err(err("lv.relaxation", "must lie in (0, 1]"));
            }
        }
        Ok(())
    }

    pub fn variance_profile(&self, n: usize, base: &Path) -> amplab::Result<VarianceProfile> {
        match &self.profile {
            ProfileSpec::Dense { zero_diagonal } => make_dense_profile(n, *zero_diagonal),
            ProfileSpec::DRegular { degree, seed } => make_dregular_profile(n, *degree, *seed),
            ProfileSpec::File { path } => {
                let text = std::fs::read_to_string(base.join(path))?;
                let p = VarianceProfile::from_triplet_text(&text, path.display().to_string())?;
                if p.n() != n {
                    return Err(amplab::AmpError::DimensionMismatch { what: "profile file", expected: n, got: p.n() });
                }
                Ok(p)
            }
        }
    }

    pub fn correlation_profile(&self, n: usize) -> amplab::Result<CorrelationProfile> {
        match &self.correlation {
            CorrelationSpec::Constant { rho } => CorrelationProfile::constant(*rho),
            CorrelationSpec::Blocks { fractions, rho } => {
                let mut sizes: Vec<usize> = fractions.iter().map(|f| (f * n as f64).round() as usize).collect();
                let head: usize = sizes[..sizes.len() - 1].iter().sum();
                let last = sizes.last_mut().expect("non-empty fractions");
                *last = n.checked_sub(head).ok_or_else(|| {
                    amplab::AmpError::InvalidDimension(format!("block fractions do not fit n = {n}"))
                })?;
                CorrelationProfile::blocks(sizes, rho.clone())
            }
        }
    }

    pub fn activation(&self) -> Activation {
        make_activation(&self.activation).expect("validated activation")
    }

    pub fn test_functions(&self) -> Vec<TestFunction> {
        if self.verify.phi.is_empty() {
            vec![TestFunction::CoordinatePower { coord: self.t_max, power: 2 }]
        } else {
            self.verify.phi.clone()
        }
    }

    pub fn tree_polynomial(&self) -> Option<MarkedPolynomial> {
        self.tree_oracle.as_ref().map(|t| {
            let multi = multi_indices(t.marks, t.degree);
            MarkedPolynomial::from_fn(t.marks, t.degree, 1, 1, |_, _, _, iota| {
                t.coefficients[multi.iter().position(|m| m == iota).expect("multi-index")]
            })
            .expect("validated coefficients")
        })
    }
}

impl VectorSpec {
    pub fn resolve(&self, n: usize, base: &Path, field: &str) -> Result<Vec<f64>, ConfigError> {
        match self {
            VectorSpec::Constant(v) => Ok(vec![*v; n]),
            VectorSpec::File(path) => {
                let text = std::fs::read_to_string(base.join(path))
                    .map_err(|e| err(field, format!("{}: {e}", path.display())))?;
                let values: Vec<f64> = text
                    .lines()
                    .map(str::trim)
                    .filter(|l| !l.is_empty() && !l.starts_with('#'))
                    .map(|l| l.parse::<f64>().map_err(|e| err(field, format!("`{l}`: {e}"))))
                    .collect::<Result<_, _>>()?;
                if values.len() != n {
                    return Err(err(field, format!("file has {} values, n = {n}", values.len())));
                }
                Ok(values)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const MINIMAL: &str = r#"
name = "smoke"
n = [100]
seeds = [0]
t_max = 3

[profile]
family = "dense"

[activation]
family = "identity"
"#;

    #[test]
    fn minimal_config_parses() {
        let c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.variants, vec![OnsagerVariant::Ampz]);
        assert_eq!(c.correlation, CorrelationSpec::Constant { rho: 0.0 });
        assert_eq!(c.x0, VectorSpec::Constant(1.0));
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn bad_correlation_names_field_and_line() {
        let text = format!("{MINIMAL}\n[correlation]\nkind = \"constant\"\nrho = 2.0\n");
        let e = ExperimentConfig::from_toml(&text).unwrap_err();
        assert_eq!(e.field, "correlation.rho");
        assert_eq!(e.line, Some(text.lines().position(|l| l.starts_with("rho")).unwrap() + 1));
        assert!(e.to_string().contains("correlation.rho"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = MINIMAL.replace("t_max = 3", "t_max = 3\nt_mx = 4");
        let e = ExperimentConfig::from_toml(&text).unwrap_err();
        assert!(e.message.contains("t_mx"), "{e}");
        assert_eq!(e.line, Some(6));
    }

    #[test]
    fn hash_ignores_seeds_and_output() {
        let a = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let mut b = a.clone();
        b.seeds = vec![4, 5];
        b.out = Some("elsewhere".into());
        assert_eq!(a.config_hash(), b.config_hash());
        b.t_max = 2;
        assert_ne!(a.config_hash(), b.config_hash());
        assert_eq!(a.config_hash().len(), 64);
    }

    #[test]
    fn block_sizes_cover_n() {
        let mut c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        c.correlation = CorrelationSpec::Blocks { fractions: vec![0.3, 0.7], rho: vec![vec![0.5, -0.2], vec![-0.2, 0.1]] };
        c.validate().unwrap();
        let t = c.correlation_profile(101).unwrap();
        assert_eq!(t.block_sizes().unwrap(), &[30, 71]);
    }

    proptest! {
        #[test]
        fn configs_round_trip(
            rho in -1.0f64..1.0,
            t_max in 1usize..6,
            ns in proptest::collection::vec(2usize..5000, 1..4),
            seeds in proptest::collection::vec(0..=i64::MAX as u64, 0..4),
            x0 in -10.0f64..10.0,
            lambda in proptest::option::of(-3.0f64..3.0),
        ) {
            let mut c = ExperimentConfig::from_toml(MINIMAL).unwrap();
            c.correlation = CorrelationSpec::Constant { rho };
            c.t_max = t_max;
            c.n = ns;
            c.seeds = seeds;
            c.x0 = VectorSpec::Constant(x0);
            c.spike = lambda.map(|lambda| SpikeSpec { lambda, u: VectorSpec::Constant(1.0), v: None });
            c.verify.phi = vec![TestFunction::CoordinatePower { coord: 1, power: 2 }];
            let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
            prop_assert_eq!(back, c);
        }
    }
}
