//! Variance profiles `S` and correlation profiles `T`.
//!
//! A [`VarianceProfile`] is an immutable, cheaply clonable sparse
//! non-negative matrix together with its sparsity budget `k_n` and the
//! assumption constants it satisfies. Dense uniform profiles (`S = 1/n`) are
//! stored implicitly, so a profile at `n = 4000` costs nothing beyond its
//! header. Matrices built on top of a profile (`W`, `V`) store one value per
//! support entry, in the profile's row-major order.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AmpError, Result};

/// Constants of the variance-profile assumption: support size per row is at
/// most `c_card * k_n`, entries are at most `c_s_upper / k_n` and row sums are
/// at least `c_s_lower`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssumptionConstants {
    pub c_card: f64,
    pub c_s_upper: f64,
    pub c_s_lower: f64,
}

#[derive(Debug, Clone)]
enum Storage {
    /// Every position carries `value`, except the diagonal under `zero_diagonal`.
    Uniform { value: f64 },
    Sparse {
        row_ptr: Vec<usize>,
        cols: Vec<u32>,
        vals: Vec<f64>,
    },
}

#[derive(Debug)]
struct Inner {
    n: usize,
    k_n: usize,
    zero_diagonal: bool,
    storage: Storage,
    constants: AssumptionConstants,
    id: String,
}

/// Sparse non-negative variance profile.
#[derive(Debug, Clone)]
pub struct VarianceProfile {
    inner: Arc<Inner>,
}

/// Column indices of one profile row, in ascending order.
pub enum RowCols<'a> {
    Uniform {
        next: usize,
        end: usize,
        skip: Option<usize>,
    },
    Sparse(std::slice::Iter<'a, u32>),
}

impl Iterator for RowCols<'_> {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        match self {
            RowCols::Uniform { next, end, skip } => {
                if Some(*next) == *skip {
                    *next += 1;
                }
                if *next >= *end {
                    return None;
                }
                let j = *next;
                *next += 1;
                Some(j)
            }
            RowCols::Sparse(it) => it.next().map(|&j| j as usize),
        }
    }
}

impl VarianceProfile {
    /// Builds a profile from per-row `(column, value)` lists. Zero values are
    /// dropped, duplicates and negative values rejected.
    pub fn from_rows(
        n: usize,
        rows: Vec<Vec<(usize, f64)>>,
        k_n: usize,
        zero_diagonal: bool,
        id: impl Into<String>,
    ) -> Result<Self> {
        if n == 0 {
            return Err(AmpError::InvalidDimension("n must be positive".into()));
        }
        if rows.len() != n {
            return Err(AmpError::DimensionMismatch {
                what: "profile rows",
                expected: n,
                got: rows.len(),
            });
        }
        if k_n == 0 {
            return Err(AmpError::InvalidProfile("k_n must be positive".into()));
        }
        if n > u32::MAX as usize {
            return Err(AmpError::InvalidDimension(format!("n = {n} is too large")));
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for (i, mut row) in rows.into_iter().enumerate() {
            row.sort_by_key(|&(j, _)| j);
            let mut prev = None;
            for (j, v) in row {
                if j >= n {
                    return Err(AmpError::InvalidProfile(format!(
                        "column {j} out of range in row {i}"
                    )));
                }
                if !v.is_finite() || v < 0.0 {
                    return Err(AmpError::InvalidProfile(format!(
                        "entry ({i}, {j}) = {v} is not a non-negative number"
                    )));
                }
                if prev == Some(j) {
                    return Err(AmpError::InvalidProfile(format!(
                        "duplicate entry ({i}, {j})"
                    )));
                }
                prev = Some(j);
                if v == 0.0 {
                    continue;
                }
                if zero_diagonal && i == j {
                    return Err(AmpError::InvalidProfile(format!(
                        "diagonal entry ({i}, {i}) stored in a zero-diagonal profile"
                    )));
                }
                cols.push(j as u32);
                vals.push(v);
            }
            row_ptr.push(cols.len());
        }
        let storage = Storage::Sparse {
            row_ptr,
            cols,
            vals,
        };
        Ok(Self::assemble(n, k_n, zero_diagonal, storage, id.into()))
    }

    fn assemble(n: usize, k_n: usize, zero_diagonal: bool, storage: Storage, id: String) -> Self {
        let mut profile = Self {
            inner: Arc::new(Inner {
                n,
                k_n,
                zero_diagonal,
                storage,
                constants: AssumptionConstants {
                    c_card: 0.0,
                    c_s_upper: 0.0,
                    c_s_lower: 0.0,
                },
                id,
            }),
        };
        let constants = profile.tightest_constants();
        Arc::get_mut(&mut profile.inner)
            .expect("freshly built profile is uniquely owned")
            .constants = constants;
        profile
    }

    /// Same profile with user-declared assumption constants.
    pub fn with_constants(&self, constants: AssumptionConstants) -> Self {
        let inner = &self.inner;
        Self {
            inner: Arc::new(Inner {
                n: inner.n,
                k_n: inner.k_n,
                zero_diagonal: inner.zero_diagonal,
                storage: inner.storage.clone(),
                constants,
                id: inner.id.clone(),
            }),
        }
    }

    fn tightest_constants(&self) -> AssumptionConstants {
        let k = self.k_n() as f64;
        let mut max_support = 0usize;
        let mut max_entry = 0.0_f64;
        let mut min_row_sum = f64::INFINITY;
        for i in 0..self.n() {
            max_support = max_support.max(self.row_len(i));
            let mut sum = 0.0;
            for (_, v) in self.row(i) {
                max_entry = max_entry.max(v);
                sum += v;
            }
            min_row_sum = min_row_sum.min(sum);
        }
        AssumptionConstants {
            c_card: max_support as f64 / k,
            c_s_upper: max_entry * k,
            c_s_lower: min_row_sum,
        }
    }

    pub fn n(&self) -> usize {
        self.inner.n
    }

    pub fn k_n(&self) -> usize {
        self.inner.k_n
    }

    pub fn zero_diagonal(&self) -> bool {
        self.inner.zero_diagonal
    }

    pub fn id(&self) -> &str {
        &self.inner.id
    }

    pub fn constants(&self) -> AssumptionConstants {
        self.inner.constants
    }

    /// True when both handles share the same underlying storage.
    pub fn same_storage(&self, other: &VarianceProfile) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }

    pub fn is_uniform(&self) -> bool {
        matches!(self.inner.storage, Storage::Uniform { .. })
    }

    /// Number of stored (positive) entries.
    pub fn nnz(&self) -> usize {
        match &self.inner.storage {
            Storage::Uniform { .. } => self.n() * self.uniform_row_len(),
            Storage::Sparse { vals, .. } => vals.len(),
        }
    }

    fn uniform_row_len(&self) -> usize {
        if self.zero_diagonal() {
            self.n() - 1
        } else {
            self.n()
        }
    }

    /// Offset of row `i` in support-aligned value arrays.
    pub fn row_start(&self, i: usize) -> usize {
        match &self.inner.storage {
            Storage::Uniform { .. } => i * self.uniform_row_len(),
            Storage::Sparse { row_ptr, .. } => row_ptr[i],
        }
    }

    pub fn row_len(&self, i: usize) -> usize {
        match &self.inner.storage {
            Storage::Uniform { .. } => self.uniform_row_len(),
            Storage::Sparse { row_ptr, .. } => row_ptr[i + 1] - row_ptr[i],
        }
    }

    pub fn row_cols(&self, i: usize) -> RowCols<'_> {
        match &self.inner.storage {
            Storage::Uniform { .. } => RowCols::Uniform {
                next: 0,
                end: self.n(),
                skip: self.zero_diagonal().then_some(i),
            },
            Storage::Sparse { row_ptr, cols, .. } => {
                RowCols::Sparse(cols[row_ptr[i]..row_ptr[i + 1]].iter())
            }
        }
    }

    /// `(column, s_ij)` pairs of row `i`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let start = self.row_start(i);
        self.row_cols(i)
            .enumerate()
            .map(move |(k, j)| (j, self.value_at(start + k)))
    }

    /// Value of the `pos`-th stored entry.
    pub fn value_at(&self, pos: usize) -> f64 {
        match &self.inner.storage {
            Storage::Uniform { value } => *value,
            Storage::Sparse { vals, .. } => vals[pos],
        }
    }

    /// Position of `(i, j)` in support-aligned value arrays, if stored.
    pub fn position(&self, i: usize, j: usize) -> Option<usize> {
        match &self.inner.storage {
            Storage::Uniform { .. } => {
                if self.zero_diagonal() {
                    match j.cmp(&i) {
                        std::cmp::Ordering::Equal => None,
                        std::cmp::Ordering::Less => Some(i * (self.n() - 1) + j),
                        std::cmp::Ordering::Greater => Some(i * (self.n() - 1) + j - 1),
                    }
                } else {
                    Some(i * self.n() + j)
                }
            }
            Storage::Sparse { row_ptr, cols, .. } => {
                let row = &cols[row_ptr[i]..row_ptr[i + 1]];
                row.binary_search(&(j as u32)).ok().map(|k| row_ptr[i] + k)
            }
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.position(i, j).map_or(0.0, |p| self.value_at(p))
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n()).map(|i| self.row(i).map(|(_, v)| v).sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.n()];
        for i in 0..self.n() {
            for (j, v) in self.row(i) {
                sums[j] += v;
            }
        }
        sums
    }

    /// Row sum shared by every row, if all rows agree within `tol`.
    pub fn common_row_sum(&self, tol: f64) -> Option<f64> {
        let sums = self.row_sums();
        let first = *sums.first()?;
        sums.iter().all(|s| (s - first).abs() <= tol).then_some(first)
    }

    /// Sparse triplet text: a header line `n k_n zero_diagonal`, then one
    /// `row col value` line per stored entry (0-based indices).
    pub fn to_triplet_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{} {} {}", self.n(), self.k_n(), self.zero_diagonal()).unwrap();
        for i in 0..self.n() {
            for (j, v) in self.row(i) {
                writeln!(out, "{i} {j} {v}").unwrap();
            }
        }
        out
    }

    pub fn from_triplet_text(text: &str, id: impl Into<String>) -> Result<Self> {
        let (header, triplets) = parse_triplets(text)?;
        let mut rows = vec![Vec::new(); header.n];
        for (line, i, j, v) in triplets {
            if i >= header.n {
                return Err(AmpError::Parse {
                    line,
                    message: format!("row {i} out of range"),
                });
            }
            rows[i].push((j, v));
        }
        Self::from_rows(header.n, rows, header.k_n, header.zero_diagonal, id)
    }
}

/// Header of the sparse triplet format.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripletHeader {
    pub n: usize,
    pub k_n: usize,
    pub zero_diagonal: bool,
}

type Triplet = (usize, usize, usize, f64);

/// Parses the triplet format shared by profiles and sampled matrices.
pub fn parse_triplets(text: &str) -> Result<(TripletHeader, Vec<Triplet>)> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(k, l)| (k + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let (hline, h) = lines.next().ok_or(AmpError::Parse {
        line: 1,
        message: "missing header".into(),
    })?;
    let parts: Vec<&str> = h.split_whitespace().collect();
    let bad_header = || AmpError::Parse {
        line: hline,
        message: format!("expected `n k_n zero_diagonal`, found `{h}`"),
    };
    if parts.len() != 3 {
        return Err(bad_header());
    }
    let header = TripletHeader {
        n: parts[0].parse().map_err(|_| bad_header())?,
        k_n: parts[1].parse().map_err(|_| bad_header())?,
        zero_diagonal: parts[2].parse().map_err(|_| bad_header())?,
    };
    let mut triplets = Vec::new();
    for (line, l) in lines {
        let parts: Vec<&str> = l.split_whitespace().collect();
        let bad = || AmpError::Parse {
            line,
            message: format!("expected `row col value`, found `{l}`"),
        };
        if parts.len() != 3 {
            return Err(bad());
        }
        let i: usize = parts[0].parse().map_err(|_| bad())?;
        let j: usize = parts[1].parse().map_err(|_| bad())?;
        let v: f64 = parts[2].parse().map_err(|_| bad())?;
        triplets.push((line, i, j, v));
    }
    Ok((header, triplets))
}

/// `S = 1/n` everywhere (off the diagonal when `zero_diagonal`).
pub fn make_dense_profile(n: usize, zero_diagonal: bool) -> Result<VarianceProfile> {
    if n < 2 {
        return Err(AmpError::InvalidDimension(format!(
            "dense profile needs n >= 2, got {n}"
        )));
    }
    Ok(VarianceProfile::assemble(
        n,
        n,
        zero_diagonal,
        Storage::Uniform {
            value: 1.0 / n as f64,
        },
        format!("dense(n={n},zero_diagonal={zero_diagonal})"),
    ))
}

/// Two-block model: dense `S = 1/n` and `T` equal to `rho1` on the diagonal
/// blocks and `rho2` on the off-diagonal blocks.
pub fn make_block_profiles(
    n1: usize,
    n2: usize,
    rho1: f64,
    rho2: f64,
) -> Result<(VarianceProfile, CorrelationProfile)> {
    let n = n1 + n2;
    for (k, rho) in [(0, rho1), (1, rho2)] {
        if !(-1.0..=1.0).contains(&rho) {
            return Err(AmpError::InvalidCorrelation {
                i: k,
                j: k,
                value: rho,
            });
        }
    }
    let profile = make_dense_profile(n, false)?;
    let t = CorrelationProfile::blocks(
        vec![n1, n2],
        vec![vec![rho1, rho2], vec![rho2, rho1]],
    )?;
    Ok((profile, t))
}

/// `S = A/d` for the adjacency matrix `A` of a circulant `d`-regular graph
/// whose vertex labels are shuffled by `seed`.
pub fn make_dregular_profile(n: usize, d: usize, seed: u64) -> Result<VarianceProfile> {
    if d == 0 || d >= n {
        return Err(AmpError::InfeasibleDegree(format!(
            "degree {d} must satisfy 1 <= d <= n - 1 = {}",
            n.saturating_sub(1)
        )));
    }
    if (n * d) % 2 == 1 {
        return Err(AmpError::InfeasibleDegree(format!(
            "n * d = {} is odd",
            n * d
        )));
    }
    let mut labels: Vec<usize> = (0..n).collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let weight = 1.0 / d as f64;
    let mut rows = vec![Vec::with_capacity(d); n];
    for i in 0..n {
        let mut neighbours = Vec::with_capacity(d);
        for k in 1..=d / 2 {
            neighbours.push((i + k) % n);
            neighbours.push((i + n - k) % n);
        }
        if d % 2 == 1 {
            neighbours.push((i + n / 2) % n);
        }
        for j in neighbours {
            rows[labels[i]].push((labels[j], weight));
        }
    }
    VarianceProfile::from_rows(
        n,
        rows,
        d,
        true,
        format!("dregular(n={n},d={d},seed={seed})"),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<ValidationCheck>,
    /// `k_n / log^{max(nu, 1)}(n)`.
    pub sparsity_margin: f64,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&ValidationCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Checks the variance-profile and sparsity assumptions against the
/// profile's declared constants. Never fails; with `c = None` the sparsity
/// check only reports the margin.
pub fn validate_assumptions(profile: &VarianceProfile, nu: f64, c: Option<f64>) -> ValidationReport {
    let consts = profile.constants();
    let k = profile.k_n() as f64;
    let mut checks = Vec::new();

    let max_support = (0..profile.n()).map(|i| profile.row_len(i)).max().unwrap_or(0);
    checks.push(ValidationCheck {
        name: "row_support",
        passed: consts.c_card > 0.0 && max_support as f64 <= consts.c_card * k * (1.0 + 1e-12),
        detail: format!(
            "max row support {max_support} vs C_card * k_n = {}",
            consts.c_card * k
        ),
    });

    let max_entry = (0..profile.n())
        .flat_map(|i| profile.row(i).map(|(_, v)| v))
        .fold(0.0_f64, f64::max);
    checks.push(ValidationCheck {
        name: "entry_bound",
        passed: consts.c_s_upper > 0.0 && max_entry <= consts.c_s_upper / k * (1.0 + 1e-12),
        detail: format!(
            "max entry {max_entry} vs C_S / k_n = {}",
            consts.c_s_upper / k
        ),
    });

    let min_row_sum = profile
        .row_sums()
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    checks.push(ValidationCheck {
        name: "row_sum",
        passed: consts.c_s_lower > 0.0 && min_row_sum >= consts.c_s_lower * (1.0 - 1e-12),
        detail: format!("min row sum {min_row_sum} vs c_S = {}", consts.c_s_lower),
    });

    let n = profile.n() as f64;
    let log_term = n.ln().powf(nu.max(1.0));
    let sparsity_margin = k / log_term;
    if let Some(c) = c {
        // k_n is an integer budget: compare against the integer part of the bound.
        let bound = (c * log_term).floor();
        checks.push(ValidationCheck {
            name: "sparsity",
            passed: k >= bound,
            detail: format!(
                "k_n = {} vs floor(C log^{}(n)) = {bound}",
                profile.k_n(),
                nu.max(1.0)
            ),
        });
    }

    ValidationReport {
        checks,
        sparsity_margin,
    }
}

#[derive(Debug, Clone, PartialEq)]
enum CorrelationStorage {
    Constant(f64),
    Blocks {
        /// Block index of each coordinate.
        block_of: Vec<u32>,
        sizes: Vec<usize>,
        rho: Vec<Vec<f64>>,
    },
    /// Unordered pairs `(min, max)`; absent pairs are uncorrelated.
    Sparse(HashMap<(usize, usize), f64>),
}

/// Symmetric correlation profile `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationProfile {
    n: Option<usize>,
    storage: CorrelationStorage,
    id: String,
}

impl CorrelationProfile {
    /// `tau_ij = rho` for every pair; valid for any dimension.
    pub fn constant(rho: f64) -> Result<Self> {
        check_tau(0, 0, rho)?;
        Ok(Self {
            n: None,
            storage: CorrelationStorage::Constant(rho),
            id: format!("constant(rho={rho})"),
        })
    }

    /// Block-constant profile. `sizes[k]` coordinates belong to block `k`,
    /// consecutively; `rho` is a symmetric block matrix.
    pub fn blocks(sizes: Vec<usize>, rho: Vec<Vec<f64>>) -> Result<Self> {
        let k = sizes.len();
        if rho.len() != k || rho.iter().any(|r| r.len() != k) {
            return Err(AmpError::DimensionMismatch {
                what: "block correlation matrix",
                expected: k,
                got: rho.len(),
            });
        }
        for a in 0..k {
            for b in 0..k {
                check_tau(a, b, rho[a][b])?;
                if rho[a][b] != rho[b][a] {
                    return Err(AmpError::AsymmetricCorrelation {
                        i: a,
                        j: b,
                        a: rho[a][b],
                        b: rho[b][a],
                    });
                }
            }
        }
        let block_of = sizes
            .iter()
            .enumerate()
            .flat_map(|(b, &s)| std::iter::repeat_n(b as u32, s))
            .collect::<Vec<_>>();
        let id = format!("blocks(sizes={sizes:?},rho={rho:?})");
        Ok(Self {
            n: Some(block_of.len()),
            storage: CorrelationStorage::Blocks {
                block_of,
                sizes,
                rho,
            },
            id,
        })
    }

    /// From a dense row-major `n x n` matrix; asymmetric input is rejected.
    pub fn from_dense(n: usize, values: &[f64]) -> Result<Self> {
        if values.len() != n * n {
            return Err(AmpError::DimensionMismatch {
                what: "dense correlation matrix",
                expected: n * n,
                got: values.len(),
            });
        }
        let mut pairs = HashMap::new();
        for i in 0..n {
            for j in i..n {
                let a = values[i * n + j];
                let b = values[j * n + i];
                check_tau(i, j, a)?;
                check_tau(j, i, b)?;
                if a != b {
                    return Err(AmpError::AsymmetricCorrelation { i, j, a, b });
                }
                if a != 0.0 {
                    pairs.insert((i, j), a);
                }
            }
        }
        Ok(Self {
            n: Some(n),
            storage: CorrelationStorage::Sparse(pairs),
            id: format!("dense(n={n})"),
        })
    }

    /// From `(i, j, tau)` triplets. A pair given in both orientations must
    /// carry the same value.
    pub fn from_pairs(n: usize, pairs: impl IntoIterator<Item = (usize, usize, f64)>) -> Result<Self> {
        let mut map: HashMap<(usize, usize), f64> = HashMap::new();
        for (i, j, tau) in pairs {
            if i >= n || j >= n {
                return Err(AmpError::InvalidDimension(format!(
                    "pair ({i}, {j}) out of range for n = {n}"
                )));
            }
            check_tau(i, j, tau)?;
            let key = (i.min(j), i.max(j));
            if let Some(&prev) = map.get(&key) {
                if prev != tau {
                    return Err(AmpError::AsymmetricCorrelation {
                        i,
                        j,
                        a: prev,
                        b: tau,
                    });
                }
            }
            map.insert(key, tau);
        }
        Ok(Self {
            n: Some(n),
            storage: CorrelationStorage::Sparse(map),
            id: format!("pairs(n={n})"),
        })
    }

    /// Fixed dimension, or `None` for dimension-free constant profiles.
    pub fn n(&self) -> Option<usize> {
        self.n
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn check_dimension(&self, n: usize) -> Result<()> {
        match self.n {
            Some(m) if m != n => Err(AmpError::DimensionMismatch {
                what: "correlation profile",
                expected: n,
                got: m,
            }),
            _ => Ok(()),
        }
    }

    /// `tau_ij`. Symmetric by construction.
    pub fn tau(&self, i: usize, j: usize) -> f64 {
        match &self.storage {
            CorrelationStorage::Constant(rho) => *rho,
            CorrelationStorage::Blocks { block_of, rho, .. } => {
                rho[block_of[i] as usize][block_of[j] as usize]
            }
            CorrelationStorage::Sparse(map) => {
                map.get(&(i.min(j), i.max(j))).copied().unwrap_or(0.0)
            }
        }
    }

    /// Block sizes for block-constant profiles.
    pub fn block_sizes(&self) -> Option<&[usize]> {
        match &self.storage {
            CorrelationStorage::Blocks { sizes, .. } => Some(sizes),
            _ => None,
        }
    }

    /// Dense row-major copy, mostly for tests and dumps.
    pub fn to_dense(&self, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = self.tau(i, j);
            }
        }
        out
    }
}

fn check_tau(i: usize, j: usize, tau: f64) -> Result<()> {
    if !tau.is_finite() || !(-1.0..=1.0).contains(&tau) {
        return Err(AmpError::InvalidCorrelation { i, j, value: tau });
    }
    Ok(())
}
