//! Exact small-n machinery for non-backtracking iterations: labeled tree
//! enumeration, tree weights, the `z` and fresh-matrix `y` recursions and the
//! tree-sum identity.
//!
//! Types and marks are 0-based. A leaf is maximal when its depth equals the
//! requested `t`; only maximal leaves carry non-zero exponents.

use std::collections::HashMap;
use std::rc::Rc;

use crate::activations::{Activation, PolynomialFamily};
use crate::amp::{amp_run, OnsagerVariant, Trajectory};
use crate::error::{AmpError, Result};
use crate::profiles::CorrelationProfile;
use crate::sampler::SampledMatrix;

pub const MAX_TYPES: usize = 6;
pub const MAX_DEPTH: usize = 3;
pub const MAX_CHILDREN: usize = 3;
pub const MAX_MARKS: usize = 2;
/// Largest tree count visited by [`verify_tree_identity`].
pub const TREE_COUNT_CAP: f64 = 1e6;
/// Largest tree count materialized by [`enumerate_nb_trees`].
pub const TREE_LIST_CAP: f64 = 1e5;

/// Multi-indices `iota` in `N^q` with `|iota| <= d`, in lexicographic order.
pub fn multi_indices(q: usize, d: usize) -> Vec<Vec<u32>> {
    fn rec(q: usize, left: u32, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if prefix.len() == q {
            out.push(prefix.clone());
            return;
        }
        for a in 0..=left {
            prefix.push(a);
            rec(q, left - a, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(q, d as u32, &mut Vec::with_capacity(q), &mut out);
    out
}

/// `f_r(z, l, s) = sum_iota alpha_iota(r, l, s) prod_m z_m^{iota_m}` for `z` in `R^q`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkedPolynomial {
    q: usize,
    d: usize,
    types: usize,
    steps: usize,
    multi: Vec<Vec<u32>>,
    /// `[((r * types + l) * steps + s) * multi.len() + k]`.
    coeffs: Vec<f64>,
}

impl MarkedPolynomial {
    /// `types == 1` shares coefficients across types; steps past the last
    /// reuse the last.
    pub fn new(q: usize, d: usize, types: usize, steps: usize, coeffs: Vec<f64>) -> Result<Self> {
        if q == 0 || types == 0 || steps == 0 {
            return Err(AmpError::InvalidActivation("marks, types and steps must be positive".into()));
        }
        let multi = multi_indices(q, d);
        let expected = q * types * steps * multi.len();
        if coeffs.len() != expected {
            return Err(AmpError::DimensionMismatch {
                what: "marked polynomial coefficients",
                expected,
                got: coeffs.len(),
            });
        }
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(AmpError::InvalidActivation("coefficients must be finite".into()));
        }
        Ok(Self { q, d, types, steps, multi, coeffs })
    }

    pub fn from_fn<F: Fn(usize, usize, usize, &[u32]) -> f64>(
        q: usize,
        d: usize,
        types: usize,
        steps: usize,
        alpha: F,
    ) -> Result<Self> {
        let multi = multi_indices(q, d);
        let mut coeffs = Vec::with_capacity(q * types * steps * multi.len());
        for r in 0..q {
            for l in 0..types {
                for s in 0..steps {
                    for iota in &multi {
                        coeffs.push(alpha(r, l, s, iota));
                    }
                }
            }
        }
        Self::new(q, d, types, steps, coeffs)
    }

    /// Scalar (`q = 1`) polynomial family.
    pub fn from_family(p: &PolynomialFamily) -> Self {
        Self::from_fn(1, p.degree(), p.indices(), p.steps(), |_, l, s, iota| {
            p.coefficients(l, s)[iota[0] as usize]
        })
        .expect("a polynomial family is a valid marked polynomial")
    }

    pub fn zero(q: usize, d: usize) -> Self {
        Self::from_fn(q, d, 1, 1, |_, _, _, _| 0.0).expect("zero polynomial")
    }

    pub fn marks(&self) -> usize {
        self.q
    }

    pub fn degree(&self) -> usize {
        self.d
    }

    pub fn multi_indices(&self) -> &[Vec<u32>] {
        &self.multi
    }

    fn offset(&self, r: usize, l: usize, s: usize) -> usize {
        let l = if self.types == 1 { 0 } else { l };
        let s = s.min(self.steps - 1);
        ((r * self.types + l) * self.steps + s) * self.multi.len()
    }

    /// `alpha_iota(r, l, s)` for the `k`-th multi-index.
    pub fn alpha(&self, k: usize, r: usize, l: usize, s: usize) -> f64 {
        self.coeffs[self.offset(r, l, s) + k]
    }

    pub fn eval(&self, r: usize, z: &[f64], l: usize, s: usize) -> f64 {
        let base = self.offset(r, l, s);
        self.multi
            .iter()
            .enumerate()
            .map(|(k, iota)| {
                let mono: f64 = iota.iter().zip(z).map(|(&e, &v)| v.powi(e as i32)).product();
                self.coeffs[base + k] * mono
            })
            .sum()
    }

    fn index_of(&self, iota: &[u32]) -> usize {
        self.multi.iter().position(|m| m == iota).expect("multi-index in range")
    }
}

/// One vertex of a [`LabeledTree`].
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TreeVertex {
    pub parent: Option<usize>,
    pub ty: usize,
    pub mark: Option<usize>,
    /// Leaf exponent; zero for internal vertices and non-maximal leaves.
    pub exponent: Vec<u32>,
    pub depth: usize,
}

/// Planted labeled tree, vertices in preorder with the root first.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabeledTree {
    vertices: Vec<TreeVertex>,
}

/// Factors of a tree's contribution to the tree sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TreeWeight {
    pub w: f64,
    pub gamma: f64,
    pub x: f64,
}

impl TreeWeight {
    pub fn product(&self) -> f64 {
        self.w * self.gamma * self.x
    }
}

impl LabeledTree {
    pub fn vertices(&self) -> &[TreeVertex] {
        &self.vertices
    }

    pub fn root_type(&self) -> usize {
        self.vertices[0].ty
    }

    pub fn children(&self, v: usize) -> Vec<usize> {
        (0..self.vertices.len()).filter(|&u| self.vertices[u].parent == Some(v)).collect()
    }

    pub fn is_leaf(&self, v: usize) -> bool {
        !self.vertices.iter().any(|u| u.parent == Some(v))
    }

    pub fn depth(&self) -> usize {
        self.vertices.iter().map(|v| v.depth).max().unwrap_or(0)
    }

    /// Checks the planted, degree, non-backtracking and exponent conditions
    /// for trees of `T^t` with `n` types and `q` marks.
    pub fn validate(&self, n: usize, q: usize, d: usize, t: usize) -> Result<()> {
        let fail = |m: String| Err(AmpError::Inconsistent(m));
        let vs = &self.vertices;
        if vs.is_empty() || vs[0].parent.is_some() || vs[0].depth != 0 || vs[0].mark.is_some() {
            return fail("vertex 0 must be the unmarked root".into());
        }
        if self.children(0).len() != 1 {
            return fail("root must have exactly one child".into());
        }
        for (k, v) in vs.iter().enumerate().skip(1) {
            let p = match v.parent {
                Some(p) if p < k => p,
                _ => return fail(format!("vertex {k} has no earlier parent")),
            };
            if v.depth != vs[p].depth + 1 || v.depth > t {
                return fail(format!("vertex {k} has inconsistent depth"));
            }
            if v.ty >= n || v.mark.is_none_or(|m| m >= q) || v.exponent.len() != q {
                return fail(format!("vertex {k} has labels out of range"));
            }
            if let Some(g) = vs[p].parent {
                if v.ty == vs[p].ty || v.ty == vs[g].ty || vs[p].ty == vs[g].ty {
                    return fail(format!("vertex {k} backtracks"));
                }
            }
            let kids = self.children(k);
            if kids.len() > d {
                return fail(format!("vertex {k} has more than {d} children"));
            }
            let total: u32 = v.exponent.iter().sum();
            if !kids.is_empty() || v.depth < t {
                if total != 0 {
                    return fail(format!("vertex {k} is not a maximal leaf but has an exponent"));
                }
            } else if total as usize > d {
                return fail(format!("leaf {k} has exponent above {d}"));
            }
        }
        Ok(())
    }

    /// Counts of children by mark, or the leaf exponent.
    fn iota(&self, v: usize, q: usize) -> Vec<u32> {
        let kids = self.children(v);
        if kids.is_empty() {
            return self.vertices[v].exponent.clone();
        }
        let mut c = vec![0; q];
        for u in kids {
            c[self.vertices[u].mark.expect("non-root vertex")] += 1;
        }
        c
    }

    /// `W(T)`, `Gamma(T, alpha, t)` and `x(T)`; `w[a][b]` is `W_ab`.
    pub fn weight(&self, w: &[Vec<f64>], f: &MarkedPolynomial, x0: &[Vec<f64>], t: usize) -> TreeWeight {
        let mut out = TreeWeight { w: 1.0, gamma: 1.0, x: 1.0 };
        for (k, v) in self.vertices.iter().enumerate().skip(1) {
            let p = v.parent.expect("non-root vertex");
            out.w *= w[self.vertices[p].ty][v.ty];
            let iota = self.iota(k, f.marks());
            out.gamma *= f.alpha(f.index_of(&iota), v.mark.expect("marked"), v.ty, t - v.depth);
            if self.is_leaf(k) {
                for (m, &e) in v.exponent.iter().enumerate() {
                    out.x *= x0[v.ty][m].powi(e as i32);
                }
            }
        }
        out
    }

    /// One line per vertex: `parent type mark exponents` (`-` when absent).
    pub fn to_dump(&self) -> String {
        let mut s = String::new();
        for v in &self.vertices {
            let parent = v.parent.map_or("-".to_string(), |p| p.to_string());
            let mark = v.mark.map_or("-".to_string(), |m| m.to_string());
            let exps: Vec<String> = v.exponent.iter().map(|e| e.to_string()).collect();
            s.push_str(&format!("{parent} {} {mark} {}\n", v.ty, exps.join(",")));
        }
        s
    }
}

/// Shared subtree below a non-root vertex.
#[derive(Debug)]
struct Node {
    ty: usize,
    mark: usize,
    /// Index of the children-count (or leaf exponent) multi-index.
    iota: usize,
    depth: usize,
    /// Ordered by mark, then by slot.
    children: Vec<Rc<Node>>,
}

struct Enumerator<'a> {
    n: usize,
    t: usize,
    multi: &'a [Vec<u32>],
    memo: HashMap<(usize, usize, usize, usize), Rc<Vec<Rc<Node>>>>,
}

impl Enumerator<'_> {
    /// All subtrees rooted at a vertex of the given depth, type and mark whose
    /// parent has type `parent_ty`.
    fn subtrees(&mut self, depth: usize, ty: usize, parent_ty: usize, mark: usize) -> Rc<Vec<Rc<Node>>> {
        let key = (depth, ty, parent_ty, mark);
        if let Some(v) = self.memo.get(&key) {
            return v.clone();
        }
        let mut out = Vec::new();
        let q = self.multi[0].len();
        for (k, iota) in self.multi.iter().enumerate() {
            let leaf = iota.iter().all(|&e| e == 0);
            if depth == self.t || leaf {
                if depth == self.t || k == 0 {
                    out.push(Rc::new(Node { ty, mark, iota: k, depth, children: Vec::new() }));
                }
                continue;
            }
            // Candidate subtrees for one child slot of each mark.
            let per_mark: Vec<Vec<Rc<Node>>> = (0..q)
                .map(|m| {
                    let mut c = Vec::new();
                    for child_ty in (0..self.n).filter(|&c| c != ty && c != parent_ty) {
                        c.extend(self.subtrees(depth + 1, child_ty, ty, m).iter().cloned());
                    }
                    c
                })
                .collect();
            let slots: Vec<&Vec<Rc<Node>>> = iota
                .iter()
                .enumerate()
                .flat_map(|(m, &e)| std::iter::repeat_n(&per_mark[m], e as usize))
                .collect();
            if slots.iter().any(|s| s.is_empty()) {
                continue;
            }
            let mut odometer = vec![0usize; slots.len()];
            loop {
                let children = slots.iter().zip(&odometer).map(|(s, &c)| s[c].clone()).collect();
                out.push(Rc::new(Node { ty, mark, iota: k, depth, children }));
                let mut pos = slots.len();
                loop {
                    if pos == 0 {
                        break;
                    }
                    pos -= 1;
                    odometer[pos] += 1;
                    if odometer[pos] < slots[pos].len() {
                        break;
                    }
                    odometer[pos] = 0;
                    if pos == 0 {
                        pos = usize::MAX;
                        break;
                    }
                }
                if pos == usize::MAX || slots.is_empty() {
                    break;
                }
            }
        }
        let rc = Rc::new(out);
        self.memo.insert(key, rc.clone());
        rc
    }
}

fn check_budget(n: usize, q: usize, d: usize, t: usize) -> Result<()> {
    if n > MAX_TYPES || q > MAX_MARKS || d > MAX_CHILDREN || t > MAX_DEPTH {
        return Err(AmpError::BudgetExceeded(format!(
            "(n, q, d, t) = ({n}, {q}, {d}, {t}) exceeds ({MAX_TYPES}, {MAX_MARKS}, {MAX_CHILDREN}, {MAX_DEPTH})"
        )));
    }
    if t == 0 || q == 0 || n == 0 {
        return Err(AmpError::Precondition("n, q and t must be positive".into()));
    }
    Ok(())
}

/// Number of trees in `T^t_i(r)` (or `T^t_{i->j}(r)` when `arrow`).
pub fn count_nb_trees(n: usize, q: usize, d: usize, t: usize, arrow: bool) -> f64 {
    let multi = multi_indices(q, d);
    let k = n.saturating_sub(2) as f64;
    let mut c = multi.len() as f64;
    for _ in 1..t {
        c = multi
            .iter()
            .map(|iota| iota.iter().map(|&e| (k * c).powi(e as i32)).product::<f64>())
            .sum();
    }
    let root_children = if arrow { n.saturating_sub(2) } else { n.saturating_sub(1) };
    root_children as f64 * c
}

fn flatten(root_ty: usize, child: &Rc<Node>, multi: &[Vec<u32>], t: usize) -> LabeledTree {
    let q = multi[0].len();
    let mut vertices = vec![TreeVertex { parent: None, ty: root_ty, mark: None, exponent: vec![0; q], depth: 0 }];
    let mut stack = vec![(child.clone(), 0usize)];
    while let Some((node, parent)) = stack.pop() {
        let exponent = if node.children.is_empty() && node.depth == t {
            multi[node.iota].clone()
        } else {
            vec![0; q]
        };
        let me = vertices.len();
        vertices.push(TreeVertex { parent: Some(parent), ty: node.ty, mark: Some(node.mark), exponent, depth: node.depth });
        for c in node.children.iter().rev() {
            stack.push((c.clone(), me));
        }
    }
    LabeledTree { vertices }
}

fn root_children(
    en: &mut Enumerator<'_>,
    i: usize,
    r: usize,
    exclude: Option<usize>,
) -> Vec<Rc<Node>> {
    let mut out = Vec::new();
    for ty in (0..en.n).filter(|&c| c != i && Some(c) != exclude) {
        out.extend(en.subtrees(1, ty, i, r).iter().cloned());
    }
    out
}

/// `T^t_i(r)`, or `T^t_{i->j}(r)` when `exclude_type = Some(j)`.
pub fn enumerate_nb_trees(
    n: usize,
    q: usize,
    d: usize,
    t: usize,
    root_type: usize,
    mark: usize,
    exclude_type: Option<usize>,
) -> Result<Vec<LabeledTree>> {
    check_budget(n, q, d, t)?;
    if root_type >= n || mark >= q || exclude_type.is_some_and(|j| j >= n) {
        return Err(AmpError::Precondition("root type, mark or excluded type out of range".into()));
    }
    let count = count_nb_trees(n, q, d, t, exclude_type.is_some_and(|j| j != root_type));
    if count > TREE_LIST_CAP {
        return Err(AmpError::BudgetExceeded(format!(
            "{count} trees exceed the listing cap of {TREE_LIST_CAP}"
        )));
    }
    let multi = multi_indices(q, d);
    let mut en = Enumerator { n, t, multi: &multi, memo: HashMap::new() };
    Ok(root_children(&mut en, root_type, mark, exclude_type)
        .iter()
        .map(|c| flatten(root_type, c, &multi, t))
        .collect())
}

/// Non-backtracking iterates: arrows `z^s_{i->j}(r)` for `s = 0..=t` and
/// vertices `z^s_i(r)` for `s = 1..=t`.
#[derive(Debug, Clone)]
pub struct NbIterates {
    n: usize,
    q: usize,
    arrows: Vec<Vec<f64>>,
    nodes: Vec<Vec<f64>>,
}

impl NbIterates {
    pub fn depth(&self) -> usize {
        self.nodes.len()
    }

    pub fn arrow(&self, s: usize, i: usize, j: usize, r: usize) -> f64 {
        self.arrows[s][(i * self.n + j) * self.q + r]
    }

    /// `z^s_i(r)` for `s >= 1`.
    pub fn node(&self, s: usize, i: usize, r: usize) -> f64 {
        self.nodes[s - 1][i * self.q + r]
    }
}

fn dense_zero_diagonal(w: &SampledMatrix) -> Result<Vec<Vec<f64>>> {
    let n = w.n();
    let dense = w.w().to_dense();
    for i in 0..n {
        if dense[(i, i)] != 0.0 {
            return Err(AmpError::NonZeroDiagonal { index: i, value: dense[(i, i)] });
        }
    }
    Ok((0..n).map(|i| (0..n).map(|j| dense[(i, j)]).collect()).collect())
}

fn check_x0(x0: &[Vec<f64>], n: usize, q: usize) -> Result<()> {
    if x0.len() != n {
        return Err(AmpError::DimensionMismatch { what: "x0", expected: n, got: x0.len() });
    }
    if let Some(bad) = x0.iter().find(|v| v.len() != q) {
        return Err(AmpError::DimensionMismatch { what: "x0 marks", expected: q, got: bad.len() });
    }
    Ok(())
}

/// One step of the arrow and vertex recursions with matrix `w`.
fn nb_step(w: &[Vec<f64>], f: &MarkedPolynomial, prev: &[f64], n: usize, q: usize, s: usize) -> (Vec<f64>, Vec<f64>) {
    // g[l][i][r] = f_r(z^s_{l->i}, l, s)
    let mut g = vec![0.0; n * n * q];
    for l in 0..n {
        for i in (0..n).filter(|&i| i != l) {
            let z = &prev[(l * n + i) * q..(l * n + i + 1) * q];
            for r in 0..q {
                g[(l * n + i) * q + r] = f.eval(r, z, l, s);
            }
        }
    }
    let mut arrows = vec![0.0; n * n * q];
    let mut nodes = vec![0.0; n * q];
    for i in 0..n {
        for r in 0..q {
            let full: f64 = (0..n).filter(|&l| l != i).map(|l| w[i][l] * g[(l * n + i) * q + r]).sum();
            nodes[i * q + r] = full;
            for j in (0..n).filter(|&j| j != i) {
                arrows[(i * n + j) * q + r] = (0..n)
                    .filter(|&l| l != i && l != j)
                    .map(|l| w[i][l] * g[(l * n + i) * q + r])
                    .sum();
            }
        }
    }
    (arrows, nodes)
}

fn initial_arrows(x0: &[Vec<f64>], n: usize, q: usize) -> Vec<f64> {
    let mut a = vec![0.0; n * n * q];
    for i in 0..n {
        for j in (0..n).filter(|&j| j != i) {
            a[(i * n + j) * q..(i * n + j + 1) * q].copy_from_slice(&x0[i]);
        }
    }
    a
}

/// Non-backtracking recursion on a zero-diagonal `W`.
pub fn z_recursion(w: &SampledMatrix, f: &MarkedPolynomial, x0: &[Vec<f64>], t_max: usize) -> Result<NbIterates> {
    let wd = dense_zero_diagonal(w)?;
    let (n, q) = (w.n(), f.marks());
    check_x0(x0, n, q)?;
    let mut arrows = vec![initial_arrows(x0, n, q)];
    let mut nodes = Vec::with_capacity(t_max);
    for s in 0..t_max {
        let (a, v) = nb_step(&wd, f, &arrows[s], n, q, s);
        arrows.push(a);
        nodes.push(v);
    }
    Ok(NbIterates { n, q, arrows, nodes })
}

/// Fresh-matrix recursion: step `s -> s + 1` uses `w_list[s]`.
pub fn y_iterations(w_list: &[SampledMatrix], f: &MarkedPolynomial, x0: &[Vec<f64>], t_max: usize) -> Result<NbIterates> {
    if w_list.len() < t_max {
        return Err(AmpError::ArityMismatch { needed: t_max, available: w_list.len() });
    }
    let n = w_list.first().map_or(x0.len(), |w| w.n());
    let q = f.marks();
    check_x0(x0, n, q)?;
    let mut arrows = vec![initial_arrows(x0, n, q)];
    let mut nodes = Vec::with_capacity(t_max);
    for (s, w) in w_list.iter().take(t_max).enumerate() {
        if w.n() != n {
            return Err(AmpError::DimensionMismatch { what: "fresh matrix", expected: n, got: w.n() });
        }
        let wd = dense_zero_diagonal(w)?;
        let (a, v) = nb_step(&wd, f, &arrows[s], n, q, s);
        arrows.push(a);
        nodes.push(v);
    }
    Ok(NbIterates { n, q, arrows, nodes })
}

/// A tree class `T^t_i(r)` (`j = None`) or `T^t_{i->j}(r)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TreeCell {
    pub i: usize,
    pub j: Option<usize>,
    pub r: usize,
}

/// Every vertex and arrow cell for `n` types and `q` marks.
pub fn all_cells(n: usize, q: usize) -> Vec<TreeCell> {
    let mut out = Vec::new();
    for i in 0..n {
        for r in 0..q {
            out.push(TreeCell { i, j: None, r });
            for j in (0..n).filter(|&j| j != i) {
                out.push(TreeCell { i, j: Some(j), r });
            }
        }
    }
    out
}

/// Largest `|recursion - tree sum|` over `cells` at depth `t`.
pub fn verify_tree_identity(
    w: &SampledMatrix,
    f: &MarkedPolynomial,
    x0: &[Vec<f64>],
    t: usize,
    cells: &[TreeCell],
) -> Result<f64> {
    let (n, q, d) = (w.n(), f.marks(), f.degree());
    check_budget(n, q, d, t)?;
    let per_cell = count_nb_trees(n, q, d, t, false);
    if per_cell > TREE_COUNT_CAP {
        return Err(AmpError::BudgetExceeded(format!(
            "{per_cell} trees per cell exceed the cap of {TREE_COUNT_CAP}"
        )));
    }
    let z = z_recursion(w, f, x0, t)?;
    let wd = dense_zero_diagonal(w)?;
    let multi = multi_indices(q, d);
    let mut en = Enumerator { n, t, multi: &multi, memo: HashMap::new() };
    let mut worst = 0.0_f64;
    for cell in cells {
        if cell.i >= n || cell.r >= q || cell.j.is_some_and(|j| j >= n || j == cell.i) {
            return Err(AmpError::Precondition(format!("invalid tree cell {cell:?}")));
        }
        let sum: f64 = root_children(&mut en, cell.i, cell.r, cell.j)
            .iter()
            .map(|c| flatten(cell.i, c, &multi, t).weight(&wd, f, x0, t).product())
            .sum();
        let rec = match cell.j {
            Some(j) => z.arrow(t, cell.i, j, cell.r),
            None => z.node(t, cell.i, cell.r),
        };
        worst = worst.max((rec - sum).abs());
    }
    Ok(worst)
}

/// `x^{t+1} = W p(x^t) - diag(W (.) W^T p'(x^t)) p(x^{t-1})` on a zero-diagonal `W`.
pub fn run_polynomial_ampw(w: &SampledMatrix, p: &PolynomialFamily, x0: &[f64], t_max: usize) -> Result<Trajectory> {
    dense_zero_diagonal(w)?;
    let none = CorrelationProfile::constant(0.0)?;
    let eta = vec![0.0; w.n()];
    amp_run(w, &none, &Activation::polynomial(p.clone()), x0, &eta, OnsagerVariant::Ampw, t_max, None)
}
