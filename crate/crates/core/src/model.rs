//! Problem data: sparse-plus-low-rank symmetric operators, the linear
//! coupling map `K(X, x) = A(X) + Bx`, and the convex objective.
//!
//! Matrices of order `n` are never formed densely on the hot path. Every
//! quantity the solver needs is an inner product against a factor `R̂R̂ᵀ`
//! (or a symmetrized product `UVᵀ + VUᵀ`), or a product `A·V` with a tall
//! dense block `V`.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::geometry::FactorPoint;

/// Constraint count above which per-constraint loops run on the rayon pool.
const PAR_THRESHOLD: usize = 64;

/// Sparse vector with sorted, unique indices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparseVec {
    pub idx: Vec<usize>,
    pub val: Vec<f64>,
}

impl SparseVec {
    /// Builds from unsorted pairs, summing duplicates and dropping exact zeros.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (usize, f64)>) -> Self {
        let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
        for (i, v) in pairs {
            *acc.entry(i).or_insert(0.0) += v;
        }
        let (idx, val) = acc.into_iter().filter(|(_, v)| *v != 0.0).unzip();
        Self { idx, val }
    }

    pub fn from_dense(v: &DVector<f64>) -> Self {
        Self::from_pairs(v.iter().copied().enumerate())
    }

    pub fn nnz(&self) -> usize {
        self.idx.len()
    }

    pub fn max_index(&self) -> Option<usize> {
        self.idx.last().copied()
    }

    pub fn norm_sq(&self) -> f64 {
        self.val.iter().map(|v| v * v).sum()
    }

    pub fn dot(&self, other: &SparseVec) -> f64 {
        let (mut a, mut b, mut s) = (0, 0, 0.0);
        while a < self.idx.len() && b < other.idx.len() {
            match self.idx[a].cmp(&other.idx[b]) {
                std::cmp::Ordering::Less => a += 1,
                std::cmp::Ordering::Greater => b += 1,
                std::cmp::Ordering::Equal => {
                    s += self.val[a] * other.val[b];
                    a += 1;
                    b += 1;
                }
            }
        }
        s
    }

    pub fn dot_dense(&self, v: &DVector<f64>) -> f64 {
        self.idx.iter().zip(&self.val).map(|(&i, &w)| w * v[i]).sum()
    }

    /// `uᵀM` for a tall dense `M`, returned as a column vector of length `ncols(M)`.
    pub fn row_combination(&self, m: &DMatrix<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(m.ncols());
        for (&i, &w) in self.idx.iter().zip(&self.val) {
            for c in 0..m.ncols() {
                out[c] += w * m[(i, c)];
            }
        }
        out
    }

    pub fn to_dense(&self, n: usize) -> DVector<f64> {
        let mut out = DVector::zeros(n);
        for (&i, &w) in self.idx.iter().zip(&self.val) {
            out[i] += w;
        }
        out
    }
}

/// Weighted rank-one term `weight · u uᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct RankOne {
    pub weight: f64,
    pub u: SparseVec,
}

#[inline]
fn row_dot(u: &DMatrix<f64>, i: usize, v: &DMatrix<f64>, j: usize) -> f64 {
    let mut s = 0.0;
    for c in 0..u.ncols() {
        s += u[(i, c)] * v[(j, c)];
    }
    s
}

#[inline]
fn row_axpy(out: &mut DMatrix<f64>, i: usize, alpha: f64, v: &DMatrix<f64>, j: usize) {
    for c in 0..out.ncols() {
        out[(i, c)] += alpha * v[(j, c)];
    }
}

/// Symmetric matrix stored as upper-triangle coordinates plus weighted
/// rank-one terms.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SymMatrix {
    n: usize,
    /// `(i, j, v)` with `i <= j`, sorted and merged.
    entries: Vec<(usize, usize, f64)>,
    lowrank: Vec<RankOne>,
}

impl SymMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            entries: Vec::new(),
            lowrank: Vec::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_upper(n, (0..n).map(|i| (i, i, 1.0)))
    }

    /// Builds from upper-triangle coordinates. Lower entries are swapped into
    /// the upper triangle; duplicates are summed.
    pub fn from_upper(n: usize, entries: impl IntoIterator<Item = (usize, usize, f64)>) -> Self {
        let mut acc: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for (i, j, v) in entries {
            let key = if i <= j { (i, j) } else { (j, i) };
            *acc.entry(key).or_insert(0.0) += v;
        }
        Self {
            n,
            entries: acc
                .into_iter()
                .filter(|(_, v)| *v != 0.0)
                .map(|((i, j), v)| (i, j, v))
                .collect(),
            lowrank: Vec::new(),
        }
    }

    /// Builds from coordinate triplets of either triangle. An off-diagonal
    /// entry given on one side only is mirrored; an entry given on both sides
    /// must carry the same value.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Result<Self, ModelError> {
        let mut upper: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        let mut lower: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for &(i, j, v) in triplets {
            if i >= n || j >= n {
                return Err(ModelError::IndexOutOfRange {
                    row: i,
                    col: j,
                    order: n,
                });
            }
            if i <= j {
                *upper.entry((i, j)).or_insert(0.0) += v;
            } else {
                *lower.entry((j, i)).or_insert(0.0) += v;
            }
        }
        for (key, v) in lower {
            match upper.get(&key) {
                Some(&u) if (u - v).abs() <= 1e-14 * (1.0 + u.abs()) => {}
                Some(_) => {
                    return Err(ModelError::Asymmetric {
                        index: 0,
                        row: key.0,
                        col: key.1,
                    })
                }
                None => {
                    upper.insert(key, v);
                }
            }
        }
        Ok(Self::from_upper(n, upper.into_iter().map(|((i, j), v)| (i, j, v))))
    }

    pub fn with_rank_one(mut self, weight: f64, u: SparseVec) -> Self {
        self.push_rank_one(weight, u);
        self
    }

    pub fn push_rank_one(&mut self, weight: f64, u: SparseVec) {
        if weight != 0.0 && u.nnz() > 0 {
            self.lowrank.push(RankOne { weight, u });
        }
    }

    pub fn order(&self) -> usize {
        self.n
    }

    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    pub fn lowrank(&self) -> &[RankOne] {
        &self.lowrank
    }

    pub fn is_zero(&self) -> bool {
        self.entries.is_empty() && self.lowrank.is_empty()
    }

    /// Largest index referenced, used for validation against the order.
    pub fn max_index(&self) -> Option<usize> {
        let e = self.entries.iter().map(|&(_, j, _)| j).max();
        let l = self.lowrank.iter().filter_map(|t| t.u.max_index()).max();
        e.max(l)
    }

    /// `Σ_ij A_ij ⟨u_i, v_j⟩` over the full matrix, i.e. `⟨A, U Vᵀ⟩`.
    pub fn bilinear(&self, u: &DMatrix<f64>, v: &DMatrix<f64>) -> f64 {
        let mut s = 0.0;
        for &(i, j, w) in &self.entries {
            if i == j {
                s += w * row_dot(u, i, v, i);
            } else {
                s += w * (row_dot(u, i, v, j) + row_dot(u, j, v, i));
            }
        }
        for t in &self.lowrank {
            let a = t.u.row_combination(u);
            let b = t.u.row_combination(v);
            s += t.weight * a.dot(&b);
        }
        s
    }

    /// `⟨A, U Uᵀ⟩`.
    pub fn quad(&self, u: &DMatrix<f64>) -> f64 {
        self.bilinear(u, u)
    }

    /// `out += alpha · A · V`.
    pub fn mul_dense_into(&self, v: &DMatrix<f64>, out: &mut DMatrix<f64>, alpha: f64) {
        for &(i, j, w) in &self.entries {
            row_axpy(out, i, alpha * w, v, j);
            if i != j {
                row_axpy(out, j, alpha * w, v, i);
            }
        }
        for t in &self.lowrank {
            let coef = t.u.row_combination(v);
            for (&i, &w) in t.u.idx.iter().zip(&t.u.val) {
                for c in 0..out.ncols() {
                    out[(i, c)] += alpha * t.weight * w * coef[c];
                }
            }
        }
    }

    pub fn mul_dense(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n, v.ncols());
        self.mul_dense_into(v, &mut out, 1.0);
        out
    }

    /// Nonzero rows of `A·V` restricted to rows `>= skip`, sorted by row.
    pub fn product_rows(&self, v: &DMatrix<f64>, skip: usize) -> Vec<(usize, Vec<f64>)> {
        let r = v.ncols();
        let mut acc: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        let mut add = |row: usize, w: f64, src: usize| {
            if row < skip {
                return;
            }
            let e = acc.entry(row).or_insert_with(|| vec![0.0; r]);
            for c in 0..r {
                e[c] += w * v[(src, c)];
            }
        };
        for &(i, j, w) in &self.entries {
            add(i, w, j);
            if i != j {
                add(j, w, i);
            }
        }
        for t in &self.lowrank {
            let coef = t.u.row_combination(v);
            for (&i, &w) in t.u.idx.iter().zip(&t.u.val) {
                if i < skip {
                    continue;
                }
                let e = acc.entry(i).or_insert_with(|| vec![0.0; r]);
                for c in 0..r {
                    e[c] += t.weight * w * coef[c];
                }
            }
        }
        acc.into_iter().collect()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        self.add_to_dense(&mut m, 1.0);
        m
    }

    pub fn add_to_dense(&self, m: &mut DMatrix<f64>, alpha: f64) {
        for &(i, j, w) in &self.entries {
            m[(i, j)] += alpha * w;
            if i != j {
                m[(j, i)] += alpha * w;
            }
        }
        for t in &self.lowrank {
            for (&i, &wi) in t.u.idx.iter().zip(&t.u.val) {
                for (&j, &wj) in t.u.idx.iter().zip(&t.u.val) {
                    m[(i, j)] += alpha * t.weight * wi * wj;
                }
            }
        }
    }

    /// `uᵀ A u` for a sparse `u` (sparse part only).
    fn sparse_quad(&self, u: &SparseVec) -> f64 {
        let dense: BTreeMap<usize, f64> = u.idx.iter().copied().zip(u.val.iter().copied()).collect();
        let mut s = 0.0;
        for &(i, j, w) in &self.entries {
            if let (Some(a), Some(b)) = (dense.get(&i), dense.get(&j)) {
                s += if i == j { w * a * b } else { 2.0 * w * a * b };
            }
        }
        s
    }

    /// Squared Frobenius norm, computed without densifying.
    pub fn frobenius_sq(&self) -> f64 {
        let mut s: f64 = self
            .entries
            .iter()
            .map(|&(i, j, w)| if i == j { w * w } else { 2.0 * w * w })
            .sum();
        for (a, ta) in self.lowrank.iter().enumerate() {
            s += 2.0 * ta.weight * self.sparse_quad(&ta.u);
            s += ta.weight * ta.weight * ta.u.norm_sq().powi(2);
            for tb in &self.lowrank[a + 1..] {
                let d = ta.u.dot(&tb.u);
                s += 2.0 * ta.weight * tb.weight * d * d;
            }
        }
        s.max(0.0)
    }

    /// Linear combination `Σ c_t M_t` of symmetric operators of equal order.
    pub fn combine(n: usize, terms: &[(f64, &SymMatrix)]) -> SymMatrix {
        let mut out = SymMatrix::from_upper(
            n,
            terms
                .iter()
                .filter(|(c, _)| *c != 0.0)
                .flat_map(|(c, m)| m.entries.iter().map(move |&(i, j, v)| (i, j, c * v))),
        );
        for (c, m) in terms {
            if *c == 0.0 {
                continue;
            }
            for t in &m.lowrank {
                out.push_rank_one(c * t.weight, t.u.clone());
            }
        }
        out
    }

    /// Sum of sparse diagonal entries plus rank-one traces.
    pub fn trace(&self) -> f64 {
        let d: f64 = self
            .entries
            .iter()
            .filter(|(i, j, _)| i == j)
            .map(|&(_, _, v)| v)
            .sum();
        d + self.lowrank.iter().map(|t| t.weight * t.u.norm_sq()).sum::<f64>()
    }

    /// The matrix `u uᵀ`-free diagonal block view `A[0..k, 0..k]` as dense.
    pub fn leading_block(&self, k: usize) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(k, k);
        for &(i, j, w) in &self.entries {
            if j < k {
                m[(i, j)] += w;
                if i != j {
                    m[(j, i)] += w;
                }
            }
        }
        for t in &self.lowrank {
            for (&i, &wi) in t.u.idx.iter().zip(&t.u.val) {
                if i >= k {
                    continue;
                }
                for (&j, &wj) in t.u.idx.iter().zip(&t.u.val) {
                    if j < k {
                        m[(i, j)] += t.weight * wi * wj;
                    }
                }
            }
        }
        m
    }
}

/// The constraint operators `A_1, …, A_m` acting on `S^n`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Constraints {
    n: usize,
    mats: Vec<SymMatrix>,
}

impl Constraints {
    pub fn new(n: usize, mats: Vec<SymMatrix>) -> Result<Self, ModelError> {
        for (idx, a) in mats.iter().enumerate() {
            if a.order() != n {
                return Err(ModelError::Dimension(format!(
                    "constraint {idx} has order {}, expected {n}",
                    a.order()
                )));
            }
            if let Some(mx) = a.max_index() {
                if mx >= n {
                    return Err(ModelError::IndexOutOfRange {
                        row: mx,
                        col: mx,
                        order: n,
                    });
                }
            }
        }
        Ok(Self { n, mats })
    }

    pub fn empty(n: usize) -> Self {
        Self { n, mats: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.mats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mats.is_empty()
    }

    pub fn order(&self) -> usize {
        self.n
    }

    pub fn mats(&self) -> &[SymMatrix] {
        &self.mats
    }

    /// `[⟨A_i, U Vᵀ⟩]_i`.
    pub fn bilinear_all(&self, u: &DMatrix<f64>, v: &DMatrix<f64>) -> DVector<f64> {
        if self.mats.len() >= PAR_THRESHOLD {
            let vals: Vec<f64> = self.mats.par_iter().map(|a| a.bilinear(u, v)).collect();
            DVector::from_vec(vals)
        } else {
            DVector::from_iterator(self.mats.len(), self.mats.iter().map(|a| a.bilinear(u, v)))
        }
    }

    /// `𝒜(R̂R̂ᵀ)`.
    pub fn apply_factor(&self, rhat: &DMatrix<f64>) -> DVector<f64> {
        self.bilinear_all(rhat, rhat)
    }

    /// `𝒜(X)` for a dense symmetric `X`. Test and oracle use.
    pub fn apply_dense(&self, x: &DMatrix<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.mats.len(),
            self.mats.iter().map(|a| a.to_dense().component_mul(x).sum()),
        )
    }

    /// `out += alpha · 𝒜*(λ) · V`.
    pub fn adjoint_mul_into(
        &self,
        lambda: &DVector<f64>,
        v: &DMatrix<f64>,
        out: &mut DMatrix<f64>,
        alpha: f64,
    ) {
        for (a, &l) in self.mats.iter().zip(lambda.iter()) {
            if l != 0.0 {
                a.mul_dense_into(v, out, alpha * l);
            }
        }
    }

    /// `𝒜*(λ) = Σ λ_i A_i` as a symmetric operator.
    pub fn adjoint(&self, lambda: &DVector<f64>) -> SymMatrix {
        let terms: Vec<(f64, &SymMatrix)> = lambda.iter().copied().zip(self.mats.iter()).collect();
        SymMatrix::combine(self.n, &terms)
    }
}

/// Rectangular sparse matrix with row and column access (the `B` block).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    by_row: Vec<Vec<(usize, f64)>>,
    by_col: Vec<Vec<(usize, f64)>>,
}

impl SparseMatrix {
    pub fn from_triplets(
        rows: usize,
        cols: usize,
        triplets: &[(usize, usize, f64)],
    ) -> Result<Self, ModelError> {
        let mut acc: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for &(i, j, v) in triplets {
            if i >= rows || j >= cols {
                return Err(ModelError::Dimension(format!(
                    "B entry ({i}, {j}) outside {rows}x{cols}"
                )));
            }
            *acc.entry((i, j)).or_insert(0.0) += v;
        }
        let mut by_row = vec![Vec::new(); rows];
        let mut by_col = vec![Vec::new(); cols];
        for ((i, j), v) in acc {
            if v != 0.0 {
                by_row[i].push((j, v));
                by_col[j].push((i, v));
            }
        }
        Ok(Self {
            rows,
            cols,
            by_row,
            by_col,
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            by_row: vec![Vec::new(); rows],
            by_col: vec![Vec::new(); cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let t: Vec<_> = (0..n).map(|i| (i, i, 1.0)).collect();
        Self::from_triplets(n, n, &t).expect("identity is in range")
    }

    pub fn nrows(&self) -> usize {
        self.rows
    }

    pub fn ncols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.by_row[i]
    }

    pub fn col(&self, j: usize) -> &[(usize, f64)] {
        &self.by_col[j]
    }

    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        self.by_row
            .iter()
            .enumerate()
            .flat_map(|(i, r)| r.iter().map(move |&(j, v)| (i, j, v)))
            .collect()
    }

    pub fn mul(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.rows,
            self.by_row
                .iter()
                .map(|r| r.iter().map(|&(j, v)| v * x[j]).sum::<f64>()),
        )
    }

    pub fn tr_mul(&self, lambda: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.cols,
            self.by_col
                .iter()
                .map(|c| c.iter().map(|&(i, v)| v * lambda[i]).sum::<f64>()),
        )
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.rows, self.cols);
        for (i, r) in self.by_row.iter().enumerate() {
            for &(j, v) in r {
                m[(i, j)] += v;
            }
        }
        m
    }
}

/// Gradient of the objective at a point: `C = ∇_X φ` and `c = ∇_x φ`.
#[derive(Clone, Debug)]
pub struct Gradient {
    pub mat: Arc<SymMatrix>,
    pub vec: DVector<f64>,
}

#[derive(Clone, Debug)]
pub struct ObjectiveEval {
    pub value: f64,
    pub grad: Gradient,
}

/// User-supplied objective. `rhat` is the full `n × r` factor including the
/// fixed identity rows, `x = y∘y`.
pub trait CustomObjective: Send + Sync + fmt::Debug {
    fn evaluate(&self, rhat: &DMatrix<f64>, x: &DVector<f64>) -> Result<ObjectiveEval, String>;
}

/// One residual `(g_tᵀ X g_t − d_t)` of a quadratic-residual objective.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualTerm {
    pub g: SparseVec,
    pub d: f64,
}

#[derive(Clone, Debug)]
pub enum Objective {
    /// `⟨C, X⟩ + ⟨c, x⟩`.
    Linear { c_mat: Arc<SymMatrix>, c_vec: DVector<f64> },
    /// `½ Σ_t (g_tᵀ X g_t − d_t)² + ⟨C₀, X⟩ + ⟨c₀, x⟩`.
    QuadraticResidual {
        terms: Vec<ResidualTerm>,
        c_mat: SymMatrix,
        c_vec: DVector<f64>,
    },
    Custom(Arc<dyn CustomObjective>),
}

impl Objective {
    pub fn evaluate(&self, rhat: &DMatrix<f64>, x: &DVector<f64>) -> Result<ObjectiveEval, ModelError> {
        match self {
            Objective::Linear { c_mat, c_vec } => Ok(ObjectiveEval {
                value: c_mat.quad(rhat) + c_vec.dot(x),
                grad: Gradient {
                    mat: Arc::clone(c_mat),
                    vec: c_vec.clone(),
                },
            }),
            Objective::QuadraticResidual {
                terms,
                c_mat,
                c_vec,
            } => {
                let mut grad = c_mat.clone();
                let mut value = c_mat.quad(rhat) + c_vec.dot(x);
                for t in terms {
                    let gr = t.g.row_combination(rhat);
                    let res = gr.norm_squared() - t.d;
                    value += 0.5 * res * res;
                    grad.push_rank_one(res, t.g.clone());
                }
                Ok(ObjectiveEval {
                    value,
                    grad: Gradient {
                        mat: Arc::new(grad),
                        vec: c_vec.clone(),
                    },
                })
            }
            Objective::Custom(f) => f.evaluate(rhat, x).map_err(ModelError::Callback),
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(self, Objective::Linear { .. })
    }
}

/// Instance family tag, used to pick closed-form starting points.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    #[default]
    General,
    Theta,
    BoxQp,
    Snl,
    Random,
}

/// A recorded feasible point `(R, y)`.
#[derive(Clone, Debug, PartialEq)]
pub struct InitialPoint {
    pub r: DMatrix<f64>,
    pub y: DVector<f64>,
}

/// `min φ(X, x)  s.t.  𝒜(X) + Bx = b,  X ⪰ 0 with X[0..k, 0..k] = I_k,  x ≥ 0`.
#[derive(Clone, Debug)]
pub struct ConeProblem {
    pub n: usize,
    pub k: usize,
    pub p: usize,
    pub constraints: Arc<Constraints>,
    pub coupling: Arc<SparseMatrix>,
    pub b: DVector<f64>,
    pub objective: Objective,
    pub family: Family,
    pub init: Option<InitialPoint>,
}

impl ConeProblem {
    pub fn new(
        n: usize,
        k: usize,
        p: usize,
        constraints: Constraints,
        coupling: SparseMatrix,
        b: DVector<f64>,
        objective: Objective,
    ) -> Result<Self, ModelError> {
        let prob = Self {
            n,
            k,
            p,
            constraints: Arc::new(constraints),
            coupling: Arc::new(coupling),
            b,
            objective,
            family: Family::General,
            init: None,
        };
        prob.validate()?;
        Ok(prob)
    }

    pub fn with_family(mut self, family: Family) -> Self {
        self.family = family;
        self
    }

    pub fn with_init(mut self, init: InitialPoint) -> Self {
        self.init = Some(init);
        self
    }

    pub fn m(&self) -> usize {
        self.constraints.len()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.k > self.n {
            return Err(ModelError::Invalid(format!(
                "fixed block k = {} exceeds order n = {}",
                self.k, self.n
            )));
        }
        if self.constraints.order() != self.n {
            return Err(ModelError::Dimension(format!(
                "constraints have order {}, problem order {}",
                self.constraints.order(),
                self.n
            )));
        }
        let m = self.m();
        if self.b.len() != m || self.coupling.nrows() != m {
            return Err(ModelError::Dimension(format!(
                "b has length {}, B has {} rows, but m = {m}",
                self.b.len(),
                self.coupling.nrows()
            )));
        }
        if self.coupling.ncols() != self.p {
            return Err(ModelError::Dimension(format!(
                "B has {} columns, p = {}",
                self.coupling.ncols(),
                self.p
            )));
        }
        match &self.objective {
            Objective::Linear { c_mat, c_vec } => {
                check_objective_dims(c_mat, c_vec, self.n, self.p)?;
            }
            Objective::QuadraticResidual {
                terms,
                c_mat,
                c_vec,
            } => {
                check_objective_dims(c_mat, c_vec, self.n, self.p)?;
                if terms.iter().any(|t| t.g.max_index().is_some_and(|i| i >= self.n)) {
                    return Err(ModelError::Dimension("residual term index out of range".into()));
                }
            }
            Objective::Custom(_) => {}
        }
        if let Some(init) = &self.init {
            if init.r.nrows() != self.n - self.k || init.y.len() != self.p {
                return Err(ModelError::Dimension("initial point has wrong shape".into()));
            }
        }
        Ok(())
    }

    /// Fixed-block factor `R̂ = [I_{k,r}; R]`.
    pub fn rhat(&self, r: &DMatrix<f64>) -> DMatrix<f64> {
        let cols = r.ncols();
        let mut out = DMatrix::zeros(self.n, cols);
        for i in 0..self.k.min(cols) {
            out[(i, i)] = 1.0;
        }
        out.view_mut((self.k, 0), (self.n - self.k, cols)).copy_from(r);
        out
    }
}

fn check_objective_dims(c_mat: &SymMatrix, c_vec: &DVector<f64>, n: usize, p: usize) -> Result<(), ModelError> {
    if c_mat.order() != n || c_mat.max_index().is_some_and(|i| i >= n) {
        return Err(ModelError::Dimension(format!(
            "objective matrix order {} does not match n = {n}",
            c_mat.order()
        )));
    }
    if c_vec.len() != p {
        return Err(ModelError::Dimension(format!(
            "objective vector length {} does not match p = {p}",
            c_vec.len()
        )));
    }
    Ok(())
}

fn check_point(prob: &ConeProblem, pt: &FactorPoint) -> Result<(), ModelError> {
    if pt.r.nrows() != prob.n - prob.k || pt.y.nrows() != prob.p || pt.r.ncols() < prob.k {
        return Err(ModelError::Dimension(format!(
            "point is ({}x{}, {}x{}), problem expects ({}xr with r >= {}, {})",
            pt.r.nrows(),
            pt.r.ncols(),
            pt.y.nrows(),
            pt.y.ncols(),
            prob.n - prob.k,
            prob.k,
            prob.p
        )));
    }
    Ok(())
}

/// `𝒦(R̂R̂ᵀ, y∘y) = 𝒜(R̂R̂ᵀ) + B(y∘y)`.
pub fn apply_k(prob: &ConeProblem, pt: &FactorPoint) -> Result<DVector<f64>, ModelError> {
    check_point(prob, pt)?;
    let rhat = prob.rhat(&pt.r);
    Ok(prob.constraints.apply_factor(&rhat) + prob.coupling.mul(&pt.x()))
}

/// `𝒢(R, y) = 𝒦(R̂R̂ᵀ, y∘y) − b` against an explicit right-hand side.
pub fn residual_with(
    prob: &ConeProblem,
    b: &DVector<f64>,
    pt: &FactorPoint,
) -> Result<DVector<f64>, ModelError> {
    Ok(apply_k(prob, pt)? - b)
}

/// `𝒢(R, y)` against the problem's own `b`.
pub fn residual_g(prob: &ConeProblem, pt: &FactorPoint) -> Result<DVector<f64>, ModelError> {
    residual_with(prob, &prob.b, pt)
}

/// Objective value and gradient handles `(C, c)` at `(R̂R̂ᵀ, y∘y)`.
pub fn objective_value_grad(prob: &ConeProblem, pt: &FactorPoint) -> Result<ObjectiveEval, ModelError> {
    check_point(prob, pt)?;
    prob.objective.evaluate(&prob.rhat(&pt.r), &pt.x())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn sphere2() -> ConeProblem {
        // n = 2, k = 0, p = 1, A₁ = I₂, B = [1].
        let cons = Constraints::new(2, vec![SymMatrix::identity(2)]).unwrap();
        let bm = SparseMatrix::identity(1);
        let obj = Objective::Linear {
            c_mat: Arc::new(SymMatrix::zeros(2)),
            c_vec: DVector::zeros(1),
        };
        ConeProblem::new(2, 0, 1, cons, bm, DVector::from_element(1, 5.0), obj).unwrap()
    }

    #[test]
    fn apply_k_small_example() {
        let prob = sphere2();
        let pt = FactorPoint::new(DMatrix::from_column_slice(2, 1, &[1.0, 0.0]), DVector::from_element(1, 2.0));
        let k = apply_k(&prob, &pt).unwrap();
        assert_eq!(k.as_slice(), &[5.0]);
        assert_eq!(residual_g(&prob, &pt).unwrap()[0], 0.0);
    }

    #[test]
    fn apply_k_without_constraints_is_empty() {
        let obj = Objective::Linear {
            c_mat: Arc::new(SymMatrix::zeros(3)),
            c_vec: DVector::zeros(0),
        };
        let prob = ConeProblem::new(
            3,
            0,
            0,
            Constraints::empty(3),
            SparseMatrix::zeros(0, 0),
            DVector::zeros(0),
            obj,
        )
        .unwrap();
        let pt = FactorPoint::new(DMatrix::from_element(3, 2, 1.0), DVector::zeros(0));
        assert_eq!(apply_k(&prob, &pt).unwrap().len(), 0);
    }

    #[test]
    fn residual_shifts_with_b() {
        let mut prob = sphere2();
        let pt = FactorPoint::new(DMatrix::from_column_slice(2, 1, &[0.3, -1.1]), DVector::from_element(1, 0.7));
        let g0 = residual_g(&prob, &pt).unwrap();
        prob.b[0] += 0.25;
        let g1 = residual_g(&prob, &pt).unwrap();
        assert_relative_eq!(g1[0], g0[0] - 0.25, epsilon = 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let prob = sphere2();
        let pt = FactorPoint::new(DMatrix::zeros(3, 1), DVector::zeros(1));
        assert!(matches!(apply_k(&prob, &pt), Err(ModelError::Dimension(_))));
    }

    #[test]
    fn asymmetric_triplets_rejected() {
        let err = SymMatrix::from_triplets(3, &[(0, 1, 1.0), (1, 0, 2.0)]).unwrap_err();
        assert!(matches!(err, ModelError::Asymmetric { .. }));
        let ok = SymMatrix::from_triplets(3, &[(0, 1, 1.0), (1, 0, 1.0), (2, 0, 4.0)]).unwrap();
        let d = ok.to_dense();
        assert_eq!(d[(1, 0)], 1.0);
        assert_eq!(d[(0, 2)], 4.0);
        assert_eq!(d, d.transpose());
    }

    #[test]
    fn linear_objective_with_zero_rows_only_sees_fixed_block() {
        // k = 2 fixed block, C₁₁ = [[1, 2], [2, 3]]: value = tr C₁₁ = 4.
        let c = SymMatrix::from_upper(4, [(0, 0, 1.0), (0, 1, 2.0), (1, 1, 3.0), (2, 3, 7.0)]);
        let obj = Objective::Linear {
            c_mat: Arc::new(c),
            c_vec: DVector::from_element(1, 5.0),
        };
        let prob = ConeProblem::new(
            4,
            2,
            1,
            Constraints::empty(4),
            SparseMatrix::zeros(0, 1),
            DVector::zeros(0),
            obj,
        )
        .unwrap();
        let pt = FactorPoint::new(DMatrix::zeros(2, 3), DVector::zeros(1));
        let ev = objective_value_grad(&prob, &pt).unwrap();
        assert_relative_eq!(ev.value, 4.0);
    }

    #[test]
    fn quadratic_residual_zero_at_exact_fit() {
        let obj = Objective::QuadraticResidual {
            terms: vec![ResidualTerm {
                g: SparseVec::from_pairs([(0, 1.0)]),
                d: 1.0,
            }],
            c_mat: SymMatrix::zeros(2),
            c_vec: DVector::zeros(0),
        };
        let prob = ConeProblem::new(
            2,
            0,
            0,
            Constraints::empty(2),
            SparseMatrix::zeros(0, 0),
            DVector::zeros(0),
            obj,
        )
        .unwrap();
        let pt = FactorPoint::new(DMatrix::from_column_slice(2, 1, &[1.0, 0.5]), DVector::zeros(0));
        let ev = objective_value_grad(&prob, &pt).unwrap();
        assert_eq!(ev.value, 0.0);
        assert!(ev.grad.mat.is_zero());
    }

    #[test]
    fn frobenius_matches_dense() {
        let mut a = SymMatrix::from_upper(5, [(0, 0, 1.5), (0, 3, -2.0), (2, 4, 0.5), (4, 4, 3.0)]);
        a.push_rank_one(-1.0, SparseVec::from_pairs((0..5).map(|i| (i, 1.0))));
        a.push_rank_one(0.7, SparseVec::from_pairs([(1, 2.0), (3, -1.0)]));
        let d = a.to_dense();
        assert_relative_eq!(a.frobenius_sq(), d.norm_squared(), max_relative = 1e-13);
        assert_relative_eq!(a.trace(), d.trace(), max_relative = 1e-13);
    }

    #[test]
    fn product_rows_match_dense_product() {
        let mut a = SymMatrix::from_upper(6, [(0, 2, 1.0), (3, 3, -2.0), (1, 5, 0.25)]);
        a.push_rank_one(2.0, SparseVec::from_pairs([(4, 1.0), (0, -1.0)]));
        let v = DMatrix::from_fn(6, 3, |i, j| (i * 3 + j) as f64 * 0.1 - 0.4);
        let dense = a.to_dense() * &v;
        let rows = a.product_rows(&v, 2);
        for (row, vals) in &rows {
            assert!(*row >= 2);
            for c in 0..3 {
                assert_relative_eq!(vals[c], dense[(*row, c)], epsilon = 1e-14);
            }
        }
        for i in 2..6 {
            if dense.row(i).norm() > 0.0 {
                assert!(rows.iter().any(|(r, _)| *r == i));
            }
        }
    }
}
