//! Geometry of the factorized feasible set
//! `{(R, Y) : 𝒦(R̂R̂ᵀ, diag(YYᵀ)) = b}`.
//!
//! The vector block is stored as a `p × c` matrix `Y` with `x = diag(YYᵀ)`.
//! Ordinary iterates have `c = 1` (so `x = y∘y`); escape steps temporarily
//! carry an extra column.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::GeometryError;
use crate::linsolve::{pcg, AssembledOperator, GramSolver, LinearOperator, PreconditionerState, SparseSym};
use crate::model::{objective_value_grad, residual_with, ConeProblem, Gradient, SymMatrix};

pub const RETRACTION_TOL: f64 = 1e-8;
/// Residuals below `POLISH_FLOOR·tol` skip the final polishing correction.
pub const POLISH_FLOOR: f64 = 1e-4;
pub const MAX_CORRECTIONS: usize = 50;

/// An iterate of the factorized problem.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorPoint {
    /// `(n−k) × r` free block of `R̂`.
    pub r: DMatrix<f64>,
    /// `p × c` vector block, `x = diag(YYᵀ)`.
    pub y: DMatrix<f64>,
    pub support: Vec<bool>,
}

impl FactorPoint {
    /// Point with a single-column `y`; the support is every index.
    pub fn new(r: DMatrix<f64>, y: DVector<f64>) -> Self {
        let p = y.len();
        Self {
            r,
            y: DMatrix::from_column_slice(p, 1, y.as_slice()),
            support: vec![true; p],
        }
    }

    pub fn from_blocks(r: DMatrix<f64>, y: DMatrix<f64>, support: Vec<bool>) -> Self {
        let mut pt = Self { r, y, support };
        pt.enforce_support();
        pt
    }

    pub fn rank(&self) -> usize {
        self.r.ncols()
    }

    pub fn support_size(&self) -> usize {
        self.support.iter().filter(|s| **s).count()
    }

    /// `x = diag(YYᵀ)`.
    pub fn x(&self) -> DVector<f64> {
        DVector::from_iterator(self.y.nrows(), self.y.row_iter().map(|r| r.norm_squared()))
    }

    /// `y` with `x = y∘y`; for multi-column `Y` this is `√diag(YYᵀ)`.
    pub fn y_vec(&self) -> DVector<f64> {
        if self.y.ncols() == 1 {
            self.y.column(0).into_owned()
        } else {
            self.x().map(f64::sqrt)
        }
    }

    /// Replaces `Y` by the single column `√diag(YYᵀ)`.
    pub fn collapse_y(&mut self) {
        if self.y.ncols() != 1 {
            let y = self.y_vec();
            self.y = DMatrix::from_column_slice(y.len(), 1, y.as_slice());
        }
    }

    pub fn enforce_support(&mut self) {
        for (j, keep) in self.support.iter().enumerate() {
            if !keep {
                self.y.row_mut(j).fill(0.0);
            }
        }
    }

    pub fn rhat(&self, prob: &ConeProblem) -> DMatrix<f64> {
        prob.rhat(&self.r)
    }

    pub fn is_finite(&self) -> bool {
        self.r.iter().chain(self.y.iter()).all(|v| v.is_finite())
    }
}

/// Tangent-space element `(H, V)` matching a point's block shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct Tangent {
    pub h: DMatrix<f64>,
    pub v: DMatrix<f64>,
}

impl Tangent {
    pub fn zeros_like(pt: &FactorPoint) -> Self {
        Self {
            h: DMatrix::zeros(pt.r.nrows(), pt.r.ncols()),
            v: DMatrix::zeros(pt.y.nrows(), pt.y.ncols()),
        }
    }

    pub fn dot(&self, other: &Tangent) -> f64 {
        self.h.dot(&other.h) + self.v.dot(&other.v)
    }

    pub fn norm_sq(&self) -> f64 {
        self.h.norm_squared() + self.v.norm_squared()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn scaled(&self, alpha: f64) -> Tangent {
        Tangent {
            h: &self.h * alpha,
            v: &self.v * alpha,
        }
    }

    /// `self += alpha · other`.
    pub fn axpy(&mut self, alpha: f64, other: &Tangent) {
        self.h += &other.h * alpha;
        self.v += &other.v * alpha;
    }

    pub fn sub(&self, other: &Tangent) -> Tangent {
        Tangent {
            h: &self.h - &other.h,
            v: &self.v - &other.v,
        }
    }
}

/// `ℒ_R(H) = R̂Ĥ₀ᵀ + Ĥ₀R̂ᵀ` with `Ĥ₀ = [0_k; H]`, held in factored form.
#[derive(Clone, Debug)]
pub struct LrOperator {
    rhat: DMatrix<f64>,
    h0: DMatrix<f64>,
}

impl LrOperator {
    /// `⟨A, ℒ_R(H)⟩`.
    pub fn inner(&self, a: &SymMatrix) -> f64 {
        2.0 * a.bilinear(&self.rhat, &self.h0)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let m = &self.rhat * self.h0.transpose();
        &m + m.transpose()
    }
}

fn pad_top(k: usize, h: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(k + h.nrows(), h.ncols());
    out.view_mut((k, 0), (h.nrows(), h.ncols())).copy_from(h);
    out
}

pub fn apply_lr(prob: &ConeProblem, pt: &FactorPoint, h: &DMatrix<f64>) -> LrOperator {
    LrOperator {
        rhat: pt.rhat(prob),
        h0: pad_top(prob.k, h),
    }
}

fn rowwise_dot(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(
        a.nrows(),
        a.row_iter().zip(b.row_iter()).map(|(x, y)| x.dot(&y)),
    )
}

fn dg_at(prob: &ConeProblem, rhat: &DMatrix<f64>, y: &DMatrix<f64>, t: &Tangent) -> DVector<f64> {
    let h0 = pad_top(prob.k, &t.h);
    let mut out = prob.constraints.bilinear_all(rhat, &h0) * 2.0;
    if prob.p > 0 && prob.m() > 0 {
        out += prob.coupling.mul(&(rowwise_dot(y, &t.v) * 2.0));
    }
    out
}

fn dg_adjoint_at(prob: &ConeProblem, rhat: &DMatrix<f64>, y: &DMatrix<f64>, lambda: &DVector<f64>) -> Tangent {
    let mut full = DMatrix::zeros(prob.n, rhat.ncols());
    prob.constraints.adjoint_mul_into(lambda, rhat, &mut full, 2.0);
    let h = full.rows(prob.k, prob.n - prob.k).into_owned();
    let mut v = y.clone();
    if prob.p > 0 {
        let bl = prob.coupling.tr_mul(lambda);
        for (j, mut row) in v.row_iter_mut().enumerate() {
            row *= 2.0 * bl[j];
        }
    }
    Tangent { h, v }
}

/// `D𝒢(H, V) = 𝒦(ℒ_R(H), 2·diag(YVᵀ))`.
pub fn apply_dg(prob: &ConeProblem, pt: &FactorPoint, t: &Tangent) -> DVector<f64> {
    dg_at(prob, &pt.rhat(prob), &pt.y, t)
}

/// `D𝒢*(λ) = (2·J𝒜*(λ)R̂, 2·diag(Bᵀλ)Y)`.
pub fn apply_dg_adjoint(prob: &ConeProblem, pt: &FactorPoint, lambda: &DVector<f64>) -> Tangent {
    dg_adjoint_at(prob, &pt.rhat(prob), &pt.y, lambda)
}

/// `Q = D𝒢·D𝒢*` at a point.
pub struct GramOperator<'a> {
    prob: &'a ConeProblem,
    rhat: DMatrix<f64>,
    y: DMatrix<f64>,
    x: DVector<f64>,
}

impl<'a> GramOperator<'a> {
    pub fn new(prob: &'a ConeProblem, pt: &FactorPoint) -> Self {
        Self {
            prob,
            rhat: pt.rhat(prob),
            y: pt.y.clone(),
            x: pt.x(),
        }
    }

    /// Nonzero rows of `J A_i R̂` for every constraint.
    fn products(&self) -> Vec<Vec<(usize, Vec<f64>)>> {
        let k = self.prob.k;
        let mats = self.prob.constraints.mats();
        if mats.len() >= 64 {
            mats.par_iter().map(|a| a.product_rows(&self.rhat, k)).collect()
        } else {
            mats.iter().map(|a| a.product_rows(&self.rhat, k)).collect()
        }
    }

    fn vector_term_diag(&self) -> DVector<f64> {
        let m = self.prob.m();
        let b = &self.prob.coupling;
        DVector::from_iterator(
            m,
            (0..m).map(|i| 4.0 * b.row(i).iter().map(|&(l, v)| v * v * self.x[l]).sum::<f64>()),
        )
    }
}

impl LinearOperator for GramOperator<'_> {
    fn dim(&self) -> usize {
        self.prob.m()
    }

    fn apply(&self, lambda: &DVector<f64>) -> DVector<f64> {
        let t = dg_adjoint_at(self.prob, &self.rhat, &self.y, lambda);
        dg_at(self.prob, &self.rhat, &self.y, &t)
    }
}

impl AssembledOperator for GramOperator<'_> {
    fn diagonal(&self) -> DVector<f64> {
        let prods = self.products();
        let mut d = self.vector_term_diag();
        for (i, rows) in prods.iter().enumerate() {
            d[i] += 4.0 * rows.iter().map(|(_, v)| v.iter().map(|a| a * a).sum::<f64>()).sum::<f64>();
        }
        d
    }

    /// Sparse assembly: only pairs sharing a row of `J A R̂` (or a column of
    /// `B`) contribute.
    fn assemble(&self) -> SparseSym {
        let m = self.prob.m();
        let prods = self.products();
        let mut by_row: BTreeMap<usize, Vec<(usize, &[f64])>> = BTreeMap::new();
        for (i, rows) in prods.iter().enumerate() {
            for (row, vals) in rows {
                by_row.entry(*row).or_default().push((i, vals.as_slice()));
            }
        }
        let mut upper: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); m];
        for list in by_row.values() {
            for (a, &(i, vi)) in list.iter().enumerate() {
                for &(j, vj) in &list[a..] {
                    let d: f64 = vi.iter().zip(vj).map(|(p, q)| p * q).sum();
                    *upper[i].entry(j).or_insert(0.0) += 4.0 * d;
                }
            }
        }
        let b = &self.prob.coupling;
        for l in 0..b.ncols() {
            let col = b.col(l);
            for (a, &(i, vi)) in col.iter().enumerate() {
                for &(j, vj) in &col[a..] {
                    *upper[i].entry(j).or_insert(0.0) += 4.0 * vi * vj * self.x[l];
                }
            }
        }
        SparseSym::from_upper(m, upper)
    }
}

/// One capped PCG solve of `Qλ = rhs` with the state's preconditioner.
/// Hitting the cap is reported as `MaxIterReached`.
pub fn solve_multiplier(
    prob: &ConeProblem,
    pt: &FactorPoint,
    rhs: &DVector<f64>,
    pc: &PreconditionerState,
) -> Result<(DVector<f64>, usize), GeometryError> {
    if prob.m() == 0 {
        return Ok((DVector::zeros(0), 0));
    }
    let op = GramOperator::new(prob, pt);
    let pre = pc.preconditioner(&op);
    let res = pcg(&op, rhs, pre.as_ref(), crate::linsolve::PCG_TOL, pc.t_cg, None);
    if res.converged {
        Ok((res.solution, res.iters))
    } else {
        Err(GeometryError::MaxIterReached { iters: res.iters })
    }
}

/// `∇f_r = (2·J C R̂, 2·diag(c) Y)`.
pub fn euclidean_grad(prob: &ConeProblem, pt: &FactorPoint, g: &Gradient) -> Tangent {
    let rhat = pt.rhat(prob);
    let full = g.mat.mul_dense(&rhat) * 2.0;
    let h = full.rows(prob.k, prob.n - prob.k).into_owned();
    let mut v = pt.y.clone();
    for (j, mut row) in v.row_iter_mut().enumerate() {
        row *= 2.0 * g.vec[j];
    }
    Tangent { h, v }
}

/// Riemannian gradient together with its multiplier.
#[derive(Clone, Debug)]
pub struct RiemannianGrad {
    pub grad: Tangent,
    pub lambda: DVector<f64>,
    pub egrad: Tangent,
}

/// `grad = ∇f_r − D𝒢*(λ)` with `Qλ = D𝒢(∇f_r)`, for a known gradient.
pub fn riemannian_grad_with(
    prob: &ConeProblem,
    pt: &FactorPoint,
    g: &Gradient,
    solver: &mut GramSolver,
) -> RiemannianGrad {
    let egrad = euclidean_grad(prob, pt, g);
    if prob.m() == 0 {
        return RiemannianGrad {
            grad: egrad.clone(),
            lambda: DVector::zeros(0),
            egrad,
        };
    }
    let op = GramOperator::new(prob, pt);
    let rhs = apply_dg(prob, pt, &egrad);
    let lambda = solver.solve(&op, &rhs);
    let normal = apply_dg_adjoint(prob, pt, &lambda);
    RiemannianGrad {
        grad: egrad.sub(&normal),
        lambda,
        egrad,
    }
}

/// Riemannian gradient at `pt`, evaluating the objective first.
pub fn riemannian_grad(
    prob: &ConeProblem,
    pt: &FactorPoint,
    solver: &mut GramSolver,
) -> Result<(Tangent, DVector<f64>), GeometryError> {
    let ev = objective_value_grad(prob, pt)?;
    let rg = riemannian_grad_with(prob, pt, &ev.grad, solver);
    Ok((rg.grad, rg.lambda))
}

/// Orthogonal projection onto `ker D𝒢`.
pub fn project_tangent(prob: &ConeProblem, pt: &FactorPoint, d: &Tangent, solver: &mut GramSolver) -> Tangent {
    if prob.m() == 0 {
        return d.clone();
    }
    let op = GramOperator::new(prob, pt);
    let mu = solver.solve(&op, &apply_dg(prob, pt, d));
    d.sub(&apply_dg_adjoint(prob, pt, &mu))
}

/// Newton retraction of `pt + step` onto `𝒦 = b` by Gauss–Newton
/// corrections `v ← v − D𝒢(v)*[Q(v)⁻¹𝒢(v)]`.
pub fn newton_retract(
    prob: &ConeProblem,
    b: &DVector<f64>,
    pt: &FactorPoint,
    step: &Tangent,
    solver: &mut GramSolver,
) -> Result<FactorPoint, GeometryError> {
    let mut v = FactorPoint {
        r: &pt.r + &step.h,
        y: &pt.y + &step.v,
        support: pt.support.clone(),
    };
    v.enforce_support();
    if prob.m() == 0 {
        return Ok(v);
    }
    let tol = RETRACTION_TOL * (1.0 + b.norm());
    let blowup = 1e8 * (1.0 + b.norm());
    let mut corrections = 0;
    let mut polished: Option<(FactorPoint, f64)> = None;
    loop {
        let g = residual_with(prob, b, &v)?;
        let gn = g.norm();
        if let Some((prev, prev_gn)) = polished {
            // One extra correction past tolerance keeps feasibility noise far
            // below the decrease the line searches ask for.
            return Ok(if gn < prev_gn { v } else { prev });
        }
        if gn <= tol {
            if gn <= POLISH_FLOOR * tol || corrections == MAX_CORRECTIONS {
                return Ok(v);
            }
            polished = Some((v.clone(), gn));
        }
        if corrections == MAX_CORRECTIONS || !gn.is_finite() || gn > blowup {
            return Err(GeometryError::RetractionDiverged {
                corrections,
                residual: gn,
            });
        }
        let op = GramOperator::new(prob, &v);
        // Normalized so the PCG tolerance is relative to the residual.
        let mu = solver.solve(&op, &(&g / gn)) * gn;
        let corr = apply_dg_adjoint(prob, &v, &mu);
        v.r -= &corr.h;
        v.y -= &corr.v;
        corrections += 1;
    }
}
