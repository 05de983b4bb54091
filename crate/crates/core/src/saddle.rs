//! Second-order escape: the most negative curvature value `ξ` of the slack
//! pair `(W, s)` and the rank/support-augmenting Armijo step.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::eig::smallest_eigenpair;
use crate::error::GeometryError;
use crate::geometry::{newton_retract, FactorPoint, Tangent};
use crate::linsolve::GramSolver;
use crate::model::{objective_value_grad, ConeProblem, Gradient, ObjectiveEval, SymMatrix};

pub const ARMIJO_C: f64 = 0.5;
pub const ARMIJO_DELTA: f64 = 0.5;
pub const ESCAPE_MAX_BACKTRACKS: usize = 30;
/// Orders up to which a stagnated Lanczos run falls back to dense.
pub const DENSE_FALLBACK_MAX: usize = 2000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EscapeKind {
    /// Unit eigenvector of `W`.
    Matrix(Vec<f64>),
    /// Coordinate of `s`.
    Vector(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EscapeDirection {
    pub xi: f64,
    pub kind: EscapeKind,
    pub tau: usize,
}

/// `Z = C − 𝒜*(λ)` as a sparse-plus-low-rank operator.
pub fn slack_matrix(prob: &ConeProblem, c_mat: &SymMatrix, lambda: &DVector<f64>) -> SymMatrix {
    let mut terms: Vec<(f64, &SymMatrix)> = vec![(1.0, c_mat)];
    terms.extend(lambda.iter().zip(prob.constraints.mats()).map(|(l, a)| (-*l, a)));
    SymMatrix::combine(prob.n, &terms)
}

/// `s = c − Bᵀλ`.
pub fn slack_vector(prob: &ConeProblem, c_vec: &DVector<f64>, lambda: &DVector<f64>) -> DVector<f64> {
    if prob.m() == 0 {
        return c_vec.clone();
    }
    c_vec - prob.coupling.tr_mul(lambda)
}

/// Product with the trailing block `W = J Z Jᵀ` on tall blocks of `n − k` rows.
pub fn trailing_block_mul(z: &SymMatrix, k: usize, v: &DMatrix<f64>) -> DMatrix<f64> {
    let padded = {
        let mut p = DMatrix::zeros(k + v.nrows(), v.ncols());
        p.view_mut((k, 0), (v.nrows(), v.ncols())).copy_from(v);
        p
    };
    z.mul_dense(&padded).rows(k, v.nrows()).into_owned()
}

/// Minimizer of `⟨W, HHᵀ⟩ + ⟨s, h∘h⟩` over unit `(H, h)`, realized on a single
/// spectral direction or coordinate. Ties go to the matrix direction.
pub fn escape_direction_from(
    w_dim: usize,
    w_op: &dyn Fn(&DMatrix<f64>) -> DMatrix<f64>,
    s: &DVector<f64>,
    tau: usize,
    seed: u64,
) -> Result<EscapeDirection, GeometryError> {
    let matrix = if w_dim > 0 {
        Some(smallest_eigenpair(w_dim, w_op, seed, DENSE_FALLBACK_MAX)?)
    } else {
        None
    };
    let vector = s
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(j, &v)| (j, v));
    let tau = tau.max(1);
    match (matrix, vector) {
        (Some(p), Some((j, sj))) if sj < p.value => Ok(EscapeDirection {
            xi: sj,
            kind: EscapeKind::Vector(j),
            tau,
        }),
        (Some(p), _) => Ok(EscapeDirection {
            xi: p.value,
            kind: EscapeKind::Matrix(p.vector.as_slice().to_vec()),
            tau,
        }),
        (None, Some((j, sj))) => Ok(EscapeDirection {
            xi: sj,
            kind: EscapeKind::Vector(j),
            tau,
        }),
        (None, None) => Ok(EscapeDirection {
            xi: 0.0,
            kind: EscapeKind::Vector(0),
            tau,
        }),
    }
}

/// `ξ = min(λ_min(C₂₂ − Ã*(λ)), min_j (c − Bᵀλ)_j)` and its direction.
pub fn escape_direction(
    prob: &ConeProblem,
    grad: &Gradient,
    lambda: &DVector<f64>,
    tau: usize,
    seed: u64,
) -> Result<EscapeDirection, GeometryError> {
    let z = slack_matrix(prob, &grad.mat, lambda);
    let s = slack_vector(prob, &grad.vec, lambda);
    let k = prob.k;
    let op = |v: &DMatrix<f64>| trailing_block_mul(&z, k, v);
    escape_direction_from(prob.n - k, &op, &s, tau, seed)
}

#[derive(Clone, Debug)]
pub struct EscapeOutcome {
    pub point: FactorPoint,
    pub eval: Option<ObjectiveEval>,
    pub t: f64,
    pub f_new: f64,
    pub backtracks: usize,
}

/// The augmented point `([R, 0_τ], [Y, 0])` and the unit direction
/// `([0, H], [0, h])` with `H = v·e₁ᵀ` or `h = e_j`.
pub fn augment(pt: &FactorPoint, dir: &EscapeDirection) -> (FactorPoint, Tangent) {
    let (rows, r) = pt.r.shape();
    let (p, c) = pt.y.shape();
    let tau = dir.tau.max(1);
    let mut s = DMatrix::zeros(rows, r + tau);
    s.columns_mut(0, r).copy_from(&pt.r);
    let mut y = DMatrix::zeros(p, c + 1);
    y.columns_mut(0, c).copy_from(&pt.y);
    let mut support = pt.support.clone();
    let mut u = DMatrix::zeros(rows, r + tau);
    let mut v = DMatrix::zeros(p, c + 1);
    match &dir.kind {
        EscapeKind::Matrix(vec) => {
            for (i, x) in vec.iter().enumerate() {
                u[(i, r)] = *x;
            }
        }
        EscapeKind::Vector(j) => {
            v[(*j, c)] = 1.0;
            support[*j] = true;
        }
    }
    (FactorPoint { r: s, y, support }, Tangent { h: u, v })
}

/// Armijo search `t = δ^i`, accepting when `f_new ≤ f_old + c·ξ·t²`. Returns
/// the input unchanged when `ξ ≥ 0`.
pub fn escape_step(
    prob: &ConeProblem,
    b: &DVector<f64>,
    pt: &FactorPoint,
    dir: &EscapeDirection,
    f_old: f64,
    solver: &mut GramSolver,
) -> Result<EscapeOutcome, GeometryError> {
    if dir.xi >= 0.0 {
        return Ok(EscapeOutcome {
            point: pt.clone(),
            eval: None,
            t: 0.0,
            f_new: f_old,
            backtracks: 0,
        });
    }
    let (aug, d) = augment(pt, dir);
    let mut t = 1.0;
    for backtracks in 0..=ESCAPE_MAX_BACKTRACKS {
        if let Ok(mut trial) = newton_retract(prob, b, &aug, &d.scaled(t), solver) {
            trial.collapse_y();
            if let Ok(ev) = objective_value_grad(prob, &trial) {
                if ev.value.is_finite() && ev.value <= f_old + ARMIJO_C * dir.xi * t * t {
                    return Ok(EscapeOutcome {
                        f_new: ev.value,
                        point: trial,
                        eval: Some(ev),
                        t,
                        backtracks,
                    });
                }
            }
        }
        t *= ARMIJO_DELTA;
    }
    Err(GeometryError::LineSearchFailed {
        backtracks: ESCAPE_MAX_BACKTRACKS,
    })
}
