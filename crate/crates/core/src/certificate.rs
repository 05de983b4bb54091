//! Dual certificate `(λ, Λ, S, s)` for a primal point, the scaled KKT residues,
//! and the augmented-Lagrangian dual refinement.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::driver::{solve, SolveOptions, SolveStatus};
use crate::eig::{negative_part_sq_dense, negative_part_sq_lanczos};
use crate::error::ModelError;
use crate::geometry::{FactorPoint, GramOperator};
use crate::linsolve::{AssembledOperator, ExactCholesky};
use crate::model::{
    apply_k, objective_value_grad, ConeProblem, Constraints, CustomObjective, Gradient, Objective, ObjectiveEval,
    SparseMatrix, SymMatrix,
};
use crate::saddle::{slack_matrix, slack_vector};

/// Orders above which `‖Π₋(S)‖` is estimated by deflated Lanczos.
pub const DENSE_RD_MAX: usize = 2000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RdMethod {
    Dense,
    Lanczos,
    /// Lanczos stagnated or hit its pair cap; `rd` is a lower estimate of the
    /// negative part and flagged as approximate.
    LanczosApproximate,
}

#[derive(Clone, Debug)]
pub struct DualCertificate {
    pub lambda: DVector<f64>,
    pub big_lambda: DMatrix<f64>,
    /// `S = C − 𝒜*(λ) − I_{n,k} Λ I_{n,k}ᵀ`.
    pub s_op: SymMatrix,
    pub s: DVector<f64>,
    pub rp: f64,
    pub rd: f64,
    pub rc: f64,
    pub rd_method: RdMethod,
}

impl DualCertificate {
    pub fn max_residue(&self) -> f64 {
        self.rp.max(self.rd).max(self.rc)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Residues {
    pub rp: f64,
    pub rd: f64,
    pub rc: f64,
    pub rd_method: RdMethod,
}

/// `Λ = sym(Z₁₁ + R[:, :k]ᵀ Z₂₁)` with `Z = C − 𝒜*(λ)`.
pub fn block_multiplier(prob: &ConeProblem, pt: &FactorPoint, z: &SymMatrix) -> DMatrix<f64> {
    let k = prob.k;
    if k == 0 {
        return DMatrix::zeros(0, 0);
    }
    let e = DMatrix::from_fn(prob.n, k, |i, j| if i == j { 1.0 } else { 0.0 });
    let ze = z.mul_dense(&e);
    let lam = ze.rows(0, k) + pt.r.columns(0, k).transpose() * ze.rows(k, prob.n - k);
    (&lam + lam.transpose()) * 0.5
}

/// Builds the certificate at `pt` for multiplier `λ` and computes residues
/// against the problem's own (unperturbed) `b`.
pub fn build_certificate(
    prob: &ConeProblem,
    pt: &FactorPoint,
    lambda: &DVector<f64>,
    grad: &Gradient,
) -> Result<DualCertificate, ModelError> {
    let z = slack_matrix(prob, &grad.mat, lambda);
    let big_lambda = block_multiplier(prob, pt, &z);
    let mut shift = Vec::new();
    for i in 0..prob.k {
        for j in i..prob.k {
            shift.push((i, j, -big_lambda[(i, j)]));
        }
    }
    let s_op = SymMatrix::combine(prob.n, &[(1.0, &z), (1.0, &SymMatrix::from_upper(prob.n, shift))]);
    let s = slack_vector(prob, &grad.vec, lambda);
    let mut cert = DualCertificate {
        lambda: lambda.clone(),
        big_lambda,
        s_op,
        s,
        rp: 0.0,
        rd: 0.0,
        rc: 0.0,
        rd_method: RdMethod::Dense,
    };
    let res = kkt_residues(prob, pt, &cert, grad)?;
    cert.rp = res.rp;
    cert.rd = res.rd;
    cert.rc = res.rc;
    cert.rd_method = res.rd_method;
    Ok(cert)
}

/// Certificate for `λ` with the objective gradient evaluated at `pt`.
pub fn certificate_at(prob: &ConeProblem, pt: &FactorPoint, lambda: &DVector<f64>) -> Result<DualCertificate, ModelError> {
    let ev = objective_value_grad(prob, pt)?;
    build_certificate(prob, pt, lambda, &ev.grad)
}

/// Scaled primal infeasibility, dual infeasibility and complementarity.
pub fn kkt_residues(
    prob: &ConeProblem,
    pt: &FactorPoint,
    cert: &DualCertificate,
    grad: &Gradient,
) -> Result<Residues, ModelError> {
    let k = prob.k;
    let rhat = pt.rhat(prob);
    let kx = apply_k(prob, pt)?;
    let top = rhat.rows(0, k);
    let block_err = (&top * top.transpose() - DMatrix::<f64>::identity(k, k)).norm_squared();
    let rp = ((&kx - &prob.b).norm_squared() + block_err).sqrt() / (1.0 + (prob.b.norm_squared() + k as f64).sqrt());

    let c_norm_sq = grad.mat.frobenius_sq() + grad.vec.norm_squared();
    let dual_scale = 1.0 + c_norm_sq.sqrt();
    let (neg_mat, method) = if prob.n <= DENSE_RD_MAX {
        (negative_part_sq_dense(&cert.s_op.to_dense()), RdMethod::Dense)
    } else {
        let op = |v: &DMatrix<f64>| cert.s_op.mul_dense(v);
        let thresh = 1e-12 * c_norm_sq.sqrt().max(1.0);
        let (v, exact) = negative_part_sq_lanczos(prob.n, &op, thresh, 0x5eed, 50);
        (v, if exact { RdMethod::Lanczos } else { RdMethod::LanczosApproximate })
    };
    let neg_vec: f64 = cert.s.iter().filter(|v| **v < 0.0).map(|v| v * v).sum();
    let rd = (neg_mat + neg_vec).sqrt() / dual_scale;
    let comp = cert.s_op.quad(&rhat) + cert.s.dot(&pt.x());
    let rc = comp.abs() / dual_scale;
    Ok(Residues {
        rp,
        rd,
        rc,
        rd_method: method,
    })
}

/// Metric for the refinement penalty `½‖𝒦 − b‖²_M`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineMetric {
    /// `M = Q⁻¹` at the solver output.
    GramInverse,
    Identity,
}

enum Metric {
    Gram(ExactCholesky),
    Identity,
}

impl Metric {
    fn apply(&self, r: &DVector<f64>) -> DVector<f64> {
        match self {
            Metric::Gram(f) => f.solve(r),
            Metric::Identity => r.clone(),
        }
    }
}

/// `⟨C*, X⟩ + ⟨c*, x⟩ − ⟨λ⁰, 𝒦 − b⟩ + ½‖𝒦 − b‖²_M` over the cone alone.
struct RefinementObjective {
    c_mat: Arc<SymMatrix>,
    c_vec: DVector<f64>,
    lambda0: DVector<f64>,
    b: DVector<f64>,
    constraints: Arc<Constraints>,
    coupling: Arc<SparseMatrix>,
    metric: Arc<Metric>,
}

impl fmt::Debug for RefinementObjective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "RefinementObjective(m = {})", self.lambda0.len())
    }
}

impl CustomObjective for RefinementObjective {
    fn evaluate(&self, rhat: &DMatrix<f64>, x: &DVector<f64>) -> Result<ObjectiveEval, String> {
        let res = self.constraints.apply_factor(rhat) + self.coupling.mul(x) - &self.b;
        let mres = self.metric.apply(&res);
        let value = self.c_mat.quad(rhat) + self.c_vec.dot(x) - self.lambda0.dot(&res) + 0.5 * res.dot(&mres);
        let mu = mres - &self.lambda0;
        let n = self.c_mat.order();
        let mat = SymMatrix::combine(n, &[(1.0, &self.c_mat), (1.0, &self.constraints.adjoint(&mu))]);
        let vec = &self.c_vec + self.coupling.tr_mul(&mu);
        if !value.is_finite() {
            return Err("refinement objective is not finite".into());
        }
        Ok(ObjectiveEval {
            value,
            grad: Gradient {
                mat: Arc::new(mat),
                vec,
            },
        })
    }
}

#[derive(Clone, Debug)]
pub struct RefineOutcome {
    pub lambda: DVector<f64>,
    /// Set when the inner solve failed and `λ⁰` was returned unchanged.
    pub warning: Option<String>,
    pub inner_iterations: usize,
}

/// `λ = λ⁰ − M(𝒦(X̃, x̃) − b)` where `(X̃, x̃)` minimizes the penalized
/// Lagrangian over the cone, solved as an unconstrained factorized problem.
pub fn refine_dual(
    prob: &ConeProblem,
    pt: &FactorPoint,
    lambda0: &DVector<f64>,
    metric: RefineMetric,
    base: &SolveOptions,
) -> RefineOutcome {
    let unchanged = |msg: String| RefineOutcome {
        lambda: lambda0.clone(),
        warning: Some(msg),
        inner_iterations: 0,
    };
    let m = prob.m();
    if m == 0 {
        return RefineOutcome {
            lambda: lambda0.clone(),
            warning: None,
            inner_iterations: 0,
        };
    }
    let metric = match metric {
        RefineMetric::Identity => Metric::Identity,
        RefineMetric::GramInverse => {
            let q = GramOperator::new(prob, pt).assemble();
            match ExactCholesky::factor(&q) {
                Ok(f) => Metric::Gram(f),
                Err(_) => {
                    let sigma = 1e-8 * q.trace().abs().max(1e-300) / m as f64;
                    match ExactCholesky::factor(&q.shifted(sigma)) {
                        Ok(f) => Metric::Gram(f),
                        Err(e) => return unchanged(format!("metric factorization failed: {e}")),
                    }
                }
            }
        }
    };
    let ev = match objective_value_grad(prob, pt) {
        Ok(ev) => ev,
        Err(e) => return unchanged(format!("objective evaluation failed: {e}")),
    };
    let metric = Arc::new(metric);
    let obj = RefinementObjective {
        c_mat: Arc::clone(&ev.grad.mat),
        c_vec: ev.grad.vec.clone(),
        lambda0: lambda0.clone(),
        b: prob.b.clone(),
        constraints: Arc::clone(&prob.constraints),
        coupling: Arc::clone(&prob.coupling),
        metric: Arc::clone(&metric),
    };
    let inner = match ConeProblem::new(
        prob.n,
        prob.k,
        prob.p,
        Constraints::empty(prob.n),
        SparseMatrix::zeros(0, prob.p),
        DVector::zeros(0),
        Objective::Custom(Arc::new(obj)),
    ) {
        Ok(p) => p,
        Err(e) => return unchanged(format!("refinement problem invalid: {e}")),
    };
    let bound = ((prob.k * (prob.k + 1) + 2 * m) as f64).sqrt().ceil() as usize;
    let r = bound.max(pt.rank()).max(prob.k).max(1);
    let mut start_r = DMatrix::zeros(prob.n - prob.k, r);
    start_r.columns_mut(0, pt.rank()).copy_from(&pt.r);
    let start = FactorPoint::from_blocks(start_r, pt.y.clone(), pt.support.clone());
    let mut opts = base.clone();
    opts.eps_g = 1e-7;
    opts.r0 = Some(r);
    opts.refine = false;
    let out = match solve(&inner, &opts, Some(start)) {
        Ok(o) => o,
        Err(e) => return unchanged(format!("inner solve failed: {e}")),
    };
    if out.report.status != SolveStatus::Stationary {
        return unchanged(format!("inner solve ended with status {:?}", out.report.status));
    }
    let kx = match apply_k(prob, &out.point) {
        Ok(v) => v,
        Err(e) => return unchanged(format!("inner point invalid: {e}")),
    };
    RefineOutcome {
        lambda: lambda0 - metric.apply(&(kx - &prob.b)),
        warning: None,
        inner_iterations: out.report.iterations,
    }
}

/// `λ⁰ − M·v` with `M = I`: the update rule applied to a given residual.
pub fn identity_update(lambda0: &DVector<f64>, residual: &DVector<f64>) -> DVector<f64> {
    lambda0 - residual
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn lin_prob(n: usize, k: usize, c: SymMatrix, mats: Vec<SymMatrix>, b: Vec<f64>) -> ConeProblem {
        let m = mats.len();
        ConeProblem::new(
            n,
            k,
            0,
            Constraints::new(n, mats).unwrap(),
            SparseMatrix::zeros(m, 0),
            DVector::from_vec(b),
            Objective::Linear {
                c_mat: Arc::new(c),
                c_vec: DVector::zeros(0),
            },
        )
        .unwrap()
    }

    #[test]
    fn no_fixed_block_means_empty_lambda_block() {
        let c = SymMatrix::from_upper(2, [(0, 0, 1.0)]);
        let prob = lin_prob(2, 0, c.clone(), vec![SymMatrix::identity(2)], vec![1.0]);
        let pt = FactorPoint::new(DMatrix::from_column_slice(2, 1, &[0.0, 1.0]), DVector::zeros(0));
        let cert = certificate_at(&prob, &pt, &DVector::from_element(1, 0.0)).unwrap();
        assert_eq!(cert.big_lambda.shape(), (0, 0));
        assert_eq!(cert.s_op.to_dense(), c.to_dense());
        // Optimal: X = e₂e₂ᵀ, λ = 0, S = diag(1, 0).
        assert!(cert.max_residue() < 1e-14);
    }

    #[test]
    fn zero_data_gives_zero_slack() {
        let prob = lin_prob(3, 1, SymMatrix::zeros(3), vec![SymMatrix::identity(3)], vec![2.0]);
        let pt = FactorPoint::new(DMatrix::from_column_slice(2, 1, &[1.0, 0.0]), DVector::zeros(0));
        let cert = certificate_at(&prob, &pt, &DVector::zeros(1)).unwrap();
        assert!(cert.s_op.to_dense().norm() < 1e-15);
        assert_eq!(cert.s.len(), 0);
    }

    #[test]
    fn psd_cost_with_zero_multiplier() {
        let c = SymMatrix::from_upper(2, [(0, 0, 2.0), (1, 1, 1.0)]);
        let prob = lin_prob(2, 0, c, vec![SymMatrix::identity(2)], vec![1.0]);
        let s = 0.5f64.sqrt();
        let pt = FactorPoint::new(DMatrix::from_column_slice(2, 1, &[s, s]), DVector::zeros(0));
        let cert = certificate_at(&prob, &pt, &DVector::zeros(1)).unwrap();
        assert_eq!(cert.rd, 0.0);
        let cnorm = 5.0f64.sqrt();
        assert_relative_eq!(cert.rc, 1.5 / (1.0 + cnorm), epsilon = 1e-14);
    }

    #[test]
    fn identity_update_subtracts() {
        let l = DVector::from_vec(vec![1.0, 2.0]);
        let v = DVector::from_vec(vec![0.5, -1.0]);
        assert_eq!(identity_update(&l, &v).as_slice(), &[0.5, 3.0]);
    }
}
