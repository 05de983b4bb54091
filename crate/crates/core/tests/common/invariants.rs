#![allow(dead_code)]
//! Invariant checks shared by the property suites and the acceptance report.
//! Each returns a description of the violation, if any.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use sdpf::certificate::build_certificate;
use sdpf::geometry::{
    apply_dg, apply_dg_adjoint, euclidean_grad, newton_retract, project_tangent, FactorPoint, GramOperator, RETRACTION_TOL,
};
use sdpf::linsolve::{AssembledOperator, GramSolver, LinearOperator};
use sdpf::model::{apply_k, objective_value_grad, residual_g};
use sdpf::saddle::{escape_direction, slack_matrix, slack_vector};

use super::gen::{build, random_tangent, random_vec, rng_for, Shape};

pub type Check = Result<(), String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Check {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

/// `⟨D𝒢[t], μ⟩ = ⟨t, D𝒢*[μ]⟩` and `⟨𝒜(X), μ⟩ = ⟨X, 𝒜*(μ)⟩` to 1e-12 relative.
pub fn adjoint_consistency(shape: &Shape) -> Check {
    let (prob, pt) = build(shape);
    let mut rng = rng_for(shape, 1);
    let t = random_tangent(&pt, &mut rng);
    let mu = random_vec(prob.m(), &mut rng);
    let dt = apply_dg(&prob, &pt, &t);
    let dmu = apply_dg_adjoint(&prob, &pt, &mu);
    let (lhs, rhs) = (dt.dot(&mu), t.dot(&dmu));
    let scale = (dt.norm() * mu.norm()).max(t.norm() * dmu.norm()).max(f64::MIN_POSITIVE);
    ensure((lhs - rhs).abs() <= 1e-12 * scale, || format!("D𝒢: {lhs} vs {rhs}"))?;

    let x = DMatrix::from_fn(prob.n, prob.n, |_, _| rng.random_range(-1.0..1.0));
    let x = (&x + x.transpose()) * 0.5;
    let ax = prob.constraints.apply_dense(&x);
    let adj = prob.constraints.adjoint(&mu).to_dense();
    let (lhs, rhs) = (ax.dot(&mu), adj.dot(&x));
    let scale = (ax.norm() * mu.norm()).max(adj.norm() * x.norm()).max(f64::MIN_POSITIVE);
    ensure((lhs - rhs).abs() <= 1e-12 * scale, || format!("𝒜: {lhs} vs {rhs}"))
}

/// `P(P d) = P d` to 1e-9, and `P d` lies in `ker D𝒢`.
pub fn projection_idempotent(shape: &Shape) -> Check {
    let (prob, pt) = build(shape);
    let mut rng = rng_for(shape, 2);
    let d = random_tangent(&pt, &mut rng);
    let mut solver = GramSolver::new(prob.m(), None);
    let p1 = project_tangent(&prob, &pt, &d, &mut solver);
    let p2 = project_tangent(&prob, &pt, &p1, &mut solver);
    let diff = p2.sub(&p1).norm();
    ensure(diff <= 1e-9 * (1.0 + p1.norm()), || format!("‖P²d − Pd‖ = {diff:.3e}"))?;
    let normal = apply_dg(&prob, &pt, &p1).norm();
    let scale = 1.0 + apply_dg(&prob, &pt, &d).norm();
    ensure(normal <= 1e-9 * scale, || format!("‖D𝒢 Pd‖ = {normal:.3e}"))
}

/// A retracted tangent step of length `size` lands on `𝒢 = 0` to 1e-8·(1+‖b‖).
pub fn retraction_feasible(shape: &Shape, size: f64) -> Check {
    let (prob, pt) = build(shape);
    let mut rng = rng_for(shape, 3);
    let mut solver = GramSolver::new(prob.m(), None);
    let d = project_tangent(&prob, &pt, &random_tangent(&pt, &mut rng), &mut solver);
    let step = d.scaled(size / d.norm().max(1e-300));
    let moved = newton_retract(&prob, &prob.b, &pt, &step, &mut solver).map_err(|e| format!("retraction failed: {e}"))?;
    let res = residual_g(&prob, &moved).map_err(|e| e.to_string())?.norm();
    ensure(res <= RETRACTION_TOL * (1.0 + prob.b.norm()), || format!("residual {res:.3e}"))
}

/// Directional derivative of `f_r` against a central difference, 1e-6
/// relative to `‖∇f_r‖·‖d‖`.
pub fn gradient_fd(shape: &Shape) -> Check {
    let (prob, pt) = build(shape);
    let mut rng = rng_for(shape, 4);
    let d = random_tangent(&pt, &mut rng);
    let ev = objective_value_grad(&prob, &pt).map_err(|e| e.to_string())?;
    let g = euclidean_grad(&prob, &pt, &ev.grad);
    let analytic = g.dot(&d);
    let h = 1e-4;
    let f_at = |s: f64| {
        let q = FactorPoint::from_blocks(&pt.r + &d.h * s, &pt.y + &d.v * s, pt.support.clone());
        objective_value_grad(&prob, &q).map(|e| e.value).unwrap_or(f64::NAN)
    };
    let fd = (f_at(h) - f_at(-h)) / (2.0 * h);
    let scale = (g.norm() * d.norm()).max(f64::MIN_POSITIVE);
    ensure((fd - analytic).abs() <= 1e-6 * scale, || format!("fd {fd} vs analytic {analytic}"))
}

/// ξ against a dense eigendecomposition of the trailing block and `min s`.
pub fn escape_value_dense(shape: &Shape) -> Check {
    let (prob, pt) = build(shape);
    let mut rng = rng_for(shape, 5);
    let lambda = random_vec(prob.m(), &mut rng);
    let ev = objective_value_grad(&prob, &pt).map_err(|e| e.to_string())?;
    let xi = escape_direction(&prob, &ev.grad, &lambda, 1, shape.seed).map_err(|e| e.to_string())?.xi;
    let z = slack_matrix(&prob, &ev.grad.mat, &lambda).to_dense();
    let k = prob.k;
    let w = z.view((k, k), (prob.n - k, prob.n - k)).into_owned();
    let eig_min = SymmetricEigen::new(w).eigenvalues.min();
    let s_min = slack_vector(&prob, &ev.grad.vec, &lambda).iter().copied().fold(f64::INFINITY, f64::min);
    let dense = eig_min.min(s_min);
    ensure((xi - dense).abs() <= 1e-8 * (1.0 + dense.abs()), || format!("ξ {xi} vs dense {dense}"))
}

/// Matrix-free `Q x` against the assembled matrix and the composition
/// `D𝒢 D𝒢*`, 1e-12 relative to `‖Q‖·‖x‖`.
pub fn gram_free_vs_assembled(shape: &Shape) -> Check {
    let (prob, pt) = build(shape);
    if prob.m() == 0 {
        return Ok(());
    }
    let mut rng = rng_for(shape, 6);
    let op = GramOperator::new(&prob, &pt);
    let q = op.assemble().to_dense();
    let x = random_vec(prob.m(), &mut rng);
    let free = op.apply(&x);
    let assembled = &q * &x;
    let composed = apply_dg(&prob, &pt, &apply_dg_adjoint(&prob, &pt, &x));
    let scale = q.norm() * x.norm();
    ensure((&free - &assembled).norm() <= 1e-12 * scale, || "apply vs assembled".into())?;
    ensure((&free - &composed).norm() <= 1e-12 * scale, || "apply vs D𝒢 D𝒢*".into())?;
    ensure((op.diagonal() - q.diagonal()).norm() <= 1e-12 * q.norm(), || "diagonal".into())
}

/// `⟨S, X⟩ + ⟨s, x⟩ = ⟨C, X⟩ + ⟨c, x⟩ − λᵀ𝒦(X, x) − ⟨Λ, I_k⟩` to 1e-9
/// relative, with `Λ` symmetric and `s = c − Bᵀλ` exactly.
pub fn complementarity(shape: &Shape) -> Check {
    let (prob, pt) = build(shape);
    let mut rng = rng_for(shape, 7);
    let lambda = random_vec(prob.m(), &mut rng);
    let ev = objective_value_grad(&prob, &pt).map_err(|e| e.to_string())?;
    let cert = build_certificate(&prob, &pt, &lambda, &ev.grad).map_err(|e| e.to_string())?;
    let rhat = pt.rhat(&prob);
    let x = pt.x();
    let lhs = cert.s_op.quad(&rhat) + cert.s.dot(&x);
    let kx = apply_k(&prob, &pt).map_err(|e| e.to_string())?;
    let terms = [ev.grad.mat.quad(&rhat), ev.grad.vec.dot(&x), -lambda.dot(&kx), -cert.big_lambda.trace()];
    let rhs: f64 = terms.iter().sum();
    let scale = 1.0 + terms.iter().map(|t| t.abs()).sum::<f64>();
    ensure((lhs - rhs).abs() <= 1e-9 * scale, || format!("{lhs} vs {rhs}"))?;
    let asym = (&cert.big_lambda - cert.big_lambda.transpose()).norm();
    ensure(asym <= 1e-12 * (1.0 + cert.big_lambda.norm()), || format!("Λ asymmetry {asym:.3e}"))?;
    let s_expected = if prob.m() > 0 {
        &ev.grad.vec - prob.coupling.tr_mul(&lambda)
    } else {
        ev.grad.vec.clone()
    };
    ensure(cert.s == s_expected, || "s ≠ c − Bᵀλ".into())
}

/// Enlarges an order past the dense eigensolver threshold on one case in three
/// so that the Lanczos path is covered.
pub fn maybe_large(mut shape: Shape, pick: usize) -> Shape {
    if pick == 0 {
        shape.n += 70;
    }
    shape
}
