#![allow(dead_code)]
//! Dense primal-dual interior-point reference solver (HKM direction) for
//! small linear instances. The fixed identity block becomes explicit
//! equality rows here, so it is independent of the factorized machinery.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use sdpf::model::{ConeProblem, Objective};

pub struct OracleSolution {
    pub objective: f64,
    pub x_mat: DMatrix<f64>,
    pub x_vec: DVector<f64>,
    pub y: DVector<f64>,
    pub gap: f64,
    pub infeas: f64,
}

struct Dense {
    n: usize,
    a: Vec<DMatrix<f64>>,
    bmat: DMatrix<f64>,
    b: DVector<f64>,
    c_mat: DMatrix<f64>,
    c_vec: DVector<f64>,
}

fn densify(prob: &ConeProblem) -> Dense {
    let n = prob.n;
    let Objective::Linear { c_mat, c_vec } = &prob.objective else {
        panic!("oracle handles linear objectives only");
    };
    let mut a: Vec<DMatrix<f64>> = prob.constraints.mats().iter().map(|m| m.to_dense()).collect();
    let mut b: Vec<f64> = prob.b.iter().copied().collect();
    let p = prob.p;
    let mut brows: Vec<Vec<f64>> = (0..prob.m()).map(|i| {
        let mut r = vec![0.0; p];
        for &(j, v) in prob.coupling.row(i) {
            r[j] = v;
        }
        r
    }).collect();
    for i in 0..prob.k {
        for j in i..prob.k {
            let mut e = DMatrix::zeros(n, n);
            if i == j {
                e[(i, i)] = 1.0;
                b.push(1.0);
            } else {
                e[(i, j)] = 0.5;
                e[(j, i)] = 0.5;
                b.push(0.0);
            }
            a.push(e);
            brows.push(vec![0.0; p]);
        }
    }
    let m = a.len();
    let bmat = DMatrix::from_fn(m, p, |i, j| brows[i][j]);
    Dense {
        n,
        a,
        bmat,
        b: DVector::from_vec(b),
        c_mat: c_mat.to_dense(),
        c_vec: c_vec.clone(),
    }
}

fn inner(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.component_mul(b).sum()
}

fn sym(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Largest step in (0, 1] keeping `x + α·dx` positive definite, damped.
fn psd_step(x: &DMatrix<f64>, dx: &DMatrix<f64>) -> f64 {
    let Some(c) = Cholesky::new(x.clone()) else {
        return 0.0;
    };
    let l = c.l();
    let linv = l.clone().try_inverse().expect("invertible");
    let w = sym(&(&linv * dx * linv.transpose()));
    let lmin = SymmetricEigen::new(w).eigenvalues.min();
    if lmin >= 0.0 { 1.0 } else { (-1.0 / lmin).min(1.0) }
}

fn vec_step(x: &DVector<f64>, dx: &DVector<f64>) -> f64 {
    let mut a = 1.0f64;
    for i in 0..x.len() {
        if dx[i] < 0.0 {
            a = a.min(-x[i] / dx[i]);
        }
    }
    a
}

pub fn solve_dense(prob: &ConeProblem) -> OracleSolution {
    let d = densify(prob);
    let (n, m, p) = (d.n, d.a.len(), d.c_vec.len());
    let scale = 10.0f64.max((n as f64).sqrt());
    let mut x = DMatrix::identity(n, n) * scale;
    let mut z = DMatrix::identity(n, n) * scale;
    let mut xv = DVector::from_element(p, scale);
    let mut zv = DVector::from_element(p, scale);
    let mut y = DVector::zeros(m);
    let bnorm = 1.0 + d.b.norm();
    let cnorm = 1.0 + (d.c_mat.norm_squared() + d.c_vec.norm_squared()).sqrt();
    let nu = (n + p) as f64;
    let mut sigma = 0.3;
    let (mut gap_rel, mut infeas) = (f64::INFINITY, f64::INFINITY);
    for _ in 0..200 {
        let ax = DVector::from_fn(m, |i, _| inner(&d.a[i], &x));
        let rp = &d.b - ax - &d.bmat * &xv;
        let mut aty = DMatrix::zeros(n, n);
        for i in 0..m {
            aty += &d.a[i] * y[i];
        }
        let rd_mat = &d.c_mat - &z - &aty;
        let rd_vec = &d.c_vec - &zv - d.bmat.transpose() * &y;
        let pobj = inner(&d.c_mat, &x) + d.c_vec.dot(&xv);
        let dobj = d.b.dot(&y);
        gap_rel = (pobj - dobj).abs() / (1.0 + pobj.abs() + dobj.abs());
        infeas = (rp.norm() / bnorm).max((rd_mat.norm_squared() + rd_vec.norm_squared()).sqrt() / cnorm);
        if gap_rel < 1e-12 && infeas < 1e-12 {
            break;
        }
        let mu = (inner(&x, &z) + xv.dot(&zv)) / nu;
        let zinv = sym(&z.clone().try_inverse().expect("Z invertible"));
        let dvec = xv.component_div(&zv);
        // Schur complement M_ij = A_i • (X A_j Z⁻¹) + Σ_l B_il B_jl x_l/z_l.
        let xa: Vec<DMatrix<f64>> = d.a.iter().map(|aj| &x * aj * &zinv).collect();
        let mut schur = DMatrix::zeros(m, m);
        for i in 0..m {
            for j in 0..m {
                schur[(i, j)] = inner(&d.a[i], &xa[j]);
            }
        }
        schur += &d.bmat * DMatrix::from_diagonal(&dvec) * d.bmat.transpose();
        let schur = sym(&schur);
        let target = &zinv * (sigma * mu) - &x - sym(&(&x * &rd_mat * &zinv));
        let target_v = zv.map(|v| sigma * mu / v) - &xv - xv.component_mul(&rd_vec).component_div(&zv);
        let rhs = &rp - DVector::from_fn(m, |i, _| inner(&d.a[i], &target)) - &d.bmat * &target_v;
        let dy = match Cholesky::new(schur.clone()) {
            Some(c) => c.solve(&rhs),
            None => schur.clone().lu().solve(&rhs).expect("Schur complement solvable"),
        };
        let mut ady = DMatrix::zeros(n, n);
        for i in 0..m {
            ady += &d.a[i] * dy[i];
        }
        let dz = &rd_mat - &ady;
        let dzv = &rd_vec - d.bmat.transpose() * &dy;
        let dx = sym(&(&target + &x * &ady * &zinv));
        let dxv = &target_v + dvec.component_mul(&(d.bmat.transpose() * &dy));
        let ap = (0.95 * psd_step(&x, &dx).min(vec_step(&xv, &dxv))).min(1.0);
        let ad = (0.95 * psd_step(&z, &dz).min(vec_step(&zv, &dzv))).min(1.0);
        if ap == 0.0 && ad == 0.0 {
            break;
        }
        x += &dx * ap;
        xv += &dxv * ap;
        y += &dy * ad;
        z += &dz * ad;
        zv += &dzv * ad;
        x = sym(&x);
        z = sym(&z);
        sigma = if ap.min(ad) > 0.8 { 0.05 } else if ap.min(ad) > 0.4 { 0.2 } else { 0.5 };
    }
    let objective = inner(&d.c_mat, &x) + d.c_vec.dot(&xv);
    OracleSolution {
        objective,
        x_mat: x,
        x_vec: xv,
        y: y.rows(0, prob.m()).into_owned(),
        gap: gap_rel,
        infeas,
    }
}
