//! Smallest eigenpairs of symmetric operators: Lanczos with full
//! reorthogonalization, dense decomposition for small orders.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::GeometryError;

/// Orders at or below this are always decomposed densely.
pub const DENSE_MAX: usize = 64;
pub const LANCZOS_MAX_ITER: usize = 500;
pub const LANCZOS_TOL: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct EigPair {
    pub value: f64,
    pub vector: DVector<f64>,
    pub residual: f64,
}

/// Dense matrix of a symmetric operator, built column by column.
pub fn densify(n: usize, op: &dyn Fn(&DMatrix<f64>) -> DMatrix<f64>) -> DMatrix<f64> {
    let a = op(&DMatrix::identity(n, n));
    (&a + a.transpose()) * 0.5
}

/// Smallest eigenpair of a dense symmetric matrix.
pub fn dense_min(a: &DMatrix<f64>) -> EigPair {
    let n = a.nrows();
    let eig = SymmetricEigen::new(a.clone());
    let (idx, &value) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.total_cmp(y.1))
        .expect("nonempty matrix");
    let vector = eig.eigenvectors.column(idx).into_owned();
    let residual = (a * &vector - &vector * value).norm();
    debug_assert_eq!(vector.len(), n);
    EigPair {
        value,
        vector,
        residual,
    }
}

/// Lanczos for the smallest eigenvalue of a symmetric operator applied to
/// single columns. `op` acts on `n × 1` blocks.
pub fn lanczos_min(
    n: usize,
    op: &dyn Fn(&DMatrix<f64>) -> DMatrix<f64>,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<EigPair, GeometryError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut random_unit = |basis: &[DVector<f64>]| -> Option<DVector<f64>> {
        for _ in 0..5 {
            let mut v = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
            for _ in 0..2 {
                for q in basis {
                    let c = q.dot(&v);
                    v.axpy(-c, q, 1.0);
                }
            }
            let nv = v.norm();
            if nv > 1e-10 {
                return Some(v / nv);
            }
        }
        None
    };
    let apply = |v: &DVector<f64>| -> DVector<f64> {
        let m = op(&DMatrix::from_column_slice(n, 1, v.as_slice()));
        m.column(0).into_owned()
    };

    let limit = max_iter.min(n);
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(limit);
    let mut alpha: Vec<f64> = Vec::new();
    let mut beta: Vec<f64> = Vec::new();
    let mut q = random_unit(&basis).expect("nonzero start");
    let mut scale = 0.0f64;
    let mut last_residual = f64::INFINITY;
    loop {
        let mut w = apply(&q);
        let a = q.dot(&w);
        w.axpy(-a, &q, 1.0);
        if let Some(prev) = basis.last() {
            w.axpy(-beta.last().copied().unwrap_or(0.0), prev, 1.0);
        }
        basis.push(q.clone());
        alpha.push(a);
        for _ in 0..2 {
            for v in &basis {
                let c = v.dot(&w);
                w.axpy(-c, v, 1.0);
            }
        }
        let b = w.norm();
        scale = scale.max(a.abs() + b);

        let j = alpha.len();
        let t = DMatrix::from_fn(j, j, |r, c| {
            if r == c {
                alpha[r]
            } else if r + 1 == c {
                beta[r]
            } else if c + 1 == r {
                beta[c]
            } else {
                0.0
            }
        });
        let eig = SymmetricEigen::new(t);
        let (idx, &theta) = eig
            .eigenvalues
            .iter()
            .enumerate()
            .min_by(|x, y| x.1.total_cmp(y.1))
            .expect("nonempty");
        let s = eig.eigenvectors.column(idx);
        let bound = b * s[j - 1].abs();
        let exhausted = j == n;
        if bound <= tol * scale.max(1.0) || exhausted || j >= limit {
            let mut vec = DVector::zeros(n);
            for (c, v) in basis.iter().enumerate() {
                vec.axpy(s[c], v, 1.0);
            }
            let nv = vec.norm();
            vec /= nv;
            let residual = (apply(&vec) - &vec * theta).norm();
            last_residual = residual;
            if residual <= tol * theta.abs().max(1.0).max(scale) || exhausted {
                return Ok(EigPair {
                    value: theta,
                    vector: vec,
                    residual,
                });
            }
            if j >= limit {
                break;
            }
        }
        if b <= 1e-12 * scale.max(1.0) {
            // Invariant subspace found: continue in its complement.
            match random_unit(&basis) {
                Some(v) => {
                    beta.push(0.0);
                    q = v;
                }
                None => break,
            }
        } else {
            beta.push(b);
            q = w / b;
        }
    }
    Err(GeometryError::EigSolverStagnated {
        residual: last_residual,
    })
}

/// Smallest eigenpair: dense for small orders, Lanczos otherwise with a dense
/// fallback up to `dense_fallback_max`.
pub fn smallest_eigenpair(
    n: usize,
    op: &dyn Fn(&DMatrix<f64>) -> DMatrix<f64>,
    seed: u64,
    dense_fallback_max: usize,
) -> Result<EigPair, GeometryError> {
    if n <= DENSE_MAX {
        return Ok(dense_min(&densify(n, op)));
    }
    match lanczos_min(n, op, seed, LANCZOS_MAX_ITER, LANCZOS_TOL) {
        Ok(p) => Ok(p),
        Err(e) if n <= dense_fallback_max => {
            log::warn!("Lanczos stagnated ({e}); falling back to dense eigendecomposition");
            Ok(dense_min(&densify(n, op)))
        }
        Err(e) => Err(e),
    }
}

/// `‖Π₋(A)‖²` from the negative eigenvalues of a dense symmetric matrix.
pub fn negative_part_sq_dense(a: &DMatrix<f64>) -> f64 {
    let sym = (a + a.transpose()) * 0.5;
    SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .filter(|v| **v < 0.0)
        .map(|v| v * v)
        .sum()
}

/// Negative-part estimate by deflated Lanczos: repeatedly extracts the
/// smallest eigenpair on the complement of those already found, stopping once
/// it is above `-threshold`. Returns `(‖Π₋‖², exact)`; `exact` is false when
/// the eigensolver stagnated or the cap on collected pairs was hit.
pub fn negative_part_sq_lanczos(
    n: usize,
    op: &dyn Fn(&DMatrix<f64>) -> DMatrix<f64>,
    threshold: f64,
    seed: u64,
    max_pairs: usize,
) -> (f64, bool) {
    let mut found: Vec<(f64, DVector<f64>)> = Vec::new();
    let mut total = 0.0;
    for i in 0..max_pairs {
        let deflated = |v: &DMatrix<f64>| -> DMatrix<f64> {
            let mut av = op(v);
            // Shift found directions out of the way.
            for (val, u) in &found {
                let c = u.transpose() * v;
                av -= u * c * (*val);
            }
            av
        };
        match lanczos_min(n, &deflated, seed.wrapping_add(i as u64), LANCZOS_MAX_ITER, LANCZOS_TOL) {
            Ok(p) if p.value < -threshold => {
                total += p.value * p.value;
                found.push((p.value, p.vector));
            }
            Ok(_) => return (total, true),
            Err(_) => return (total, false),
        }
    }
    (total, false)
}
