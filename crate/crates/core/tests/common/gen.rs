#![allow(dead_code)]
//! Seeded random instances with an arbitrary fixed block, a vector part,
//! sparse-plus-rank-one data and a feasible point recorded by construction.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdpf::geometry::FactorPoint;
use sdpf::model::{
    apply_k, ConeProblem, Constraints, Objective, ResidualTerm, SparseMatrix, SparseVec, SymMatrix,
};

#[derive(Clone, Debug)]
pub struct Shape {
    pub n: usize,
    pub k: usize,
    pub p: usize,
    pub m: usize,
    pub r: usize,
    pub quadratic: bool,
    pub seed: u64,
}

/// Sizes with `(n − k)·r + p > m` so that generic data satisfies LICQ.
pub fn shape_strategy(max_n: usize) -> impl Strategy<Value = Shape> {
    (2..=max_n, 0usize..=3, 0usize..=5, any::<bool>(), any::<u64>()).prop_flat_map(move |(n, k, p, quadratic, seed)| {
        let k = k.min(n - 1);
        (Just((n, k, p, quadratic, seed)), k.max(1)..=(k + 3).min(n)).prop_flat_map(|((n, k, p, quadratic, seed), r)| {
            let dof = (n - k) * r + p;
            let max_m = (dof - 1).min(12);
            (Just(Shape { n, k, p, m: 0, r, quadratic, seed }), 0..=max_m)
                .prop_map(|(mut s, m)| {
                    s.m = m;
                    s
                })
        })
    })
}

fn uni(rng: &mut ChaCha8Rng) -> f64 {
    rng.random_range(-1.0..1.0)
}

fn sparse_vec(rng: &mut ChaCha8Rng, n: usize, density: f64) -> SparseVec {
    let mut pairs = Vec::new();
    for i in 0..n {
        if rng.random_bool(density) {
            pairs.push((i, uni(rng)));
        }
    }
    SparseVec::from_pairs(pairs)
}

fn random_sym(rng: &mut ChaCha8Rng, n: usize, k: usize, entries: usize) -> SymMatrix {
    let mut e = Vec::new();
    for t in 0..entries {
        // the first entry touches the free part so that D𝒢 has no zero rows
        let j = if t == 0 { rng.random_range(k..n) } else { rng.random_range(0..n) };
        let i = rng.random_range(0..=j);
        e.push((i, j, uni(rng)));
    }
    let mut a = SymMatrix::from_upper(n, e);
    if rng.random_bool(0.3) {
        let u = sparse_vec(rng, n, 0.5);
        a.push_rank_one(uni(rng), u);
    }
    a
}

pub fn random_point(shape: &Shape, rng: &mut ChaCha8Rng) -> FactorPoint {
    let r = DMatrix::from_fn(shape.n - shape.k, shape.r, |_, _| uni(rng));
    let y = DVector::from_fn(shape.p, |_, _| 0.2 + rng.random::<f64>());
    FactorPoint::new(r, y)
}

/// The problem together with a point that is feasible for it.
pub fn build(shape: &Shape) -> (ConeProblem, FactorPoint) {
    let mut rng = ChaCha8Rng::seed_from_u64(shape.seed);
    let (n, k, p, m) = (shape.n, shape.k, shape.p, shape.m);
    let mats: Vec<SymMatrix> = (0..m).map(|_| random_sym(&mut rng, n, k, 4)).collect();
    let mut trip = Vec::new();
    for i in 0..m {
        for j in 0..p {
            if rng.random_bool(0.5) {
                trip.push((i, j, uni(&mut rng)));
            }
        }
    }
    let cons = Constraints::new(n, mats).unwrap();
    let coupling = SparseMatrix::from_triplets(m, p, &trip).unwrap();
    let c_mat = random_sym(&mut rng, n, k, 2 * n);
    let c_vec = DVector::from_fn(p, |_, _| uni(&mut rng));
    let objective = if shape.quadratic {
        let terms = (0..3)
            .map(|_| ResidualTerm {
                g: sparse_vec(&mut rng, n, 0.6),
                d: uni(&mut rng),
            })
            .collect();
        Objective::QuadraticResidual { terms, c_mat, c_vec }
    } else {
        Objective::Linear {
            c_mat: Arc::new(c_mat),
            c_vec,
        }
    };
    let pt = random_point(shape, &mut rng);
    let mut prob = ConeProblem::new(n, k, p, cons, coupling, DVector::zeros(m), objective).unwrap();
    prob.b = apply_k(&prob, &pt).unwrap();
    (prob, pt)
}

pub fn rng_for(shape: &Shape, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(shape.seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

pub fn random_tangent(pt: &FactorPoint, rng: &mut ChaCha8Rng) -> sdpf::geometry::Tangent {
    let mut t = sdpf::geometry::Tangent::zeros_like(pt);
    t.h = t.h.map(|_| uni(rng));
    t.v = t.v.map(|_| uni(rng));
    t
}

pub fn random_vec(len: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(len, |_, _| uni(rng))
}
