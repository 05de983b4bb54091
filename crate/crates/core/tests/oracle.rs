//! The dense interior-point oracle reproduces the frozen reference optima and
//! known closed forms, and agrees with the factorized solver.

mod common {
    pub mod oracle;
}

use common::oracle::solve_dense;
use sdpf::instances::*;
use sdpf::*;

/// `(n, p, m, seed, objective)` for `random_sparse_problem`, frozen from the oracle.
const FROZEN: [(usize, usize, usize, u64, f64); 6] = [
    (10, 4, 20, 100, 1.421044106332),
    (20, 5, 27, 101, 7.118336984458),
    (30, 6, 34, 102, 18.673138733893),
    (10, 4, 20, 112, -3.882923517720),
    (30, 5, 34, 117, -2.087012635156),
    (20, 7, 27, 119, 6.593815363782),
];

#[test]
fn oracle_reproduces_frozen_values() {
    for &(n, p, m, seed, want) in &FROZEN {
        let sol = solve_dense(&random_sparse_problem(n, p, m, seed).unwrap());
        assert!(sol.gap < 1e-9 && sol.infeas < 1e-9, "seed {seed}: gap {} infeas {}", sol.gap, sol.infeas);
        assert!((sol.objective - want).abs() <= 1e-9 * (1.0 + want.abs()), "seed {seed}: {}", sol.objective);
    }
}

#[test]
fn oracle_matches_closed_forms() {
    let c5 = solve_dense(&theta_problem(&GraphData::cycle(5)).unwrap());
    assert!((c5.objective + 5f64.sqrt()).abs() < 1e-7);
    let k4 = solve_dense(&theta_problem(&GraphData::complete(4)).unwrap());
    assert!((k4.objective + 1.0).abs() < 1e-7);
}

#[test]
fn solver_agrees_with_oracle_on_a_random_graph() {
    let prob = theta_problem(&GraphData::random(12, 0.3, 2)).unwrap();
    let want = solve_dense(&prob).objective;
    let out = solve(&prob, &SolveOptions::default(), None).unwrap();
    assert!((out.report.objective - want).abs() <= 1e-5 * want.abs(), "{} vs {want}", out.report.objective);
    assert!(out.report.max_residue() <= 1e-6);
}
