//! The rank-support-adaptive outer loop: BB gradient steps with a
//! non-monotone line search, second-order escapes, rank/support reduction,
//! rank capping, and the perturbation/preconditioner escalation.

use std::collections::VecDeque;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::certificate::{build_certificate, refine_dual, DualCertificate, RdMethod, RefineMetric};
use crate::error::{GeometryError, ModelError, SolveError};
use crate::geometry::{
    apply_dg_adjoint, newton_retract, riemannian_grad_with, FactorPoint, GramOperator, RiemannianGrad, Tangent,
    RETRACTION_TOL,
};
use crate::linsolve::{pcg, perturb_rhs, DiagonalPc, GramSolver, LinearOperator, PcMode};
use crate::model::{objective_value_grad, residual_with, ConeProblem, Family, ObjectiveEval};
use crate::saddle::{escape_direction, escape_step, EscapeKind};

const GRAD_MAX_BACKTRACKS: usize = 30;
const ARMIJO_C1: f64 = 1e-4;
const REDUCTION_BACKOFF: usize = 10;
const STAGNATION_STEPS: usize = 50;
const MAX_RECOVERIES: usize = 3;
const PHASE1_MAX_ITER: usize = 200;
const PHASE1_ACCEPT: f64 = 1e-6;
/// Smallest relative move limit when shifting onto a perturbed `b`.
const MAX_SHIFT: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveOptions {
    pub eps_g: f64,
    pub eps_h: f64,
    /// Initial rank; `⌈√(2m + k(k+1))⌉` when absent.
    pub r0: Option<usize>,
    /// Columns appended per escape; 1 when absent.
    pub tau: Option<usize>,
    pub kappa1: f64,
    pub kappa2: f64,
    pub max_reductions: usize,
    pub max_iter: usize,
    /// Wall-clock limit in seconds.
    pub max_time: Option<f64>,
    pub window: usize,
    pub bb_min: f64,
    pub bb_max: f64,
    /// PCG iteration cap; 20 (m < 10000) or 50 when absent.
    pub t_cg: Option<usize>,
    /// Perturbation size relative to `1 + ‖b‖`.
    pub perturb_scale: f64,
    pub perturb_max_scale: f64,
    /// Entries of `b` eligible for perturbation; all when absent.
    pub perturb_mask: Option<Vec<bool>>,
    pub seed: u64,
    pub escape: bool,
    pub reduce: bool,
    /// Run the dual refinement after the solve.
    pub refine: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            eps_g: 1e-5,
            eps_h: 1e-6,
            r0: None,
            tau: None,
            kappa1: 10.0,
            kappa2: 1e4,
            max_reductions: 20,
            max_iter: 20_000,
            max_time: None,
            window: 5,
            bb_min: 1e-10,
            bb_max: 1e10,
            t_cg: None,
            perturb_scale: 1e-7,
            perturb_max_scale: 1e-5,
            perturb_mask: None,
            seed: 0,
            escape: true,
            reduce: true,
            refine: false,
        }
    }
}

impl SolveOptions {
    /// Defaults with the per-family settings used for the benchmark families.
    pub fn for_family(family: Family) -> Self {
        let mut o = Self::default();
        if family == Family::Snl {
            o.eps_g = 1e-6;
            o.eps_h = 1e-6;
            o.r0 = Some(3);
            o.tau = Some(20);
        }
        o
    }

    pub fn validate(&self, prob: &ConeProblem) -> Result<(), ModelError> {
        let bad = |what: &str| Err(ModelError::Invalid(format!("option {what}")));
        if !(self.eps_g > 0.0) || !(self.eps_h > 0.0) {
            return bad("eps_g and eps_h must be positive");
        }
        if !(self.kappa1 > 1.0) || !(self.kappa2 > 1.0) {
            return bad("kappa1 and kappa2 must exceed 1");
        }
        if self.window == 0 || !(self.bb_min > 0.0) || !(self.bb_max >= self.bb_min) {
            return bad("window and BB bounds must be positive and ordered");
        }
        if let Some(r0) = self.r0 {
            if r0 < prob.k || r0 == 0 {
                return bad("r0 must be at least max(k, 1)");
            }
        }
        if let Some(mask) = &self.perturb_mask {
            if mask.len() != prob.m() {
                return bad("perturb_mask length must equal m");
            }
        }
        Ok(())
    }

    pub fn initial_rank(&self, prob: &ConeProblem) -> usize {
        let k = prob.k;
        let bound = ((2 * prob.m() + k * (k + 1)) as f64).sqrt().ceil() as usize;
        self.r0.unwrap_or(bound).max(k).max(1).min(prob.n.max(1))
    }

    pub fn escape_columns(&self) -> usize {
        self.tau.unwrap_or(1).max(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Stationary,
    MaxIter,
    TimeOut,
    LineSearchFailed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EscapeRecord {
    pub iteration: usize,
    pub xi: f64,
    pub kind: String,
    pub tau: usize,
    pub t: f64,
    pub f_old: f64,
    pub f_new: f64,
    pub accepted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReductionRecord {
    pub iteration: usize,
    pub rank_before: usize,
    pub rank_after: usize,
    pub support_before: usize,
    pub support_after: usize,
    pub accepted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationRecord {
    pub iteration: usize,
    /// Final `‖v‖` of the perturbation `b_ε = b + v`.
    pub magnitude: f64,
    pub count: usize,
    pub rescales: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub status: SolveStatus,
    pub objective: f64,
    pub iterations: usize,
    pub objective_history: Vec<f64>,
    pub rank_history: Vec<usize>,
    pub support_history: Vec<usize>,
    pub grad_norm_history: Vec<f64>,
    pub cg_iterations: usize,
    pub linear_solves: usize,
    pub cholesky_factorizations: usize,
    pub preconditioner_trips: usize,
    pub preconditioner_mode: PcMode,
    pub last_factor_iteration: Option<usize>,
    pub perturbation: Option<PerturbationRecord>,
    /// The final point was retracted back onto the unperturbed `b`.
    pub returned_to_original_b: bool,
    pub escapes: Vec<EscapeRecord>,
    pub reductions: Vec<ReductionRecord>,
    pub reduction_events: usize,
    pub retraction_failures: usize,
    pub stagnation_escalations: usize,
    /// Escape failures resolved by a refined multiplier.
    pub multiplier_refinements: usize,
    pub final_rank: usize,
    pub final_support: usize,
    pub grad_norm: f64,
    pub xi: Option<f64>,
    pub eps_h_used: f64,
    pub rp: f64,
    pub rd: f64,
    pub rc: f64,
    pub rd_method: RdMethod,
    pub refined: bool,
    pub rd_before_refine: Option<f64>,
    pub warnings: Vec<String>,
    #[serde(skip)]
    pub elapsed_secs: f64,
}

impl SolveReport {
    pub fn max_residue(&self) -> f64 {
        self.rp.max(self.rd).max(self.rc)
    }
}

#[derive(Clone, Debug)]
pub struct SolveOutput {
    pub point: FactorPoint,
    pub certificate: DualCertificate,
    pub report: SolveReport,
}

/// Line-search memory carried across gradient steps.
#[derive(Clone, Debug)]
pub struct StepState {
    pub window: VecDeque<f64>,
    pub window_len: usize,
    prev: Option<(FactorPoint, Tangent)>,
    parity: usize,
    last_t: f64,
    pub bb_min: f64,
    pub bb_max: f64,
}

impl StepState {
    pub fn new(opts: &SolveOptions) -> Self {
        Self {
            window: VecDeque::new(),
            window_len: opts.window.max(1),
            prev: None,
            parity: 0,
            last_t: 1.0,
            bb_min: opts.bb_min,
            bb_max: opts.bb_max,
        }
    }

    pub fn push_value(&mut self, f: f64) {
        self.window.push_back(f);
        while self.window.len() > self.window_len {
            self.window.pop_front();
        }
    }

    /// Forgets BB history, e.g. after the shape of the point changed.
    pub fn reset_bb(&mut self) {
        self.prev = None;
    }

    pub fn reference(&self) -> f64 {
        self.window.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    fn bb_step(&mut self, pt: &FactorPoint, grad: &Tangent) -> f64 {
        let gnorm = grad.norm();
        let t = match &self.prev {
            Some((p, g)) if p.r.shape() == pt.r.shape() && p.y.shape() == pt.y.shape() => {
                let s = Tangent {
                    h: &pt.r - &p.r,
                    v: &pt.y - &p.y,
                };
                let yk = grad.sub(g);
                let sy = s.dot(&yk);
                if sy > 0.0 {
                    self.parity += 1;
                    if self.parity % 2 == 1 {
                        s.norm_sq() / sy
                    } else {
                        sy / yk.norm_sq()
                    }
                } else {
                    2.0 * self.last_t
                }
            }
            _ => 1.0 / gnorm.max(1.0),
        };
        t.clamp(self.bb_min, self.bb_max)
    }
}

/// One BB step with non-monotone backtracking:
/// `f_new ≤ max(window) − c₁·t·‖grad‖²`.
pub fn gradient_step(
    prob: &ConeProblem,
    b: &DVector<f64>,
    pt: &FactorPoint,
    grad: &Tangent,
    state: &mut StepState,
    solver: &mut GramSolver,
) -> Result<(FactorPoint, ObjectiveEval, f64), GeometryError> {
    let g2 = grad.norm_sq();
    let f_ref = state.reference();
    let mut t = state.bb_step(pt, grad);
    let t0 = t;
    for _ in 0..=GRAD_MAX_BACKTRACKS {
        let tr = newton_retract(prob, b, pt, &grad.scaled(-t), solver);
        if let Ok(trial) = tr {
            if let Ok(ev) = objective_value_grad(prob, &trial) {
                if ev.value.is_finite() && ev.value <= f_ref - ARMIJO_C1 * t * g2 {
                    state.prev = Some((pt.clone(), grad.clone()));
                    state.last_t = t;
                    state.push_value(ev.value);
                    return Ok((trial, ev, t));
                }
            }
        }
        t *= 0.5;
    }
    log::debug!("line search failed from t0 {t0:.3e}, |g|^2 {g2:.3e}");
    Err(GeometryError::LineSearchFailed {
        backtracks: GRAD_MAX_BACKTRACKS,
    })
}

/// Index `r'` (1-based count) of the largest gap `σ_i/σ_{i+1}` when it
/// exceeds `κ₁`; the first maximizer wins ties.
pub fn rank_rule(sigma: &[f64], kappa1: f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for i in 0..sigma.len().saturating_sub(1) {
        if sigma[i + 1] <= 0.0 {
            break;
        }
        let ratio = sigma[i] / sigma[i + 1];
        if best.is_none_or(|(_, b)| ratio > b) {
            best = Some((i + 1, ratio));
        }
    }
    best.filter(|&(_, ratio)| ratio > kappa1).map(|(r, _)| r)
}

/// Indices with `x_j ≤ x_ref/κ₂` among the supported ones.
pub fn support_rule(x: &DVector<f64>, support: &[bool], x_ref: f64, kappa2: f64) -> Vec<usize> {
    (0..x.len())
        .filter(|&j| support[j] && x[j] <= x_ref / kappa2)
        .collect()
}

/// Refactors `X = R̂R̂ᵀ` onto `target` columns through a thin SVD of `R̂`,
/// restoring the fixed top block `[I_k, 0]`. Exact when `target` is at least
/// the numerical rank.
pub fn refactor(k: usize, rhat: &DMatrix<f64>, target: usize) -> DMatrix<f64> {
    let n = rhat.nrows();
    let svd = rhat.clone().svd(true, false);
    let u = svd.u.expect("left vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut f = DMatrix::zeros(n, target);
    for (c, &i) in order.iter().take(target).enumerate() {
        f.column_mut(c).copy_from(&(u.column(i) * svd.singular_values[i]));
    }
    if k > 0 {
        let t = f.rows(0, k).transpose();
        let mut m = DMatrix::zeros(target, k + target);
        m.columns_mut(0, k).copy_from(&t);
        m.columns_mut(k, target).fill_with_identity();
        let qr = m.qr();
        let q = qr.q();
        let rr = qr.r();
        f = &f * &q;
        for j in 0..k {
            if rr[(j, j)] < 0.0 {
                f.column_mut(j).neg_mut();
            }
        }
        let mut top = f.rows_mut(0, k);
        top.fill(0.0);
        for j in 0..k.min(target) {
            top[(j, j)] = 1.0;
        }
    }
    f.rows(k, n - k).into_owned()
}

/// Caps the rank at `n` while preserving `R̂R̂ᵀ`.
pub fn rank_cap(prob: &ConeProblem, pt: &FactorPoint) -> FactorPoint {
    if pt.rank() <= prob.n {
        return pt.clone();
    }
    FactorPoint {
        r: refactor(prob.k, &pt.rhat(prob), prob.n),
        y: pt.y.clone(),
        support: pt.support.clone(),
    }
}

#[derive(Clone, Debug)]
pub enum ReductionOutcome {
    Unchanged,
    /// Zero columns removed; `X` unchanged, not counted as an event.
    Lossless(FactorPoint),
    Accepted {
        point: FactorPoint,
        eval: ObjectiveEval,
        record: ReductionRecord,
    },
    Rejected(ReductionRecord),
}

/// Rank truncation at the largest singular-value gap above `κ₁` and support
/// removal of `x_j ≤ x_ref/κ₂`, followed by a retraction. Rejected when the
/// retraction fails or `f` rises by more than `10⁻⁸(1+|f|)`.
#[allow(clippy::too_many_arguments)]
pub fn reduce_rank_support(
    prob: &ConeProblem,
    b: &DVector<f64>,
    pt: &FactorPoint,
    f_old: f64,
    opts: &SolveOptions,
    event_count: usize,
    iteration: usize,
    solver: &mut GramSolver,
) -> ReductionOutcome {
    let k = prob.k;
    let rhat = pt.rhat(prob);
    let sv = rhat.singular_values();
    let mut sigma: Vec<f64> = sv.iter().copied().collect();
    sigma.sort_by(|a, b| b.total_cmp(a));
    let s1 = sigma.first().copied().unwrap_or(0.0);
    let nonzero = sigma.iter().filter(|&&s| s > 1e-13 * s1 && s > 0.0).count();
    let floor = k.max(1);
    let lossless_target = nonzero.max(floor);

    let may_count = event_count < opts.max_reductions;
    let rank_target = if may_count {
        rank_rule(&sigma[..nonzero], opts.kappa1).unwrap_or(nonzero).max(floor)
    } else {
        lossless_target
    };
    let x = pt.x();
    let drop = if may_count && prob.p > 0 {
        let x_max = x.max();
        let diag_max = rhat.row_iter().map(|r| r.norm_squared()).fold(0.0, f64::max);
        support_rule(&x, &pt.support, x_max.max(diag_max), opts.kappa2)
    } else {
        Vec::new()
    };

    let rank = pt.rank();
    if rank_target >= rank && drop.is_empty() {
        return ReductionOutcome::Unchanged;
    }
    if rank_target >= lossless_target && drop.is_empty() {
        let r = refactor(k, &rhat, lossless_target);
        let cand = FactorPoint {
            r,
            y: pt.y.clone(),
            support: pt.support.clone(),
        };
        // Numerical rank drop only; the point barely moves.
        return match newton_retract(prob, b, &cand, &Tangent::zeros_like(&cand), solver) {
            Ok(p) => ReductionOutcome::Lossless(p),
            Err(_) => ReductionOutcome::Unchanged,
        };
    }

    let mut cand = FactorPoint {
        r: refactor(k, &rhat, rank_target.min(rank)),
        y: pt.y.clone(),
        support: pt.support.clone(),
    };
    for &j in &drop {
        cand.support[j] = false;
    }
    cand.enforce_support();
    let mut record = ReductionRecord {
        iteration,
        rank_before: rank,
        rank_after: cand.rank(),
        support_before: pt.support_size(),
        support_after: cand.support_size(),
        accepted: false,
    };
    let budget = 1e-8 * (1.0 + f_old.abs());
    match newton_retract(prob, b, &cand, &Tangent::zeros_like(&cand), solver) {
        Ok(p) => match objective_value_grad(prob, &p) {
            Ok(ev) if ev.value <= f_old + budget => {
                record.accepted = true;
                ReductionOutcome::Accepted {
                    point: p,
                    eval: ev,
                    record,
                }
            }
            _ => ReductionOutcome::Rejected(record),
        },
        Err(_) => ReductionOutcome::Rejected(record),
    }
}

fn max_degree_vertex(prob: &ConeProblem) -> usize {
    let mut deg = vec![0usize; prob.n];
    for a in prob.constraints.mats() {
        for &(i, j, _) in a.entries() {
            if i != j {
                deg[i] += 1;
                deg[j] += 1;
            }
        }
    }
    deg.iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .unwrap_or(0)
}

fn closed_form_start(prob: &ConeProblem) -> Option<FactorPoint> {
    let rows = prob.n - prob.k;
    match prob.family {
        Family::Theta if prob.k == 0 && prob.p == 0 && prob.n > 0 => {
            let mut r = DMatrix::zeros(rows, 1);
            r[(max_degree_vertex(prob), 0)] = 1.0;
            Some(FactorPoint::new(r, DVector::zeros(0)))
        }
        Family::BoxQp if prob.k == 1 && prob.p == rows => Some(FactorPoint::new(
            DMatrix::from_element(rows, 1, 0.5),
            DVector::from_element(prob.p, 0.5),
        )),
        Family::Snl if prob.k == 3 && rows >= 3 => {
            let mut r = DMatrix::zeros(rows, 3);
            r.view_mut((0, 0), (3, 3)).fill_with_identity();
            Some(FactorPoint::new(r, DVector::zeros(prob.p)))
        }
        _ => prob
            .init
            .as_ref()
            .map(|init| FactorPoint::new(init.r.clone(), init.y.clone())),
    }
}

struct ShiftedGram<'a> {
    op: &'a GramOperator<'a>,
    mu: f64,
}

impl LinearOperator for ShiftedGram<'_> {
    fn dim(&self) -> usize {
        self.op.dim()
    }
    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        self.op.apply(x) + x * self.mu
    }
}

/// A feasible starting point: family closed forms when recognized, otherwise
/// Moves `pt` onto `𝒢 = b`. A Newton retraction is used when its move is
/// small; otherwise (near a singular Jacobian, where the minimal-norm
/// correction blows up) the damped Gauss–Newton iteration takes over.
fn move_onto(prob: &ConeProblem, b: &DVector<f64>, pt: &FactorPoint, solver: &mut GramSolver) -> Result<Option<FactorPoint>, SolveError> {
    // A singular Jacobian turns a shift δ of b into a move of order √δ.
    let delta = residual_with(prob, b, pt)?.norm() / (1.0 + b.norm());
    let allowed = (1.0 + (pt.r.norm_squared() + pt.y.norm_squared()).sqrt()) * MAX_SHIFT.max(10.0 * delta.sqrt());
    let small = |p: &FactorPoint| ((&p.r - &pt.r).norm_squared() + (&p.y - &pt.y).norm_squared()).sqrt() <= allowed;
    if let Ok(p) = newton_retract(prob, b, pt, &Tangent::zeros_like(pt), solver) {
        if small(&p) {
            return Ok(Some(p));
        }
    }
    let tol = RETRACTION_TOL * (1.0 + b.norm());
    let (p, gn) = lm_restore(prob, b, pt.clone(), tol, PHASE1_MAX_ITER)?;
    Ok((gn <= tol && small(&p)).then_some(p))
}

/// Levenberg–Marquardt damped Gauss–Newton on `½‖𝒢‖²` from a seeded Gaussian.
pub fn phase1_feasible(prob: &ConeProblem, r0: usize, rng: &mut ChaCha8Rng) -> Result<FactorPoint, SolveError> {
    let tol = RETRACTION_TOL * (1.0 + prob.b.norm());
    if let Some(pt) = closed_form_start(prob) {
        if residual_with(prob, &prob.b, &pt)?.norm() <= tol {
            return Ok(pt);
        }
    }
    let rows = prob.n - prob.k;
    let r0 = r0.max(prob.k).max(1);
    let scale = 1.0 / (r0 as f64).sqrt();
    let r = DMatrix::from_fn(rows, r0, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
    let y = DVector::from_fn(prob.p, |_, _| rng.sample::<f64, _>(StandardNormal));
    let pt = FactorPoint::new(r, y);
    if prob.m() == 0 {
        return Ok(pt);
    }
    let (pt, gn) = lm_restore(prob, &prob.b, pt, tol, PHASE1_MAX_ITER)?;
    if gn <= tol {
        return Ok(pt);
    }
    if gn <= PHASE1_ACCEPT {
        let mut solver = GramSolver::new(prob.m(), None);
        if let Ok(p) = newton_retract(prob, &prob.b, &pt, &Tangent::zeros_like(&pt), &mut solver) {
            return Ok(p);
        }
    }
    Err(SolveError::Infeasible { residual: gn })
}

/// Levenberg–Marquardt damped Gauss–Newton on `½‖𝒢(R, y) − b‖²`; returns the
/// best point found and its residual norm.
fn lm_restore(
    prob: &ConeProblem,
    b: &DVector<f64>,
    mut pt: FactorPoint,
    tol: f64,
    max_iter: usize,
) -> Result<(FactorPoint, f64), SolveError> {
    let mut g = residual_with(prob, b, &pt)?;
    let mut mu = {
        let d = GramOperator::new(prob, &pt).diagonal_sum();
        1e-4 * d / prob.m() as f64
    };
    for _ in 0..max_iter {
        if g.norm() <= tol {
            break;
        }
        let op = GramOperator::new(prob, &pt);
        let shifted = ShiftedGram { op: &op, mu };
        let diag = op.diagonal_vec().add_scalar(mu);
        let res = pcg(&shifted, &g, &DiagonalPc::new(&diag), 1e-10, 4 * prob.m() + 50, None);
        let corr = apply_dg_adjoint(prob, &pt, &res.solution);
        let trial = FactorPoint {
            r: &pt.r - &corr.h,
            y: &pt.y - &corr.v,
            support: pt.support.clone(),
        };
        let gt = residual_with(prob, b, &trial)?;
        if gt.norm() < g.norm() {
            pt = trial;
            g = gt;
            mu = (mu / 3.0).max(1e-14);
        } else {
            mu *= 4.0;
        }
    }
    let gn = g.norm();
    Ok((pt, gn))
}

impl GramOperator<'_> {
    fn diagonal_vec(&self) -> DVector<f64> {
        crate::linsolve::AssembledOperator::diagonal(self)
    }
    fn diagonal_sum(&self) -> f64 {
        self.diagonal_vec().sum().max(1e-12)
    }
}

struct Engine<'a> {
    prob: &'a ConeProblem,
    opts: &'a SolveOptions,
    b_work: DVector<f64>,
    solver: GramSolver,
    rng: ChaCha8Rng,
    report: SolveReport,
    perturbation: Option<(DVector<f64>, f64)>,
}

impl Engine<'_> {
    /// Applies the one-time perturbation (or its doubling) requested by the
    /// linear solver, moving `pt` onto the new right-hand side.
    fn handle_solver_events(&mut self, iteration: usize, pt: &mut FactorPoint) -> bool {
        let events = self.solver.take_events();
        let bnorm1 = 1.0 + self.prob.b.norm();
        if self.solver.perturbation_requested && !self.solver.state.perturbed {
            self.solver.perturbation_requested = false;
            self.solver.state.perturbed = true;
            let eps = self.opts.perturb_scale * bnorm1;
            let (bw, v) = perturb_rhs(&self.prob.b, eps, self.opts.perturb_mask.as_deref(), &mut self.rng);
            match move_onto(self.prob, &bw, pt, &mut self.solver) {
                Ok(Some(p)) => {
                    *pt = p;
                    self.b_work = bw;
                    let magnitude = v.norm();
                    self.perturbation = Some((v, magnitude));
                    self.report.perturbation = Some(PerturbationRecord {
                        iteration,
                        magnitude,
                        count: 1,
                        rescales: 0,
                    });
                    return true;
                }
                other => {
                    let why = match other {
                        Err(e) => e.to_string(),
                        _ => "no nearby point on the perturbed variety".into(),
                    };
                    self.report.retraction_failures += 1;
                    self.report
                        .warnings
                        .push(format!("iteration {iteration}: perturbation not applied ({why})"));
                    return false;
                }
            }
        }
        let max_mag = self.opts.perturb_max_scale * bnorm1;
        if events.cholesky_failed {
            if let Some((v, mag)) = self.perturbation.clone() {
                if mag < max_mag && v.norm() > 0.0 {
                    let new_mag = (2.0 * mag).min(max_mag);
                    let bw = &self.prob.b + &v * (new_mag / v.norm());
                    if let Ok(Some(p)) = move_onto(self.prob, &bw, pt, &mut self.solver) {
                        *pt = p;
                        self.b_work = bw;
                        self.perturbation = Some((v, new_mag));
                        if let Some(rec) = self.report.perturbation.as_mut() {
                            rec.magnitude = new_mag;
                            rec.rescales += 1;
                        }
                        return true;
                    }
                }
            }
        }
        false
    }

    /// Drops the perturbation and moves `pt` back onto the original `b`.
    fn return_to_b(&mut self, pt: &FactorPoint) -> Result<Option<FactorPoint>, SolveError> {
        if self.perturbation.is_none() {
            return Ok(None);
        }
        let back = move_onto(self.prob, &self.prob.b, pt, &mut self.solver)?;
        if back.is_some() {
            self.perturbation = None;
            self.b_work = self.prob.b.clone();
            self.report.returned_to_original_b = true;
        }
        Ok(back)
    }

    fn time_exceeded(&self, start: &Instant) -> bool {
        self.opts.max_time.is_some_and(|t| start.elapsed().as_secs_f64() > t)
    }
}

fn pad_start(prob: &ConeProblem, pt: FactorPoint, r0: usize, rng: &mut ChaCha8Rng, solver: &mut GramSolver) -> FactorPoint {
    let r = pt.rank();
    if r >= r0 {
        return pt;
    }
    let rows = prob.n - prob.k;
    let amp = 0.1 * (pt.r.norm() / (r.max(1) as f64).sqrt()).max(1.0) / (rows.max(1) as f64).sqrt();
    let mut padded = DMatrix::zeros(rows, r0);
    padded.columns_mut(0, r).copy_from(&pt.r);
    for j in r..r0 {
        for i in 0..rows {
            padded[(i, j)] = amp * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let cand = FactorPoint::from_blocks(padded, pt.y.clone(), pt.support.clone());
    match newton_retract(prob, &prob.b, &cand, &Tangent::zeros_like(&cand), solver) {
        Ok(p) => p,
        Err(_) => pt,
    }
}

fn escape_kind_name(kind: &EscapeKind) -> String {
    match kind {
        EscapeKind::Matrix(_) => "matrix".into(),
        EscapeKind::Vector(j) => format!("vector:{j}"),
    }
}

/// Runs the adaptive feasible method from `init` (or a phase-1 point).
pub fn solve(prob: &ConeProblem, opts: &SolveOptions, init: Option<FactorPoint>) -> Result<SolveOutput, SolveError> {
    prob.validate()?;
    opts.validate(prob)?;
    let start = Instant::now();
    let m = prob.m();
    let r0 = opts.initial_rank(prob);
    let tau = opts.escape_columns();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut solver = GramSolver::new(m, opts.t_cg);

    let user_init = init.is_some();
    let mut pt = match init {
        Some(p) => p,
        None => phase1_feasible(prob, r0, &mut rng)?,
    };
    if !user_init {
        pt = pad_start(prob, pt, r0, &mut rng, &mut solver);
    }
    if residual_with(prob, &prob.b, &pt)?.norm() > RETRACTION_TOL * (1.0 + prob.b.norm()) {
        pt = newton_retract(prob, &prob.b, &pt, &Tangent::zeros_like(&pt), &mut solver)
            .map_err(|_| SolveError::Infeasible {
                residual: residual_with(prob, &prob.b, &pt).map(|g| g.norm()).unwrap_or(f64::NAN),
            })?;
    }

    let report = SolveReport {
        status: SolveStatus::MaxIter,
        objective: f64::NAN,
        iterations: 0,
        objective_history: Vec::new(),
        rank_history: Vec::new(),
        support_history: Vec::new(),
        grad_norm_history: Vec::new(),
        cg_iterations: 0,
        linear_solves: 0,
        cholesky_factorizations: 0,
        preconditioner_trips: 0,
        preconditioner_mode: PcMode::Diagonal,
        last_factor_iteration: None,
        perturbation: None,
        returned_to_original_b: false,
        escapes: Vec::new(),
        reductions: Vec::new(),
        reduction_events: 0,
        retraction_failures: 0,
        stagnation_escalations: 0,
        multiplier_refinements: 0,
        final_rank: 0,
        final_support: 0,
        grad_norm: f64::NAN,
        xi: None,
        eps_h_used: opts.eps_h,
        rp: f64::NAN,
        rd: f64::NAN,
        rc: f64::NAN,
        rd_method: RdMethod::Dense,
        refined: false,
        rd_before_refine: None,
        warnings: Vec::new(),
        elapsed_secs: 0.0,
    };
    let mut eng = Engine {
        prob,
        opts,
        b_work: prob.b.clone(),
        solver,
        rng,
        report,
        perturbation: None,
    };

    let mut ev = objective_value_grad(prob, &pt)?;
    let mut state = StepState::new(opts);
    state.push_value(ev.value);
    let mut eps_h = opts.eps_h;
    let mut backoff_until = 0usize;
    let mut stagnant = 0usize;
    let mut recoveries = 0usize;
    let mut status = SolveStatus::MaxIter;
    let mut last_rg: Option<RiemannianGrad> = None;

    for iter in 0..opts.max_iter {
        eng.solver.outer_iter = iter;
        let mut rg = riemannian_grad_with(prob, &pt, &ev.grad, &mut eng.solver);
        if eng.handle_solver_events(iter, &mut pt) {
            ev = objective_value_grad(prob, &pt)?;
            state.reset_bb();
            state.window.clear();
            state.push_value(ev.value);
            rg = riemannian_grad_with(prob, &pt, &ev.grad, &mut eng.solver);
            let _ = eng.solver.take_events();
        }
        let gnorm = rg.grad.norm();
        log::debug!(
            "iter {iter}: f {:.12e} |grad| {gnorm:.3e} res {:.2e} rank {} support {} trips {}",
            ev.value,
            residual_with(prob, &eng.b_work, &pt).map(|g| g.norm()).unwrap_or(f64::NAN),
            pt.rank(),
            pt.support_size(),
            eng.solver.state.trip_count
        );
        eng.report.objective_history.push(ev.value);
        eng.report.rank_history.push(pt.rank());
        eng.report.support_history.push(pt.support_size());
        eng.report.grad_norm_history.push(gnorm);
        eng.report.iterations += 1;
        if eng.time_exceeded(&start) {
            status = SolveStatus::TimeOut;
            last_rg = Some(rg);
            break;
        }

        if gnorm >= opts.eps_g {
            let f_old = ev.value;
            match gradient_step(prob, &eng.b_work, &pt, &rg.grad, &mut state, &mut eng.solver) {
                Ok((p, e, _t)) => {
                    let decrease = f_old - e.value;
                    pt = p;
                    ev = e;
                    recoveries = 0;
                    if decrease < 1e-14 * (1.0 + ev.value.abs()) {
                        stagnant += 1;
                    } else {
                        stagnant = 0;
                    }
                    if stagnant >= STAGNATION_STEPS && m > 0 {
                        stagnant = 0;
                        eng.report.stagnation_escalations += 1;
                        let op = GramOperator::new(prob, &pt);
                        eng.solver.escalate(&op);
                    }
                }
                Err(e) => {
                    // Feasibility noise at a near-singular point can exceed the
                    // requested decrease; re-anchor on the retracted point.
                    let anchored = (recoveries < MAX_RECOVERIES)
                        .then(|| newton_retract(prob, &eng.b_work, &pt, &Tangent::zeros_like(&pt), &mut eng.solver).ok())
                        .flatten()
                        .filter(|p| *p != pt);
                    match anchored {
                        Some(p) => {
                            recoveries += 1;
                            pt = p;
                            ev = objective_value_grad(prob, &pt)?;
                            state.reset_bb();
                            state.window.clear();
                            state.push_value(ev.value);
                        }
                        None => {
                            eng.report.warnings.push(format!("iteration {iter}: {e}"));
                            status = SolveStatus::LineSearchFailed;
                            last_rg = Some(rg);
                            break;
                        }
                    }
                }
            }
        } else {
            let dir = if opts.escape {
                let d = escape_direction(prob, &ev.grad, &rg.lambda, tau, opts.seed ^ (iter as u64))?;
                eng.report.xi = Some(d.xi);
                Some(d).filter(|d| d.xi < -eps_h)
            } else {
                None
            };
            let mut stationary = dir.is_none();
            if let Some(dir) = &dir {
                let f_old = ev.value;
                match escape_step(prob, &eng.b_work, &pt, dir, f_old, &mut eng.solver) {
                    Ok(out) => {
                        eng.report.escapes.push(EscapeRecord {
                            iteration: iter,
                            xi: dir.xi,
                            kind: escape_kind_name(&dir.kind),
                            tau: dir.tau,
                            t: out.t,
                            f_old,
                            f_new: out.f_new,
                            accepted: true,
                        });
                        pt = out.point;
                        ev = match out.eval {
                            Some(e) => e,
                            None => objective_value_grad(prob, &pt)?,
                        };
                        state.reset_bb();
                        state.push_value(ev.value);
                    }
                    Err(e) => {
                        eng.report.escapes.push(EscapeRecord {
                            iteration: iter,
                            xi: dir.xi,
                            kind: escape_kind_name(&dir.kind),
                            tau: dir.tau,
                            t: 0.0,
                            f_old,
                            f_new: f_old,
                            accepted: false,
                        });
                        // Where the multiplier is not unique the negative ξ may
                        // belong to a poor choice of λ; test again with a refined one.
                        let refined = (m > 0)
                            .then(|| refine_dual(prob, &pt, &rg.lambda, RefineMetric::GramInverse, opts))
                            ;
                        let xi_refined = match &refined {
                            Some(o) => Some(escape_direction(prob, &ev.grad, &o.lambda, tau, opts.seed ^ (iter as u64))?.xi),
                            None => None,
                        };
                        match (refined, xi_refined) {
                            (Some(o), Some(xi)) if xi >= -eps_h && o.warning.is_none() => {
                                eng.report.multiplier_refinements += 1;
                                eng.report.xi = Some(xi);
                                rg.lambda = o.lambda;
                                stationary = true;
                            }
                            _ => {
                                eps_h = dir.xi.abs() * (1.0 + 1e-3);
                                eng.report.eps_h_used = eps_h;
                                eng.report
                                    .warnings
                                    .push(format!("iteration {iter}: escape failed ({e}); eps_h raised to {eps_h:.3e}"));
                            }
                        }
                    }
                }
            }
            if stationary {
                // Stationary for the perturbed b: resume from the original b.
                if let Some(back) = eng.return_to_b(&pt)? {
                    pt = back;
                    ev = objective_value_grad(prob, &pt)?;
                    state.reset_bb();
                    state.window.clear();
                    state.push_value(ev.value);
                    eps_h = opts.eps_h;
                    continue;
                }
                status = SolveStatus::Stationary;
                last_rg = Some(rg);
                break;
            }
        }

        if pt.rank() > prob.n {
            pt = rank_cap(prob, &pt);
            ev = objective_value_grad(prob, &pt)?;
            state.reset_bb();
            state.push_value(ev.value);
        }

        if opts.reduce && iter >= backoff_until {
            match reduce_rank_support(
                prob,
                &eng.b_work,
                &pt,
                ev.value,
                opts,
                eng.report.reduction_events,
                iter,
                &mut eng.solver,
            ) {
                ReductionOutcome::Unchanged => {}
                ReductionOutcome::Lossless(p) => {
                    pt = p;
                    ev = objective_value_grad(prob, &pt)?;
                    state.reset_bb();
                    state.push_value(ev.value);
                }
                ReductionOutcome::Accepted { point, eval, record } => {
                    pt = point;
                    ev = eval;
                    eng.report.reduction_events += 1;
                    eng.report.reductions.push(record);
                    state.reset_bb();
                    state.push_value(ev.value);
                }
                ReductionOutcome::Rejected(record) => {
                    eng.report.reductions.push(record);
                    backoff_until = iter + REDUCTION_BACKOFF;
                }
            }
        }
    }

    let mut rg = match last_rg {
        Some(rg) => rg,
        None => riemannian_grad_with(prob, &pt, &ev.grad, &mut eng.solver),
    };
    let mut cert = build_certificate(prob, &pt, &rg.lambda, &ev.grad)?;
    if eng.perturbation.is_some() {
        // Unfinished on the perturbed b; the point on the original b is kept
        // only if the certificate improves.
        let saved = (eng.b_work.clone(), eng.perturbation.clone());
        match eng.return_to_b(&pt)? {
            Some(back) => {
                let ev_back = objective_value_grad(prob, &back)?;
                let rg_back = riemannian_grad_with(prob, &back, &ev_back.grad, &mut eng.solver);
                let cert_back = build_certificate(prob, &back, &rg_back.lambda, &ev_back.grad)?;
                if cert_back.max_residue() <= cert.max_residue() {
                    pt = back;
                    ev = ev_back;
                    rg = rg_back;
                    cert = cert_back;
                } else {
                    (eng.b_work, eng.perturbation) = saved;
                    eng.report.returned_to_original_b = false;
                }
            }
            None => {}
        }
    }
    let mut report = eng.report;
    report.status = status;
    report.objective = ev.value;
    report.grad_norm = rg.grad.norm();
    report.final_rank = pt.rank();
    report.final_support = pt.support_size();
    if opts.refine && m > 0 {
        let out = refine_dual(prob, &pt, &rg.lambda, RefineMetric::GramInverse, opts);
        report.rd_before_refine = Some(cert.rd);
        match out.warning {
            Some(w) => report.warnings.push(format!("dual refinement: {w}")),
            None => {
                let refined = build_certificate(prob, &pt, &out.lambda, &ev.grad)?;
                if refined.rd <= cert.rd {
                    cert = refined;
                    report.refined = true;
                }
            }
        }
    }
    report.rp = cert.rp;
    report.rd = cert.rd;
    report.rc = cert.rc;
    report.rd_method = cert.rd_method;
    report.cg_iterations = eng.solver.cg_iters;
    report.linear_solves = eng.solver.linear_solves;
    report.cholesky_factorizations = eng.solver.state.cholesky_count;
    report.preconditioner_trips = eng.solver.state.trip_count;
    report.preconditioner_mode = eng.solver.state.mode;
    report.last_factor_iteration = eng.solver.state.last_factor_iter;
    if eng.solver.unconverged_solves > 0 {
        report
            .warnings
            .push(format!("{} linear solves ended above tolerance", eng.solver.unconverged_solves));
    }
    report.elapsed_secs = start.elapsed().as_secs_f64();
    Ok(SolveOutput {
        point: pt,
        certificate: cert,
        report,
    })
}
