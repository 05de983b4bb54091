//! Preconditioned conjugate gradients on the Gram system, with the adaptive
//! preconditioner schedule: `Diag(Q)⁻¹` until the iteration cap trips, then a
//! factorization of `Q` at the current point (incomplete first for very large
//! systems, exact otherwise), refreshed on every further trip.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::{CooMatrix, CscMatrix};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::GeometryError;

/// Constraint count at which the hybrid incomplete/exact schedule kicks in
/// and the default iteration cap grows.
pub const LARGE_M: usize = 10_000;
/// Largest system factored densely.
const DENSE_FACTOR_MAX: usize = 1500;
pub const PCG_TOL: f64 = 1e-9;

pub fn default_t_cg(m: usize) -> usize {
    if m < LARGE_M {
        20
    } else {
        50
    }
}

pub trait LinearOperator {
    fn dim(&self) -> usize;
    fn apply(&self, x: &DVector<f64>) -> DVector<f64>;
}

impl LinearOperator for DMatrix<f64> {
    fn dim(&self) -> usize {
        self.nrows()
    }
    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        self * x
    }
}

/// Operators that can also expose their diagonal and an assembled form.
pub trait AssembledOperator: LinearOperator {
    fn diagonal(&self) -> DVector<f64>;
    fn assemble(&self) -> SparseSym;
}

pub trait Preconditioner {
    fn apply(&self, r: &DVector<f64>) -> DVector<f64>;
}

pub struct IdentityPc;

impl Preconditioner for IdentityPc {
    fn apply(&self, r: &DVector<f64>) -> DVector<f64> {
        r.clone()
    }
}

/// Jacobi preconditioner. Zero or negative diagonal entries are treated as 1.
#[derive(Clone, Debug)]
pub struct DiagonalPc {
    inv: DVector<f64>,
}

impl DiagonalPc {
    pub fn new(diag: &DVector<f64>) -> Self {
        Self {
            inv: diag.map(|d| if d > 0.0 && d.is_finite() { 1.0 / d } else { 1.0 }),
        }
    }
}

impl Preconditioner for DiagonalPc {
    fn apply(&self, r: &DVector<f64>) -> DVector<f64> {
        r.component_mul(&self.inv)
    }
}

/// Symmetric sparse matrix in full row storage (both triangles, sorted).
#[derive(Clone, Debug, PartialEq)]
pub struct SparseSym {
    n: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl SparseSym {
    /// Builds from upper-triangle maps `upper[i][j]`, `j >= i`.
    pub fn from_upper(n: usize, upper: Vec<BTreeMap<usize, f64>>) -> Self {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for (i, row) in upper.into_iter().enumerate() {
            for (j, v) in row {
                rows[i].push((j, v));
                if j != i {
                    rows[j].push((i, v));
                }
            }
        }
        for r in &mut rows {
            r.sort_by_key(|e| e.0);
        }
        Self { n, rows }
    }

    pub fn from_dense(a: &DMatrix<f64>) -> Self {
        let n = a.nrows();
        let upper = (0..n)
            .map(|i| (i..n).filter(|&j| a[(i, j)] != 0.0).map(|j| (j, a[(i, j)])).collect())
            .collect();
        Self::from_upper(n, upper)
    }

    pub fn identity(n: usize) -> Self {
        Self::from_upper(n, (0..n).map(|i| BTreeMap::from([(i, 1.0)])).collect())
    }

    pub fn nrows(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn diagonal(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.n,
            self.rows
                .iter()
                .enumerate()
                .map(|(i, r)| r.iter().find(|e| e.0 == i).map_or(0.0, |e| e.1)),
        )
    }

    pub fn trace(&self) -> f64 {
        self.diagonal().sum()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.n, self.n);
        for (i, r) in self.rows.iter().enumerate() {
            for &(j, v) in r {
                a[(i, j)] = v;
            }
        }
        a
    }

    /// Copy with `shift` added to the diagonal.
    pub fn shifted(&self, shift: f64) -> Self {
        let mut upper: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); self.n];
        for (i, r) in self.rows.iter().enumerate() {
            for &(j, v) in r {
                if j >= i {
                    upper[i].insert(j, v);
                }
            }
            *upper[i].entry(i).or_insert(0.0) += shift;
        }
        Self::from_upper(self.n, upper)
    }

    fn permuted_csc(&self, perm: &[usize], inv: &[usize]) -> CscMatrix<f64> {
        let mut coo = CooMatrix::new(self.n, self.n);
        for (new_i, &old_i) in perm.iter().enumerate() {
            for &(old_j, v) in &self.rows[old_i] {
                coo.push(new_i, inv[old_j], v);
            }
        }
        CscMatrix::from(&coo)
    }
}

impl LinearOperator for SparseSym {
    fn dim(&self) -> usize {
        self.n
    }
    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.n,
            self.rows.iter().map(|r| r.iter().map(|&(j, v)| v * x[j]).sum::<f64>()),
        )
    }
}

#[derive(Clone, Debug)]
pub struct PcgResult {
    pub solution: DVector<f64>,
    pub iters: usize,
    pub converged: bool,
    pub residual_norm: f64,
}

/// Preconditioned CG. Converged means `‖op·x − rhs‖ ≤ tol·(1 + ‖rhs‖)`.
pub fn pcg(
    op: &dyn LinearOperator,
    rhs: &DVector<f64>,
    pc: &dyn Preconditioner,
    tol: f64,
    max_iter: usize,
    x0: Option<&DVector<f64>>,
) -> PcgResult {
    let n = rhs.len();
    let target = tol * (1.0 + rhs.norm());
    let mut x = match x0 {
        Some(v) => v.clone(),
        None => DVector::zeros(n),
    };
    let mut r = match x0 {
        Some(v) => rhs - op.apply(v),
        None => rhs.clone(),
    };
    let mut rnorm = r.norm();
    if rnorm <= target {
        return PcgResult {
            solution: x,
            iters: 0,
            converged: true,
            residual_norm: rnorm,
        };
    }
    let mut z = pc.apply(&r);
    let mut p = z.clone();
    let mut rz = r.dot(&z);
    let mut iters = 0;
    while iters < max_iter {
        iters += 1;
        let q = op.apply(&p);
        let pq = p.dot(&q);
        if !(pq > 0.0) || !pq.is_finite() {
            break;
        }
        let alpha = rz / pq;
        x.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &q, 1.0);
        rnorm = r.norm();
        if rnorm <= target {
            return PcgResult {
                solution: x,
                iters,
                converged: true,
                residual_norm: rnorm,
            };
        }
        z = pc.apply(&r);
        let rz_new = r.dot(&z);
        let beta = rz_new / rz;
        rz = rz_new;
        p = &z + beta * p;
    }
    PcgResult {
        solution: x,
        iters,
        converged: false,
        residual_norm: rnorm,
    }
}

/// Zero-fill incomplete Cholesky `Q ≈ LLᵀ`, rows of `L` stored sorted.
#[derive(Clone, Debug)]
pub struct IncompleteCholesky {
    rows: Vec<Vec<(usize, f64)>>,
    pub shift: f64,
}

fn sparse_row_dot(a: &[(usize, f64)], b: &[(usize, f64)], below: usize) -> f64 {
    let (mut i, mut j, mut s) = (0, 0, 0.0);
    while i < a.len() && j < b.len() && a[i].0 < below && b[j].0 < below {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                s += a[i].1 * b[j].1;
                i += 1;
                j += 1;
            }
        }
    }
    s
}

/// IC(0) of `q + shift·I`. Returns `None` on a non-positive pivot.
fn ichol0_with_shift(q: &SparseSym, shift: f64) -> Option<Vec<Vec<(usize, f64)>>> {
    let n = q.nrows();
    let mut l: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut row: Vec<(usize, f64)> = Vec::new();
        let mut diag = shift;
        for &(j, a) in q.row(i) {
            if j < i {
                let s = sparse_row_dot(&row, &l[j], j);
                let ljj = l[j].last().map(|e| e.1).unwrap_or(1.0);
                row.push((j, (a - s) / ljj));
            } else if j == i {
                diag += a;
            }
        }
        let d = diag - row.iter().map(|e| e.1 * e.1).sum::<f64>();
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        row.push((i, d.sqrt()));
        l.push(row);
    }
    Some(l)
}

/// IC(0) with the diagonal shift `σ = 10⁻⁸·tr(Q)/m` applied (and grown
/// tenfold) whenever a pivot breaks down.
pub fn ichol0(q: &SparseSym) -> Result<IncompleteCholesky, GeometryError> {
    if let Some(rows) = ichol0_with_shift(q, 0.0) {
        return Ok(IncompleteCholesky { rows, shift: 0.0 });
    }
    let n = q.nrows().max(1);
    let mut sigma = 1e-8 * q.trace().abs().max(f64::MIN_POSITIVE) / n as f64;
    for _ in 0..12 {
        if let Some(rows) = ichol0_with_shift(q, sigma) {
            return Ok(IncompleteCholesky { rows, shift: sigma });
        }
        sigma *= 10.0;
    }
    Err(GeometryError::CholeskyFailed)
}

impl Preconditioner for IncompleteCholesky {
    fn apply(&self, r: &DVector<f64>) -> DVector<f64> {
        let n = r.len();
        let mut z = r.clone();
        for i in 0..n {
            let row = &self.rows[i];
            let (diag, off) = row.split_last().expect("row has a pivot");
            let s: f64 = off.iter().map(|&(j, v)| v * z[j]).sum();
            z[i] = (z[i] - s) / diag.1;
        }
        for i in (0..n).rev() {
            let row = &self.rows[i];
            let (diag, off) = row.split_last().expect("row has a pivot");
            z[i] /= diag.1;
            let zi = z[i];
            for &(j, v) in off {
                z[j] -= v * zi;
            }
        }
        z
    }
}

/// Greedy minimum-degree ordering on the pattern of `q`.
pub fn min_degree_ordering(q: &SparseSym) -> Vec<usize> {
    let n = q.nrows();
    let mut adj: Vec<BTreeSet<usize>> = (0..n)
        .map(|i| q.row(i).iter().map(|e| e.0).filter(|&j| j != i).collect())
        .collect();
    let mut queue: BTreeSet<(usize, usize)> = (0..n).map(|i| (adj[i].len(), i)).collect();
    let mut order = Vec::with_capacity(n);
    while let Some((_, v)) = queue.pop_first() {
        order.push(v);
        let nbrs: Vec<usize> = std::mem::take(&mut adj[v]).into_iter().collect();
        for &a in &nbrs {
            queue.remove(&(adj[a].len(), a));
            adj[a].remove(&v);
            for &b in &nbrs {
                if b != a {
                    adj[a].insert(b);
                }
            }
            queue.insert((adj[a].len(), a));
        }
    }
    order
}

/// Exact Cholesky of `Q` (optionally shifted), dense for small systems and
/// sparse with a minimum-degree ordering otherwise.
pub enum ExactCholesky {
    Dense(nalgebra::linalg::Cholesky<f64, nalgebra::Dyn>),
    Sparse {
        perm: Vec<usize>,
        factor: CscCholesky<f64>,
    },
}

impl std::fmt::Debug for ExactCholesky {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ExactCholesky::Dense(_) => f.write_str("ExactCholesky::Dense"),
            ExactCholesky::Sparse { perm, .. } => write!(f, "ExactCholesky::Sparse(n = {})", perm.len()),
        }
    }
}

impl ExactCholesky {
    pub fn factor(q: &SparseSym) -> Result<Self, GeometryError> {
        let n = q.nrows();
        if n <= DENSE_FACTOR_MAX {
            let dense = q.to_dense();
            return nalgebra::linalg::Cholesky::new(dense)
                .map(ExactCholesky::Dense)
                .ok_or(GeometryError::CholeskyFailed);
        }
        let perm = min_degree_ordering(q);
        let mut inv = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let csc = q.permuted_csc(&perm, &inv);
        let factor = CscCholesky::factor(&csc).map_err(|_| GeometryError::CholeskyFailed)?;
        // The sparse factorization does not detect tiny pivots; reject them.
        let l = factor.l();
        for j in 0..n {
            let col = l.col(j);
            let d = col.get_entry(j).map(|e| e.into_value()).unwrap_or(0.0);
            if !(d > 0.0) || !d.is_finite() {
                return Err(GeometryError::CholeskyFailed);
            }
        }
        Ok(ExactCholesky::Sparse { perm, factor })
    }

    pub fn solve(&self, r: &DVector<f64>) -> DVector<f64> {
        match self {
            ExactCholesky::Dense(c) => c.solve(r),
            ExactCholesky::Sparse { perm, factor } => {
                let pr = DVector::from_iterator(perm.len(), perm.iter().map(|&i| r[i]));
                let sol = factor.solve(&pr);
                let mut out = DVector::zeros(perm.len());
                for (new, &old) in perm.iter().enumerate() {
                    out[old] = sol[(new, 0)];
                }
                out
            }
        }
    }
}

impl Preconditioner for ExactCholesky {
    fn apply(&self, r: &DVector<f64>) -> DVector<f64> {
        self.solve(r)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PcMode {
    Diagonal,
    IncompleteCholesky,
    Cholesky,
}

#[derive(Debug)]
enum Factor {
    Incomplete(IncompleteCholesky),
    Exact(ExactCholesky),
}

/// Preconditioner schedule for one solve.
#[derive(Debug)]
pub struct PreconditionerState {
    pub mode: PcMode,
    pub t_cg: usize,
    pub trip_count: usize,
    pub perturbed: bool,
    pub last_factor_iter: Option<usize>,
    pub cholesky_count: usize,
    /// Diagonal shift used by the current factor (zero when exact).
    pub shift: f64,
    factor: Option<Factor>,
}

impl PreconditionerState {
    pub fn new(m: usize) -> Self {
        Self::with_cap(default_t_cg(m))
    }

    pub fn with_cap(t_cg: usize) -> Self {
        Self {
            mode: PcMode::Diagonal,
            t_cg: t_cg.max(1),
            trip_count: 0,
            perturbed: false,
            last_factor_iter: None,
            cholesky_count: 0,
            shift: 0.0,
            factor: None,
        }
    }

    /// The preconditioner to use against `op`; the diagonal mode reads the
    /// current operator's diagonal.
    pub fn preconditioner<'a>(&'a self, op: &dyn AssembledOperator) -> Box<dyn Preconditioner + 'a> {
        match &self.factor {
            Some(Factor::Exact(f)) => Box::new(PcRef(f)),
            Some(Factor::Incomplete(f)) => Box::new(PcRef(f)),
            None => Box::new(DiagonalPc::new(&op.diagonal())),
        }
    }

    pub fn has_factor(&self) -> bool {
        self.factor.is_some()
    }

    /// Applies the stored factor as `M ≈ Q⁻¹`; identity without one.
    pub fn apply_inverse(&self, r: &DVector<f64>) -> DVector<f64> {
        match &self.factor {
            Some(Factor::Exact(f)) => f.solve(r),
            Some(Factor::Incomplete(f)) => f.apply(r),
            None => r.clone(),
        }
    }
}

struct PcRef<'a, P: Preconditioner>(&'a P);

impl<P: Preconditioner> Preconditioner for PcRef<'_, P> {
    fn apply(&self, r: &DVector<f64>) -> DVector<f64> {
        self.0.apply(r)
    }
}

/// Advances the schedule after a cap trip: for `m ≥ 10000` the first refresh
/// is incomplete and later ones exact; smaller systems go straight to exact.
/// On failure the state keeps its previous factor.
pub fn refresh_preconditioner(
    pc: &mut PreconditionerState,
    q: &SparseSym,
    outer_iter: usize,
) -> Result<(), GeometryError> {
    let next = if q.nrows() >= LARGE_M && pc.mode == PcMode::Diagonal {
        PcMode::IncompleteCholesky
    } else {
        PcMode::Cholesky
    };
    pc.cholesky_count += 1;
    let factor = match next {
        PcMode::IncompleteCholesky => {
            let f = ichol0(q)?;
            pc.shift = f.shift;
            Factor::Incomplete(f)
        }
        _ => {
            let f = ExactCholesky::factor(q)?;
            pc.shift = 0.0;
            Factor::Exact(f)
        }
    };
    pc.factor = Some(factor);
    pc.mode = next;
    pc.last_factor_iter = Some(outer_iter);
    Ok(())
}

/// Exact factorization of `Q + σI` with `σ = 10⁻⁸·tr(Q)/m`, grown tenfold
/// until it succeeds. Used when `Q` itself is singular.
pub fn refresh_shifted(pc: &mut PreconditionerState, q: &SparseSym, outer_iter: usize) -> Result<(), GeometryError> {
    let n = q.nrows().max(1);
    let mut sigma = 1e-8 * q.trace().abs().max(1e-300) / n as f64;
    for _ in 0..12 {
        pc.cholesky_count += 1;
        if let Ok(f) = ExactCholesky::factor(&q.shifted(sigma)) {
            pc.factor = Some(Factor::Exact(f));
            pc.mode = PcMode::Cholesky;
            pc.shift = sigma;
            pc.last_factor_iter = Some(outer_iter);
            return Ok(());
        }
        sigma *= 10.0;
    }
    Err(GeometryError::CholeskyFailed)
}

/// Returns `b + v` with `v` Gaussian, `‖v‖ = ε`, restricted to `mask` when
/// given, together with `v`.
pub fn perturb_rhs<R: Rng + ?Sized>(
    b: &DVector<f64>,
    eps: f64,
    mask: Option<&[bool]>,
    rng: &mut R,
) -> (DVector<f64>, DVector<f64>) {
    let m = b.len();
    let mut v = DVector::from_iterator(m, (0..m).map(|_| rng.sample::<f64, _>(StandardNormal)));
    if let Some(mask) = mask {
        for (i, keep) in mask.iter().enumerate().take(m) {
            if !keep {
                v[i] = 0.0;
            }
        }
    }
    let nv = v.norm();
    if eps <= 0.0 || nv == 0.0 {
        return (b.clone(), DVector::zeros(m));
    }
    v *= eps / nv;
    (b + &v, v)
}

/// Outcome flags from one adaptive solve, consumed by the driver.
#[derive(Clone, Copy, Debug, Default)]
pub struct SolveEvents {
    pub tripped: bool,
    pub cholesky_failed: bool,
}

/// Adaptive Gram-system solver: owns the preconditioner schedule and the
/// counters reported by the driver.
#[derive(Debug)]
pub struct GramSolver {
    pub state: PreconditionerState,
    pub tol: f64,
    pub cg_iters: usize,
    pub linear_solves: usize,
    pub outer_iter: usize,
    /// Set on the first cap trip; the driver perturbs `b` and clears it.
    pub perturbation_requested: bool,
    pub cholesky_failures: usize,
    pub unconverged_solves: usize,
    events: SolveEvents,
}

impl GramSolver {
    pub fn new(m: usize, t_cg: Option<usize>) -> Self {
        let state = match t_cg {
            Some(t) => PreconditionerState::with_cap(t),
            None => PreconditionerState::new(m),
        };
        Self {
            state,
            tol: PCG_TOL,
            cg_iters: 0,
            linear_solves: 0,
            outer_iter: 0,
            perturbation_requested: false,
            cholesky_failures: 0,
            unconverged_solves: 0,
            events: SolveEvents::default(),
        }
    }

    /// Events since the last call.
    pub fn take_events(&mut self) -> SolveEvents {
        std::mem::take(&mut self.events)
    }

    fn run(&mut self, op: &dyn AssembledOperator, rhs: &DVector<f64>, x0: Option<&DVector<f64>>, cap: usize) -> PcgResult {
        let res = {
            let pc = self.state.preconditioner(op);
            pcg(op, rhs, pc.as_ref(), self.tol, cap, x0)
        };
        self.cg_iters += res.iters;
        res
    }

    /// Refreshes the factor at `op`, falling back to a shifted factorization
    /// when `Q` is not numerically positive definite.
    pub fn refresh(&mut self, op: &dyn AssembledOperator) {
        let q = op.assemble();
        if refresh_preconditioner(&mut self.state, &q, self.outer_iter).is_err() {
            self.cholesky_failures += 1;
            self.events.cholesky_failed = true;
            let _ = refresh_shifted(&mut self.state, &q, self.outer_iter);
        }
    }

    /// Registers a cap trip: requests the one-time perturbation and refreshes.
    pub fn escalate(&mut self, op: &dyn AssembledOperator) {
        self.state.trip_count += 1;
        self.events.tripped = true;
        if !self.state.perturbed {
            self.perturbation_requested = true;
        }
        self.refresh(op);
    }

    /// Iterative refinement `x ← x + (Q + σI)⁻¹(rhs − Qx)` with the shifted
    /// factor. Unlike PCG it does not amplify rounding noise in the null space
    /// of a singular `Q`; components along tiny eigenvalues stay damped.
    fn run_shifted(&mut self, op: &dyn AssembledOperator, rhs: &DVector<f64>, cap: usize) -> PcgResult {
        let target = self.tol * (1.0 + rhs.norm());
        let mut x = self.state.apply_inverse(rhs);
        let mut iters = 1;
        let mut best = (f64::INFINITY, x.clone());
        loop {
            let r = rhs - op.apply(&x);
            let rn = r.norm();
            if rn < best.0 {
                best = (rn, x.clone());
            }
            if rn <= target || iters >= cap || !rn.is_finite() {
                break;
            }
            x += self.state.apply_inverse(&r);
            iters += 1;
        }
        self.cg_iters += iters;
        PcgResult {
            converged: best.0 <= target,
            residual_norm: best.0,
            iters,
            solution: best.1,
        }
    }

    fn shifted(&self) -> bool {
        self.state.shift > 0.0 && self.state.mode == PcMode::Cholesky
    }

    /// Solves `Q x = rhs` to `tol·(1+‖rhs‖)`, escalating on cap trips.
    pub fn solve(&mut self, op: &dyn AssembledOperator, rhs: &DVector<f64>) -> DVector<f64> {
        self.linear_solves += 1;
        let cap = self.state.t_cg;
        if self.shifted() {
            let first = self.run_shifted(op, rhs, cap);
            if first.converged {
                return first.solution;
            }
            self.escalate(op);
            if self.shifted() {
                let long = self.run_shifted(op, rhs, (4 * op.dim()).max(200));
                if !long.converged {
                    self.unconverged_solves += 1;
                }
                return if long.residual_norm <= first.residual_norm { long.solution } else { first.solution };
            }
            let second = self.run(op, rhs, None, cap);
            if second.converged {
                return second.solution;
            }
            let long_cap = (4 * op.dim()).max(200);
            let last = self.run(op, rhs, Some(&second.solution), long_cap);
            if !last.converged {
                self.unconverged_solves += 1;
            }
            return last.solution;
        }
        let first = self.run(op, rhs, None, cap);
        if first.converged {
            return first.solution;
        }
        self.escalate(op);
        if self.shifted() {
            let long = self.run_shifted(op, rhs, (4 * op.dim()).max(200));
            if !long.converged {
                self.unconverged_solves += 1;
            }
            return long.solution;
        }
        let second = self.run(op, rhs, Some(&first.solution), cap);
        if second.converged {
            return second.solution;
        }
        if self.state.mode == PcMode::IncompleteCholesky {
            self.escalate(op);
            let third = self.run(op, rhs, Some(&second.solution), cap);
            if third.converged {
                return third.solution;
            }
        }
        // Singular or badly shifted systems: finish with an uncapped run.
        let long_cap = (4 * op.dim()).max(200);
        let last = self.run(op, rhs, Some(&second.solution), long_cap);
        if !last.converged {
            self.unconverged_solves += 1;
        }
        last.solution
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Dense(DMatrix<f64>);
    impl LinearOperator for Dense {
        fn dim(&self) -> usize {
            self.0.nrows()
        }
        fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
            &self.0 * x
        }
    }
    impl AssembledOperator for Dense {
        fn diagonal(&self) -> DVector<f64> {
            self.0.diagonal()
        }
        fn assemble(&self) -> SparseSym {
            SparseSym::from_dense(&self.0)
        }
    }

    fn random_spd(n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        &g * g.transpose() + DMatrix::identity(n, n) * 0.5
    }

    #[test]
    fn identity_converges_in_one_iteration() {
        let op = DMatrix::<f64>::identity(4, 4);
        let rhs = DVector::from_vec(vec![1.0, -2.0, 3.0, 0.5]);
        let res = pcg(&op, &rhs, &IdentityPc, 1e-9, 20, None);
        assert!(res.converged);
        assert_eq!(res.iters, 1);
        assert_relative_eq!(res.solution, rhs, epsilon = 1e-14);
    }

    #[test]
    fn exact_diagonal_preconditioner_one_iteration() {
        let d = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        let op = DMatrix::from_diagonal(&d);
        let rhs = DVector::from_element(5, 1.0);
        let res = pcg(&op, &rhs, &DiagonalPc::new(&d), 1e-9, 20, None);
        assert!(res.converged);
        assert_eq!(res.iters, 1);
    }

    #[test]
    fn zero_rhs_returns_zero_without_iterating() {
        let op = random_spd(6, 1);
        let res = pcg(&op, &DVector::zeros(6), &IdentityPc, 1e-9, 20, None);
        assert_eq!(res.iters, 0);
        assert_eq!(res.solution.norm(), 0.0);
    }

    #[test]
    fn random_spd_matches_dense_solve() {
        let a = random_spd(20, 7);
        let rhs = DVector::from_fn(20, |i, _| (i as f64).sin());
        let res = pcg(&a, &rhs, &DiagonalPc::new(&a.diagonal()), 1e-13, 200, None);
        let oracle = a.clone().lu().solve(&rhs).unwrap();
        assert!(res.converged);
        assert!((res.solution - &oracle).norm() <= 1e-8 * oracle.norm());
    }

    #[test]
    fn refresh_goes_exact_for_small_systems() {
        let q = SparseSym::from_dense(&random_spd(50, 3));
        let mut pc = PreconditionerState::new(500);
        refresh_preconditioner(&mut pc, &q, 0).unwrap();
        assert_eq!(pc.mode, PcMode::Cholesky);
        assert_eq!(pc.cholesky_count, 1);
    }

    #[test]
    fn refresh_goes_incomplete_first_for_large_systems() {
        let n = LARGE_M + 5;
        let mut upper = vec![BTreeMap::new(); n];
        for (i, row) in upper.iter_mut().enumerate() {
            row.insert(i, 4.0);
            if i + 1 < n {
                row.insert(i + 1, -1.0);
            }
        }
        let q = SparseSym::from_upper(n, upper);
        let mut pc = PreconditionerState::new(n);
        assert_eq!(pc.t_cg, 50);
        refresh_preconditioner(&mut pc, &q, 0).unwrap();
        assert_eq!(pc.mode, PcMode::IncompleteCholesky);
        refresh_preconditioner(&mut pc, &q, 1).unwrap();
        assert_eq!(pc.mode, PcMode::Cholesky);
        // Tridiagonal: IC(0) and the sparse exact factor agree, PCG is exact.
        let rhs = DVector::from_fn(n, |i, _| ((i % 7) as f64) - 3.0);
        let res = pcg(&q, &rhs, &PcRef(&ExactCholesky::factor(&q).unwrap()), 1e-12, 5, None);
        assert!(res.converged && res.iters <= 2);
    }

    #[test]
    fn identity_factor_gives_one_iteration() {
        let q = SparseSym::identity(8);
        let mut pc = PreconditionerState::new(8);
        refresh_preconditioner(&mut pc, &q, 0).unwrap();
        let op = Dense(DMatrix::identity(8, 8));
        let pre = pc.preconditioner(&op);
        let res = pcg(&op, &DVector::from_element(8, 2.0), pre.as_ref(), 1e-9, 20, None);
        assert_eq!(res.iters, 1);
    }

    #[test]
    fn exact_refresh_converges_within_two_iterations() {
        let a = random_spd(40, 11);
        let op = Dense(a.clone());
        let mut solver = GramSolver::new(40, Some(2));
        let rhs = DVector::from_fn(40, |i, _| 1.0 + i as f64);
        let x = solver.solve(&op, &rhs);
        assert!((&a * &x - &rhs).norm() <= 1e-9 * (1.0 + rhs.norm()));
        assert_eq!(solver.state.trip_count, 1);
        assert!(solver.perturbation_requested);
        let before = solver.cg_iters;
        let _ = solver.solve(&op, &rhs);
        assert!(solver.cg_iters - before <= 2);
    }

    #[test]
    fn sparse_cholesky_matches_dense() {
        let n = DENSE_FACTOR_MAX + 10;
        let mut upper = vec![BTreeMap::new(); n];
        for (i, row) in upper.iter_mut().enumerate() {
            row.insert(i, 6.0);
            if i + 3 < n {
                row.insert(i + 3, -1.0);
            }
            if i + 17 < n {
                row.insert(i + 17, 0.5);
            }
        }
        let q = SparseSym::from_upper(n, upper);
        let f = ExactCholesky::factor(&q).unwrap();
        assert!(matches!(f, ExactCholesky::Sparse { .. }));
        let rhs = DVector::from_fn(n, |i, _| (i as f64 * 0.37).cos());
        let x = f.solve(&rhs);
        assert!((q.apply(&x) - &rhs).norm() <= 1e-10 * rhs.norm());
    }

    #[test]
    fn ichol_exact_on_tridiagonal() {
        let n = 30;
        let mut upper = vec![BTreeMap::new(); n];
        for (i, row) in upper.iter_mut().enumerate() {
            row.insert(i, 2.5);
            if i + 1 < n {
                row.insert(i + 1, -1.0);
            }
        }
        let q = SparseSym::from_upper(n, upper);
        let ic = ichol0(&q).unwrap();
        assert_eq!(ic.shift, 0.0);
        let rhs = DVector::from_element(n, 1.0);
        let x = ic.apply(&rhs);
        assert!((q.apply(&x) - rhs).norm() < 1e-12);
    }

    #[test]
    fn ichol_shifts_on_breakdown() {
        let q = SparseSym::from_dense(&DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]));
        let ic = ichol0(&q).unwrap();
        assert!(ic.shift > 0.0);
    }

    #[test]
    fn perturbation_has_requested_norm() {
        let b = DVector::from_vec(vec![1.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (be, v) = perturb_rhs(&b, 1e-6, None, &mut rng);
        assert_relative_eq!((&be - &b).norm(), 1e-6, max_relative = 1e-12);
        assert_relative_eq!(v, &be - &b, epsilon = 1e-15);
        let (same, _) = perturb_rhs(&b, 0.0, None, &mut rng);
        assert_eq!(same, b);
    }

    #[test]
    fn perturbation_is_seeded() {
        let b = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let a = perturb_rhs(&b, 1e-3, None, &mut ChaCha8Rng::seed_from_u64(9)).0;
        let c = perturb_rhs(&b, 1e-3, None, &mut ChaCha8Rng::seed_from_u64(9)).0;
        assert_eq!(a.as_slice(), c.as_slice());
        let masked = perturb_rhs(&b, 1e-3, Some(&[false, true, false]), &mut ChaCha8Rng::seed_from_u64(9)).0;
        assert_eq!(masked[0], 1.0);
        assert_eq!(masked[2], 3.0);
    }

    #[test]
    fn min_degree_is_a_permutation() {
        let q = SparseSym::from_dense(&random_spd(12, 2));
        let mut p = min_degree_ordering(&q);
        p.sort_unstable();
        assert_eq!(p, (0..12).collect::<Vec<_>>());
    }
}
