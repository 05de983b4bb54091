//! Generators and readers for the benchmark families: Lovász theta, box QP,
//! sensor network localization and a seeded random sparse family.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{IoError, ModelError};
use crate::model::{
    ConeProblem, Constraints, Family, InitialPoint, Objective, ResidualTerm, SparseMatrix, SparseVec, SymMatrix,
};

/// Simple undirected graph with 1-based vertices and edges `(i, j, w)`, `i < j`.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphData {
    pub n: usize,
    pub edges: Vec<(usize, usize, f64)>,
}

impl GraphData {
    /// Validates simplicity; endpoints are reordered so that `i < j`.
    pub fn new(n: usize, edges: Vec<(usize, usize, f64)>) -> Result<Self, IoError> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::with_capacity(edges.len());
        for (line, (i, j, w)) in edges.into_iter().enumerate() {
            check_edge(n, i, j, line + 1)?;
            let (a, b) = (i.min(j), i.max(j));
            if !seen.insert((a, b)) {
                return Err(IoError::DuplicateEdge { i: a, j: b, line: line + 1 });
            }
            out.push((a, b, w));
        }
        Ok(Self { n, edges: out })
    }

    pub fn empty(n: usize) -> Self {
        Self { n, edges: Vec::new() }
    }

    pub fn complete(n: usize) -> Self {
        let edges = (1..=n)
            .flat_map(|i| (i + 1..=n).map(move |j| (i, j, 1.0)))
            .collect();
        Self { n, edges }
    }

    pub fn cycle(n: usize) -> Self {
        let mut edges: Vec<_> = (1..n).map(|i| (i, i + 1, 1.0)).collect();
        if n > 2 {
            edges.push((1, n, 1.0));
        }
        Self { n, edges }
    }

    /// Erdős–Rényi graph with edge probability `prob`.
    pub fn random(n: usize, prob: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut edges = Vec::new();
        for i in 1..=n {
            for j in i + 1..=n {
                if rng.random::<f64>() < prob {
                    edges.push((i, j, 1.0));
                }
            }
        }
        Self { n, edges }
    }
}

fn check_edge(n: usize, i: usize, j: usize, line: usize) -> Result<(), IoError> {
    if i == j {
        return Err(IoError::SelfLoop { vertex: i, line });
    }
    if i == 0 || j == 0 || i > n || j > n {
        return Err(IoError::Parse {
            line,
            message: format!("vertex out of range 1..={n}"),
        });
    }
    Ok(())
}

/// `min −⟨eeᵀ, X⟩  s.t.  ⟨I, X⟩ = 1,  X_ij = 0 for every edge`.
/// Edge weights are ignored.
pub fn theta_problem(g: &GraphData) -> Result<ConeProblem, ModelError> {
    let n = g.n;
    if n == 0 {
        return Err(ModelError::Invalid("graph has no vertices".into()));
    }
    let mut mats = Vec::with_capacity(g.edges.len() + 1);
    mats.push(SymMatrix::identity(n));
    for &(i, j, _) in &g.edges {
        if i == j || i == 0 || j == 0 || i > n || j > n {
            return Err(ModelError::Invalid(format!("malformed edge ({i}, {j})")));
        }
        let (a, b) = (i.min(j) - 1, i.max(j) - 1);
        mats.push(SymMatrix::from_upper(n, [(a, b, 0.5)]));
    }
    let m = mats.len();
    let mut b = DVector::zeros(m);
    b[0] = 1.0;
    let c = SymMatrix::zeros(n).with_rank_one(-1.0, SparseVec::from_dense(&DVector::from_element(n, 1.0)));
    Ok(ConeProblem::new(
        n,
        0,
        0,
        Constraints::new(n, mats)?,
        SparseMatrix::zeros(m, 0),
        b,
        Objective::Linear {
            c_mat: Arc::new(c),
            c_vec: DVector::zeros(0),
        },
    )?
    .with_family(Family::Theta))
}

/// Relaxation of `min ½zᵀQz + aᵀz, 0 ≤ z ≤ e`: order `n+1`, `k = 1`,
/// `diag(Z) − z + x = 0` with `x ≥ 0`.
pub fn boxqp_problem(q: &DMatrix<f64>, a: &DVector<f64>) -> Result<ConeProblem, ModelError> {
    let n = a.len();
    if q.nrows() != n || q.ncols() != n {
        return Err(ModelError::Dimension(format!("Q is {}x{}, a has {n}", q.nrows(), q.ncols())));
    }
    let mut c = Vec::new();
    for j in 0..n {
        if a[j] != 0.0 {
            c.push((0, j + 1, 0.5 * a[j]));
        }
        for i in 0..=j {
            let v = 0.5 * (q[(i, j)] + q[(j, i)]) * 0.5;
            if v != 0.0 {
                c.push((i + 1, j + 1, v));
            }
        }
    }
    let order = n + 1;
    let mats = (0..n)
        .map(|j| SymMatrix::from_upper(order, [(0, j + 1, -0.5), (j + 1, j + 1, 1.0)]))
        .collect();
    Ok(ConeProblem::new(
        order,
        1,
        n,
        Constraints::new(order, mats)?,
        SparseMatrix::identity(n),
        DVector::zeros(n),
        Objective::Linear {
            c_mat: Arc::new(SymMatrix::from_upper(order, c)),
            c_vec: DVector::zeros(n),
        },
    )?
    .with_family(Family::BoxQp))
}

/// Random box QP data: integer entries uniform in `[−50, 50]`, `Q` with
/// off-diagonal and diagonal density `density`, `a` dense.
pub fn boxqp_data(n: usize, density: f64, seed: u64) -> (DMatrix<f64>, DVector<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in 0..=j {
            if rng.random::<f64>() < density {
                let v = rng.random_range(-50i32..=50) as f64;
                q[(i, j)] = v;
                q[(j, i)] = v;
            }
        }
    }
    let a = DVector::from_fn(n, |_, _| rng.random_range(-50i32..=50) as f64);
    (q, a)
}

pub fn boxqp_random(n: usize, density: f64, seed: u64) -> Result<ConeProblem, ModelError> {
    let (q, a) = boxqp_data(n, density, seed);
    boxqp_problem(&q, &a)
}

pub const SNL_ANCHOR_RADIUS: f64 = 0.3;
pub const SNL_NOISE: f64 = 0.1;

/// Sensor positions, anchors and the measured distances.
#[derive(Clone, Debug, PartialEq)]
pub struct SnlData {
    pub positions: Vec<[f64; 3]>,
    pub anchors: Vec<[f64; 3]>,
    /// `(i, j, d_ij)` between sensors, 0-based, `i < j`.
    pub neighbors: Vec<(usize, usize, f64)>,
    /// `(i, k, d_ik)` between sensor `i` and anchor `k`.
    pub anchor_links: Vec<(usize, usize, f64)>,
}

/// The eight anchors `(±0.3, ±0.3, ±0.3)`.
pub fn snl_anchors() -> Vec<[f64; 3]> {
    let s = SNL_ANCHOR_RADIUS;
    let mut out = Vec::with_capacity(8);
    for a in [-s, s] {
        for b in [-s, s] {
            for c in [-s, s] {
                out.push([a, b, c]);
            }
        }
    }
    out
}

pub fn snl_radius(p: usize) -> f64 {
    (15.0 / (std::f64::consts::PI * p as f64)).cbrt()
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Distances within `radius` (sensors) and `anchor_radius` (anchors), scaled
/// by `1 + noise·σ` when a generator is given.
pub fn snl_measure(
    positions: &[[f64; 3]],
    radius: f64,
    anchor_radius: f64,
    noise: Option<(f64, &mut ChaCha8Rng)>,
) -> SnlData {
    let anchors = snl_anchors();
    let mut noise = noise;
    let mut jitter = |d: f64| match noise.as_mut() {
        Some((level, rng)) => d * (1.0 + *level * rng.sample::<f64, _>(StandardNormal)),
        None => d,
    };
    let mut neighbors = Vec::new();
    for i in 0..positions.len() {
        for j in i + 1..positions.len() {
            let d = dist(&positions[i], &positions[j]);
            if d <= radius {
                neighbors.push((i, j, jitter(d)));
            }
        }
    }
    let mut anchor_links = Vec::new();
    for (i, x) in positions.iter().enumerate() {
        for (k, a) in anchors.iter().enumerate() {
            let d = dist(x, a);
            if d <= anchor_radius {
                anchor_links.push((i, k, jitter(d)));
            }
        }
    }
    SnlData {
        positions: positions.to_vec(),
        anchors,
        neighbors,
        anchor_links,
    }
}

/// Every sensor reaches an anchor through the neighbor graph. Without this
/// the regularizer makes the objective unbounded below.
pub fn snl_anchored(data: &SnlData) -> bool {
    let p = data.positions.len();
    let mut parent: Vec<usize> = (0..=p).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    let union = |parent: &mut Vec<usize>, a: usize, b: usize| {
        let (ra, rb) = (find(parent, a), find(parent, b));
        parent[ra] = rb;
    };
    for &(i, j, _) in &data.neighbors {
        union(&mut parent, i, j);
    }
    for &(i, _, _) in &data.anchor_links {
        union(&mut parent, i, p);
    }
    let root = find(&mut parent, p);
    (0..p).all(|i| find(&mut parent, i) == root)
}

/// Seeded SNL data: positions uniform in `[−0.5, 0.5]³`, redrawn until every
/// sensor is anchored, then noisy distances.
pub fn snl_data(p: usize, seed: u64) -> SnlData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let radius = snl_radius(p.max(1));
    loop {
        let positions: Vec<[f64; 3]> = (0..p)
            .map(|_| {
                [
                    rng.random::<f64>() - 0.5,
                    rng.random::<f64>() - 0.5,
                    rng.random::<f64>() - 0.5,
                ]
            })
            .collect();
        let exact = snl_measure(&positions, radius, SNL_ANCHOR_RADIUS, None);
        if snl_anchored(&exact) {
            return snl_measure(&positions, radius, SNL_ANCHOR_RADIUS, Some((SNL_NOISE, &mut rng)));
        }
    }
}

/// Quadratic-residual SDP over `X = [[I₃, Uᵀ], [U, ·]]` with the spreading
/// regularizer `−(1/p)⟨I − aaᵀ, X⟩`.
pub fn snl_from_data(data: &SnlData) -> Result<ConeProblem, ModelError> {
    let p = data.positions.len();
    if p == 0 {
        return Err(ModelError::Invalid("SNL needs at least one sensor".into()));
    }
    let d = 3;
    let n = d + p;
    let q = data.anchors.len();
    let mut terms = Vec::with_capacity(data.neighbors.len() + data.anchor_links.len());
    for &(i, j, dij) in &data.neighbors {
        terms.push(ResidualTerm {
            g: SparseVec::from_pairs([(d + i, 1.0), (d + j, -1.0)]),
            d: dij * dij,
        });
    }
    for &(i, k, dik) in &data.anchor_links {
        let a = data.anchors[k];
        terms.push(ResidualTerm {
            g: SparseVec::from_pairs([(0, -a[0]), (1, -a[1]), (2, -a[2]), (d + i, 1.0)]),
            d: dik * dik,
        });
    }
    let scale = 1.0 / ((p + q) as f64).sqrt();
    let mut a = DVector::from_element(n, scale);
    for c in 0..d {
        a[c] = data.anchors.iter().map(|x| x[c]).sum::<f64>() * scale;
    }
    let w = 1.0 / p as f64;
    let reg = SymMatrix::from_upper(n, (0..n).map(|i| (i, i, -w))).with_rank_one(w, SparseVec::from_dense(&a));
    Ok(ConeProblem::new(
        n,
        d,
        0,
        Constraints::empty(n),
        SparseMatrix::zeros(0, 0),
        DVector::zeros(0),
        Objective::QuadraticResidual {
            terms,
            c_mat: reg,
            c_vec: DVector::zeros(0),
        },
    )?
    .with_family(Family::Snl))
}

pub fn snl_problem(p: usize, seed: u64) -> Result<ConeProblem, ModelError> {
    snl_from_data(&snl_data(p, seed))
}

/// The factor `R` placing each sensor at its true position.
pub fn snl_ground_truth(data: &SnlData) -> DMatrix<f64> {
    DMatrix::from_fn(data.positions.len(), 3, |i, c| data.positions[i][c])
}

/// Random block-diagonal instance with blocks of orders `⌊n/2⌋` and `⌈n/2⌉`:
/// 3 upper-triangle entries per `A_i` inside one block, 3 nonzeros per row of
/// `B`, `b = 𝒦(X₀, x₀)` at a recorded factorized point, and a strictly
/// feasible dual so the optimum is attained.
pub fn random_sparse_problem(n: usize, p: usize, m: usize, seed: u64) -> Result<ConeProblem, ModelError> {
    if m == 0 {
        return Err(ModelError::Invalid("random family needs m >= 1".into()));
    }
    if n < 2 {
        return Err(ModelError::Invalid("random family needs n >= 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n1 = n / 2;
    let blocks = [(0usize, n1), (n1, n - n1)];
    let mut mats = Vec::with_capacity(m);
    for _ in 0..m {
        let (off, size) = blocks[rng.random_range(0..2)];
        let slots = size * (size + 1) / 2;
        let picks = sample(&mut rng, slots, 3.min(slots)).into_vec();
        let mut entries: Vec<(usize, usize, f64)> = picks
            .into_iter()
            .map(|s| {
                let (i, j) = upper_slot(s);
                (off + i, off + j, 0.0)
            })
            .collect();
        entries.sort_by_key(|e| (e.0, e.1));
        for e in &mut entries {
            e.2 = nonzero_uniform(&mut rng);
        }
        mats.push(SymMatrix::from_upper(n, entries));
    }
    let mut trip = Vec::new();
    if p > 0 {
        for i in 0..m {
            for j in sample(&mut rng, p, 3.min(p)).into_vec() {
                trip.push((i, j, nonzero_uniform(&mut rng)));
            }
        }
    }
    let cons = Constraints::new(n, mats)?;
    let coupling = SparseMatrix::from_triplets(m, p, &trip)?;

    let r0 = (((2 * m) as f64).sqrt().ceil() as usize).clamp(1, n);
    let r = DMatrix::from_fn(n, r0, |_, _| rng.sample::<f64, _>(StandardNormal) / (r0 as f64).sqrt());
    let y = DVector::from_fn(p, |_, _| 0.5 + rng.random::<f64>());
    let x = y.map(|v| v * v);
    let b = cons.apply_factor(&r) + coupling.mul(&x);

    let lambda0 = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
    let diag: Vec<(usize, usize, f64)> = (0..n).map(|i| (i, i, 0.5 + rng.random::<f64>())).collect();
    let d = SymMatrix::from_upper(n, diag);
    let c_mat = SymMatrix::combine(n, &[(1.0, &cons.adjoint(&lambda0)), (1.0, &d)]);
    let s0 = DVector::from_fn(p, |_, _| 0.5 + rng.random::<f64>());
    let c_vec = if p > 0 { coupling.tr_mul(&lambda0) + s0 } else { DVector::zeros(0) };

    Ok(ConeProblem::new(
        n,
        0,
        p,
        cons,
        coupling,
        b,
        Objective::Linear {
            c_mat: Arc::new(c_mat),
            c_vec,
        },
    )?
    .with_family(Family::Random)
    .with_init(InitialPoint { r, y }))
}

/// Column-major enumeration of the upper triangle: slot → `(i, j)`, `i ≤ j`.
fn upper_slot(s: usize) -> (usize, usize) {
    let mut j = 0;
    while (j + 1) * (j + 2) / 2 <= s {
        j += 1;
    }
    (s - j * (j + 1) / 2, j)
}

fn nonzero_uniform(rng: &mut ChaCha8Rng) -> f64 {
    let v: f64 = rng.random_range(0.1..1.0);
    if rng.random::<bool>() {
        v
    } else {
        -v
    }
}

/// Reads the edge-list format: header `n m`, then `m` lines `i j w`.
/// Blank lines and lines starting with `#` or `%` are skipped.
pub fn parse_graph(text: &str) -> Result<GraphData, IoError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#') && !l.starts_with('%'));
    let (hline, header) = lines.next().ok_or(IoError::Parse {
        line: 1,
        message: "missing header".into(),
    })?;
    let nums: Vec<&str> = header.split_whitespace().collect();
    if nums.len() < 2 {
        return Err(IoError::Parse {
            line: hline,
            message: "header must be `n m`".into(),
        });
    }
    let n = parse_usize(nums[0], hline)?;
    let m = parse_usize(nums[1], hline)?;
    let mut seen = BTreeSet::new();
    let mut edges = Vec::with_capacity(m);
    for (line, l) in lines {
        let f: Vec<&str> = l.split_whitespace().collect();
        if f.len() < 2 || f.len() > 3 {
            return Err(IoError::Parse {
                line,
                message: "expected `i j [w]`".into(),
            });
        }
        let i = parse_usize(f[0], line)?;
        let j = parse_usize(f[1], line)?;
        let w = match f.get(2) {
            Some(s) => s.parse::<f64>().map_err(|e| IoError::Parse {
                line,
                message: e.to_string(),
            })?,
            None => 1.0,
        };
        check_edge(n, i, j, line)?;
        let (a, b) = (i.min(j), i.max(j));
        if !seen.insert((a, b)) {
            return Err(IoError::DuplicateEdge { i: a, j: b, line });
        }
        edges.push((a, b, w));
    }
    if edges.len() != m {
        return Err(IoError::Parse {
            line: hline,
            message: format!("header announces {m} edges, found {}", edges.len()),
        });
    }
    Ok(GraphData { n, edges })
}

fn parse_usize(s: &str, line: usize) -> Result<usize, IoError> {
    s.parse().map_err(|_| IoError::Parse {
        line,
        message: format!("expected a nonnegative integer, got `{s}`"),
    })
}

pub fn read_graph(path: &Path) -> Result<GraphData, IoError> {
    let text = std::fs::read_to_string(path).map_err(|source| IoError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_graph(&text)
}

pub fn format_graph(g: &GraphData) -> String {
    let mut s = format!("{} {}\n", g.n, g.edges.len());
    for &(i, j, w) in &g.edges {
        let _ = writeln!(s, "{i} {j} {w}");
    }
    s
}

pub fn write_graph(path: &Path, g: &GraphData) -> Result<(), IoError> {
    std::fs::write(path, format_graph(g)).map_err(|source| IoError::Io {
        path: path.display().to_string(),
        source,
    })
}
