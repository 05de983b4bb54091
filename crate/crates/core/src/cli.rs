//! Command-line front end: `solve`, `generate` and `certify`.
//!
//! Exit codes: 0 success, 2 input or usage error, 3 the solver did not
//! converge (or a certificate did not verify). Reports are written even when
//! the exit code is 3.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::certificate::{certificate_at, refine_dual, RefineMetric};
use crate::driver::{solve, SolveOptions, SolveStatus};
use crate::error::IoError;
use crate::instances::{
    boxqp_random, random_sparse_problem, read_graph, snl_problem, theta_problem, GraphData,
};
use crate::io::{problem_hash, read_problem_json, read_sdpa, write_problem_json, ReportFile};
use crate::model::{ConeProblem, Family};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NOT_CONVERGED: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "sdpf", version, about = "Feasible low-rank solver for SDPs with a fixed block and a vector cone")]
pub struct Cli {
    /// Worker threads for the inner linear algebra; 1 gives bit-reproducible runs.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve a problem (JSON, SDPA .dat-s, or an edge list with --family theta).
    Solve(SolveArgs),
    /// Write a generated problem as JSON.
    Generate(GenerateArgs),
    /// Recompute residues of a report, optionally refining the dual.
    Certify(CertifyArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FamilyArg {
    Theta,
    Boxqp,
    Snl,
    Random,
}

impl From<FamilyArg> for Family {
    fn from(f: FamilyArg) -> Self {
        match f {
            FamilyArg::Theta => Family::Theta,
            FamilyArg::Boxqp => Family::BoxQp,
            FamilyArg::Snl => Family::Snl,
            FamilyArg::Random => Family::Random,
        }
    }
}

/// Every solver option as a flag; unset flags keep the config-file or family
/// default.
#[derive(Clone, Debug, Default, Args)]
pub struct OptionFlags {
    /// JSON file with solver options; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Gradient-norm stationarity tolerance.
    #[arg(long)]
    pub eps_g: Option<f64>,
    /// Escape threshold on the smallest dual slack eigenvalue.
    #[arg(long)]
    pub eps_h: Option<f64>,
    /// Initial rank.
    #[arg(long)]
    pub r0: Option<usize>,
    /// Columns appended per escape.
    #[arg(long)]
    pub tau: Option<usize>,
    /// Singular-value gap that triggers a rank reduction.
    #[arg(long)]
    pub kappa1: Option<f64>,
    /// Ratio below which vector entries leave the support.
    #[arg(long)]
    pub kappa2: Option<f64>,
    /// Cap on lossy rank/support reductions.
    #[arg(long)]
    pub max_reductions: Option<usize>,
    /// Iteration limit.
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// Wall-clock limit in seconds.
    #[arg(long)]
    pub max_time: Option<f64>,
    /// Non-monotone line-search window.
    #[arg(long)]
    pub window: Option<usize>,
    /// Lower clamp on the Barzilai-Borwein step.
    #[arg(long)]
    pub bb_min: Option<f64>,
    /// Upper clamp on the Barzilai-Borwein step.
    #[arg(long)]
    pub bb_max: Option<f64>,
    /// PCG iteration cap before preconditioner escalation.
    #[arg(long)]
    pub t_cg: Option<usize>,
    /// Initial perturbation of b, relative to 1 + ‖b‖.
    #[arg(long)]
    pub perturb_scale: Option<f64>,
    /// Largest perturbation after doubling.
    #[arg(long)]
    pub perturb_max_scale: Option<f64>,
    /// Seed for every random choice of the solver.
    #[arg(long, env = "SDPF_SEED")]
    pub seed: Option<u64>,
    /// Stop at first-order stationarity without escaping saddles.
    #[arg(long)]
    pub no_escape: bool,
    /// Disable rank and support reduction.
    #[arg(long)]
    pub no_reduce: bool,
    /// Refine the dual multiplier after solving.
    #[arg(long)]
    pub refine: bool,
}

impl OptionFlags {
    pub fn resolve(&self, family: Family) -> Result<SolveOptions, String> {
        let mut o = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
                serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?
            }
            None => SolveOptions::for_family(family),
        };
        macro_rules! set {
            ($($f:ident),*) => {$(if let Some(v) = self.$f { o.$f = v; })*};
        }
        set!(eps_g, eps_h, kappa1, kappa2, max_reductions, max_iter, window, bb_min, bb_max,
             perturb_scale, perturb_max_scale, seed);
        if self.r0.is_some() {
            o.r0 = self.r0;
        }
        if self.tau.is_some() {
            o.tau = self.tau;
        }
        if self.max_time.is_some() {
            o.max_time = self.max_time;
        }
        if self.t_cg.is_some() {
            o.t_cg = self.t_cg;
        }
        if self.no_escape {
            o.escape = false;
        }
        if self.no_reduce {
            o.reduce = false;
        }
        if self.refine {
            o.refine = true;
        }
        Ok(o)
    }
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    pub input: PathBuf,
    /// Family of the input; required for graph edge lists (`theta`).
    #[arg(long, value_enum)]
    pub family: Option<FamilyArg>,
    /// Report path; defaults to `<input>.report.json`.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
    /// Largest accepted residue max(Rp, Rd, Rc) for exit code 0.
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[command(flatten)]
    pub opts: OptionFlags,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub family: String,
    /// Order (random, theta) or QP dimension (boxqp).
    #[arg(long, default_value_t = 20)]
    pub n: usize,
    /// Vector-variable length (random) or number of sensors (snl).
    #[arg(long, default_value_t = 10)]
    pub p: usize,
    /// Number of constraints (random).
    #[arg(long, default_value_t = 20)]
    pub m: usize,
    /// Density of Q (boxqp).
    #[arg(long, default_value_t = 0.5)]
    pub density: f64,
    /// Edge probability (theta).
    #[arg(long, default_value_t = 0.3)]
    pub edge_prob: f64,
    #[arg(long, env = "SDPF_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct CertifyArgs {
    /// Problem file the report was produced from.
    pub problem: PathBuf,
    pub report: PathBuf,
    #[arg(long, value_enum)]
    pub family: Option<FamilyArg>,
    #[arg(long)]
    pub refine: bool,
}

/// Loads a problem by extension: `.json`, `.dat-s`, otherwise a graph edge
/// list when the family is theta.
pub fn load_problem(path: &Path, family: Option<Family>) -> Result<ConeProblem, IoError> {
    let name = path.to_string_lossy();
    let prob = if name.ends_with(".json") {
        read_problem_json(path)?
    } else if name.ends_with(".dat-s") {
        read_sdpa(path)?
    } else if family == Some(Family::Theta) {
        theta_problem(&read_graph(path)?)?
    } else {
        return Err(IoError::Parse {
            line: 0,
            message: format!("{name}: unknown input kind; use .json, .dat-s, or --family theta with a graph"),
        });
    };
    Ok(match family {
        Some(f) if prob.family == Family::General => prob.with_family(f),
        _ => prob,
    })
}

pub fn cmd_solve(args: &SolveArgs) -> i32 {
    let family = args.family.map(Family::from);
    let prob = match load_problem(&args.input, family) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_INPUT;
        }
    };
    let opts = match args.opts.resolve(prob.family) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_INPUT;
        }
    };
    if let Err(e) = opts.validate(&prob) {
        eprintln!("error: {e}");
        return EXIT_INPUT;
    }
    let out = match solve(&prob, &opts, None) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_NOT_CONVERGED;
        }
    };
    let path = args.output.clone().unwrap_or_else(|| {
        let mut p = args.input.clone().into_os_string();
        p.push(".report.json");
        PathBuf::from(p)
    });
    let report = match ReportFile::new(&prob, &opts, &out).and_then(|r| r.write(&path).map(|_| r)) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_INPUT;
        }
    };
    println!(
        "status {:?}  objective {:.10e}  Rp {:.2e}  Rd {:.2e}  Rc {:.2e}  T_alg {}  T_cg {}  T_lin {}  T_ch {}",
        report.status,
        report.objective,
        report.residues.rp,
        report.residues.rd,
        report.residues.rc,
        report.counters.t_alg,
        report.counters.t_cg,
        report.counters.t_lin,
        report.counters.t_ch
    );
    if out.report.status == SolveStatus::Stationary && out.certificate.max_residue() <= args.tol {
        EXIT_OK
    } else {
        EXIT_NOT_CONVERGED
    }
}

pub fn generate_problem(args: &GenerateArgs) -> Result<ConeProblem, String> {
    let err = |e: crate::error::ModelError| e.to_string();
    match args.family.as_str() {
        "random" => random_sparse_problem(args.n, args.p, args.m, args.seed).map_err(err),
        "boxqp" => boxqp_random(args.n, args.density, args.seed).map_err(err),
        "snl" if args.p >= 1 => snl_problem(args.p, args.seed).map_err(err),
        "snl" => Err("snl needs --p >= 1".into()),
        "theta" => theta_problem(&GraphData::random(args.n, args.edge_prob, args.seed)).map_err(err),
        other => Err(format!("unknown family `{other}`")),
    }
}

pub fn cmd_generate(args: &GenerateArgs) -> i32 {
    let prob = match generate_problem(args) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_INPUT;
        }
    };
    match write_problem_json(&args.output, &prob) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_INPUT
        }
    }
}

/// Agreement required between stored and recomputed residues.
pub const CERTIFY_TOL: f64 = 1e-10;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= CERTIFY_TOL * (1.0 + a.abs().max(b.abs()))
}

pub fn cmd_certify(args: &CertifyArgs) -> i32 {
    let prob = match load_problem(&args.problem, args.family.map(Family::from)) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_INPUT;
        }
    };
    let report = match ReportFile::read(&args.report) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_INPUT;
        }
    };
    match problem_hash(&prob) {
        Ok(h) if h == report.problem_hash => {}
        Ok(_) => {
            eprintln!("error: report was produced for a different problem (hash mismatch)");
            return EXIT_INPUT;
        }
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_INPUT;
        }
    }
    let pt = match report.point() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_INPUT;
        }
    };
    let lambda = report.lambda();
    if pt.r.nrows() != prob.n - prob.k || pt.y.nrows() != prob.p || lambda.len() != prob.m() {
        eprintln!("error: report solution does not match the problem dimensions");
        return EXIT_INPUT;
    }
    let cert = match certificate_at(&prob, &pt, &lambda) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_INPUT;
        }
    };
    let stored = &report.residues;
    let matches = close(cert.rp, stored.rp) && close(cert.rd, stored.rd) && close(cert.rc, stored.rc);
    println!(
        "recomputed  Rp {:.6e}  Rd {:.6e}  Rc {:.6e}  ({})",
        cert.rp,
        cert.rd,
        cert.rc,
        if matches { "matches report" } else { "DIFFERS from report" }
    );
    if args.refine {
        let out = refine_dual(&prob, &pt, &lambda, RefineMetric::GramInverse, &report.options);
        if let Some(w) = &out.warning {
            eprintln!("warning: dual refinement: {w}");
        }
        match certificate_at(&prob, &pt, &out.lambda) {
            Ok(after) => println!("refine      Rd before {:.6e}  Rd after {:.6e}", cert.rd, after.rd),
            Err(e) => {
                eprintln!("error: {e}");
                return EXIT_NOT_CONVERGED;
            }
        }
    }
    if matches {
        EXIT_OK
    } else {
        EXIT_NOT_CONVERGED
    }
}

/// Parses arguments and runs; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    if let Some(t) = cli.threads {
        // Already initialized in-process (tests); the pool stays as it is.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t.max(1)).build_global();
    }
    match &cli.command {
        Command::Solve(a) => cmd_solve(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Certify(a) => cmd_certify(a),
    }
}
