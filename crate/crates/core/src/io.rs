//! JSON problem schema, SDPA sparse reader and the versioned JSON report.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::certificate::RdMethod;
use crate::driver::{SolveOptions, SolveOutput, SolveReport, SolveStatus};
use crate::error::{IoError, ModelError};
use crate::geometry::FactorPoint;
use crate::model::{
    ConeProblem, Constraints, Family, InitialPoint, Objective, RankOne, ResidualTerm, SparseMatrix, SparseVec,
    SymMatrix,
};

pub const PROBLEM_FORMAT: &str = "sdpf-problem";
pub const REPORT_FORMAT: &str = "sdpf-report";
pub const SCHEMA_VERSION: u32 = 1;

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseMat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DenseMat {
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            data.extend(m.row(i).iter());
        }
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
    }

    pub fn to_matrix(&self) -> Result<DMatrix<f64>, ModelError> {
        if self.data.len() != self.rows * self.cols {
            return Err(ModelError::Dimension(format!(
                "dense matrix {}x{} has {} entries",
                self.rows,
                self.cols,
                self.data.len()
            )));
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankOneJson {
    pub weight: f64,
    /// `(index, value)` pairs.
    pub u: Vec<(usize, f64)>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SymMatrixJson {
    /// Upper-triangle entries `(i, j, v)`, 0-based, `i ≤ j`.
    #[serde(default)]
    pub entries: Vec<(usize, usize, f64)>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub lowrank: Vec<RankOneJson>,
}

impl SymMatrixJson {
    pub fn from_sym(a: &SymMatrix) -> Self {
        Self {
            entries: a.entries().to_vec(),
            lowrank: a
                .lowrank()
                .iter()
                .map(|t: &RankOne| RankOneJson {
                    weight: t.weight,
                    u: t.u.idx.iter().copied().zip(t.u.val.iter().copied()).collect(),
                })
                .collect(),
        }
    }

    pub fn to_sym(&self, n: usize) -> Result<SymMatrix, ModelError> {
        let mut m = SymMatrix::from_triplets(n, &self.entries)?;
        for t in &self.lowrank {
            if let Some(&(i, _)) = t.u.iter().find(|(i, _)| *i >= n) {
                return Err(ModelError::IndexOutOfRange { row: i, col: 0, order: n });
            }
            m.push_rank_one(t.weight, SparseVec::from_pairs(t.u.iter().copied()));
        }
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualTermJson {
    pub g: Vec<(usize, f64)>,
    pub d: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ObjectiveJson {
    Linear {
        c_mat: SymMatrixJson,
        #[serde(default)]
        c_vec: Vec<f64>,
    },
    QuadraticResidual {
        terms: Vec<ResidualTermJson>,
        c_mat: SymMatrixJson,
        #[serde(default)]
        c_vec: Vec<f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitJson {
    pub r: DenseMat,
    pub y: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemFile {
    pub format: String,
    pub version: u32,
    pub n: usize,
    #[serde(default)]
    pub k: usize,
    #[serde(default)]
    pub p: usize,
    #[serde(default)]
    pub family: Family,
    pub constraints: Vec<SymMatrixJson>,
    /// Entries `(row, col, v)` of `B`.
    #[serde(default)]
    pub coupling: Vec<(usize, usize, f64)>,
    pub b: Vec<f64>,
    pub objective: ObjectiveJson,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<InitJson>,
}

impl ProblemFile {
    pub fn from_problem(prob: &ConeProblem) -> Result<Self, ModelError> {
        let objective = match &prob.objective {
            Objective::Linear { c_mat, c_vec } => ObjectiveJson::Linear {
                c_mat: SymMatrixJson::from_sym(c_mat),
                c_vec: c_vec.iter().copied().collect(),
            },
            Objective::QuadraticResidual { terms, c_mat, c_vec } => ObjectiveJson::QuadraticResidual {
                terms: terms
                    .iter()
                    .map(|t| ResidualTermJson {
                        g: t.g.idx.iter().copied().zip(t.g.val.iter().copied()).collect(),
                        d: t.d,
                    })
                    .collect(),
                c_mat: SymMatrixJson::from_sym(c_mat),
                c_vec: c_vec.iter().copied().collect(),
            },
            Objective::Custom(_) => {
                return Err(ModelError::Invalid("custom objectives cannot be serialized".into()));
            }
        };
        Ok(Self {
            format: PROBLEM_FORMAT.into(),
            version: SCHEMA_VERSION,
            n: prob.n,
            k: prob.k,
            p: prob.p,
            family: prob.family,
            constraints: prob.constraints.mats().iter().map(SymMatrixJson::from_sym).collect(),
            coupling: prob.coupling.triplets(),
            b: prob.b.iter().copied().collect(),
            objective,
            init: prob.init.as_ref().map(|i| InitJson {
                r: DenseMat::from_matrix(&i.r),
                y: i.y.iter().copied().collect(),
            }),
        })
    }

    pub fn to_problem(&self) -> Result<ConeProblem, ModelError> {
        if self.format != PROBLEM_FORMAT || self.version != SCHEMA_VERSION {
            return Err(ModelError::Invalid(format!(
                "unsupported problem format `{}` v{}",
                self.format, self.version
            )));
        }
        let n = self.n;
        let mats = self
            .constraints
            .iter()
            .map(|c| c.to_sym(n))
            .collect::<Result<Vec<_>, _>>()?;
        let m = mats.len();
        let coupling = SparseMatrix::from_triplets(m, self.p, &self.coupling)?;
        let objective = match &self.objective {
            ObjectiveJson::Linear { c_mat, c_vec } => Objective::Linear {
                c_mat: Arc::new(c_mat.to_sym(n)?),
                c_vec: vec_or_zeros(c_vec, self.p)?,
            },
            ObjectiveJson::QuadraticResidual { terms, c_mat, c_vec } => {
                let terms = terms
                    .iter()
                    .map(|t| {
                        if let Some(&(i, _)) = t.g.iter().find(|(i, _)| *i >= n) {
                            return Err(ModelError::IndexOutOfRange { row: i, col: 0, order: n });
                        }
                        Ok(ResidualTerm {
                            g: SparseVec::from_pairs(t.g.iter().copied()),
                            d: t.d,
                        })
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                Objective::QuadraticResidual {
                    terms,
                    c_mat: c_mat.to_sym(n)?,
                    c_vec: vec_or_zeros(c_vec, self.p)?,
                }
            }
        };
        let mut prob = ConeProblem::new(
            n,
            self.k,
            self.p,
            Constraints::new(n, mats)?,
            coupling,
            DVector::from_vec(self.b.clone()),
            objective,
        )?
        .with_family(self.family);
        if let Some(init) = &self.init {
            let r = init.r.to_matrix()?;
            if r.nrows() != n - self.k || init.y.len() != self.p {
                return Err(ModelError::Dimension("init point has the wrong shape".into()));
            }
            prob = prob.with_init(InitialPoint {
                r,
                y: DVector::from_vec(init.y.clone()),
            });
        }
        Ok(prob)
    }
}

fn vec_or_zeros(v: &[f64], p: usize) -> Result<DVector<f64>, ModelError> {
    match v.len() {
        0 => Ok(DVector::zeros(p)),
        l if l == p => Ok(DVector::from_column_slice(v)),
        l => Err(ModelError::Dimension(format!("c has length {l}, expected {p}"))),
    }
}

fn read_text(path: &Path) -> Result<String, IoError> {
    std::fs::read_to_string(path).map_err(|source| IoError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    std::fs::write(path, text).map_err(|source| IoError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn problem_to_json(prob: &ConeProblem) -> Result<String, IoError> {
    Ok(serde_json::to_string_pretty(&ProblemFile::from_problem(prob)?)?)
}

pub fn problem_from_json(text: &str) -> Result<ConeProblem, IoError> {
    let file: ProblemFile = serde_json::from_str(text)?;
    Ok(file.to_problem()?)
}

pub fn read_problem_json(path: &Path) -> Result<ConeProblem, IoError> {
    problem_from_json(&read_text(path)?)
}

pub fn write_problem_json(path: &Path, prob: &ConeProblem) -> Result<(), IoError> {
    write_text(path, &(problem_to_json(prob)? + "\n"))
}

/// SHA-256 of the compact canonical JSON encoding.
pub fn problem_hash(prob: &ConeProblem) -> Result<String, IoError> {
    let canonical = serde_json::to_string(&ProblemFile::from_problem(prob)?)?;
    let digest = Sha256::digest(canonical.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// SDPA sparse format (`.dat-s`). The SDPA dual `max ⟨F₀, Y⟩, ⟨F_i, Y⟩ = c_i`
/// becomes `min ⟨−F₀, X⟩, ⟨F_i, X⟩ = c_i`; blocks are embedded on the diagonal
/// and diagonal (negative-size) blocks occupy diagonal positions only.
pub fn parse_sdpa(text: &str) -> Result<ConeProblem, IoError> {
    let mut tokens: Vec<(usize, String)> = Vec::new();
    let mut stage = 0usize;
    let mut m = 0usize;
    let mut nblocks = 0usize;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('"') || line.starts_with('*') {
            continue;
        }
        let clean: String = line
            .chars()
            .map(|c| if matches!(c, ',' | '{' | '}' | '(' | ')') { ' ' } else { c })
            .collect();
        let words: Vec<String> = clean.split_whitespace().map(String::from).collect();
        match stage {
            0 => {
                m = parse_num::<usize>(&words[0], lineno + 1)?;
                stage = 1;
            }
            1 => {
                nblocks = parse_num::<usize>(&words[0], lineno + 1)?;
                stage = 2;
            }
            _ => {
                for w in words {
                    tokens.push((lineno + 1, w));
                }
                if stage == 2 && tokens.len() >= nblocks {
                    stage = 3;
                }
            }
        }
    }
    if stage < 3 {
        return Err(IoError::Parse {
            line: 0,
            message: "truncated SDPA header".into(),
        });
    }
    let mut it = tokens.into_iter();
    let mut sizes = Vec::with_capacity(nblocks);
    for _ in 0..nblocks {
        let (l, w) = it.next().expect("counted above");
        sizes.push(parse_num::<i64>(&w, l)?);
    }
    let mut offsets = Vec::with_capacity(nblocks);
    let mut n = 0usize;
    for &s in &sizes {
        if s == 0 {
            return Err(IoError::Parse {
                line: 0,
                message: "zero block size".into(),
            });
        }
        offsets.push(n);
        n += s.unsigned_abs() as usize;
    }
    let mut c = Vec::with_capacity(m);
    for _ in 0..m {
        let (l, w) = it.next().ok_or(IoError::Parse {
            line: 0,
            message: "missing objective vector entries".into(),
        })?;
        c.push(parse_num::<f64>(&w, l)?);
    }
    let mut entries: Vec<Vec<(usize, usize, f64)>> = vec![Vec::new(); m + 1];
    let rest: Vec<(usize, String)> = it.collect();
    if rest.len() % 5 != 0 {
        return Err(IoError::Parse {
            line: rest.last().map_or(0, |r| r.0),
            message: "entry lines must have 5 fields".into(),
        });
    }
    for chunk in rest.chunks(5) {
        let line = chunk[0].0;
        let mat = parse_num::<usize>(&chunk[0].1, line)?;
        let blk = parse_num::<usize>(&chunk[1].1, line)?;
        let i = parse_num::<usize>(&chunk[2].1, line)?;
        let j = parse_num::<usize>(&chunk[3].1, line)?;
        let v = parse_num::<f64>(&chunk[4].1, line)?;
        if mat > m || blk == 0 || blk > nblocks {
            return Err(IoError::Parse {
                line,
                message: format!("matrix {mat} or block {blk} out of range"),
            });
        }
        let size = sizes[blk - 1].unsigned_abs() as usize;
        if i == 0 || j == 0 || i > size || j > size || (sizes[blk - 1] < 0 && i != j) {
            return Err(IoError::Parse {
                line,
                message: format!("entry ({i}, {j}) invalid for block {blk}"),
            });
        }
        let off = offsets[blk - 1];
        let (a, b) = (off + i.min(j) - 1, off + i.max(j) - 1);
        let v = if mat == 0 { -v } else { v };
        entries[mat].push((a, b, v));
    }
    let mats = entries[1..]
        .iter()
        .map(|e| SymMatrix::from_upper(n, e.iter().copied()))
        .collect();
    let cmat = SymMatrix::from_upper(n, entries[0].iter().copied());
    let prob = ConeProblem::new(
        n,
        0,
        0,
        Constraints::new(n, mats)?,
        SparseMatrix::zeros(m, 0),
        DVector::from_vec(c),
        Objective::Linear {
            c_mat: Arc::new(cmat),
            c_vec: DVector::zeros(0),
        },
    )?;
    Ok(prob)
}

fn parse_num<T: std::str::FromStr>(s: &str, line: usize) -> Result<T, IoError> {
    s.parse::<T>().map_err(|_| IoError::Parse {
        line,
        message: format!("cannot parse `{s}`"),
    })
}

pub fn read_sdpa(path: &Path) -> Result<ConeProblem, IoError> {
    parse_sdpa(&read_text(path)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolutionJson {
    pub r: DenseMat,
    pub y: Vec<f64>,
    pub support: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificateJson {
    pub lambda: Vec<f64>,
    pub big_lambda: DenseMat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResiduesJson {
    pub rp: f64,
    pub rd: f64,
    pub rc: f64,
    pub rd_method: RdMethod,
}

/// Iteration, CG, linear-solve and Cholesky counters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountersJson {
    pub t_alg: usize,
    pub t_cg: usize,
    pub t_lin: usize,
    pub t_ch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub format: String,
    pub version: u32,
    pub problem_hash: String,
    pub seed: u64,
    pub status: SolveStatus,
    pub objective: f64,
    pub residues: ResiduesJson,
    pub counters: CountersJson,
    pub options: SolveOptions,
    pub solve: SolveReport,
    pub solution: SolutionJson,
    pub certificate: CertificateJson,
}

impl ReportFile {
    pub fn new(prob: &ConeProblem, opts: &SolveOptions, out: &SolveOutput) -> Result<Self, IoError> {
        let r = &out.report;
        Ok(Self {
            format: REPORT_FORMAT.into(),
            version: SCHEMA_VERSION,
            problem_hash: problem_hash(prob)?,
            seed: opts.seed,
            status: r.status,
            objective: r.objective,
            residues: ResiduesJson {
                rp: out.certificate.rp,
                rd: out.certificate.rd,
                rc: out.certificate.rc,
                rd_method: out.certificate.rd_method,
            },
            counters: CountersJson {
                t_alg: r.iterations,
                t_cg: r.cg_iterations,
                t_lin: r.linear_solves,
                t_ch: r.cholesky_factorizations,
            },
            options: opts.clone(),
            solve: r.clone(),
            solution: SolutionJson {
                r: DenseMat::from_matrix(&out.point.r),
                y: out.point.y_vec().iter().copied().collect(),
                support: out.point.support.clone(),
            },
            certificate: CertificateJson {
                lambda: out.certificate.lambda.iter().copied().collect(),
                big_lambda: DenseMat::from_matrix(&out.certificate.big_lambda),
            },
        })
    }

    pub fn point(&self) -> Result<FactorPoint, ModelError> {
        let r = self.solution.r.to_matrix()?;
        let y = DVector::from_vec(self.solution.y.clone());
        if self.solution.support.len() != y.len() {
            return Err(ModelError::Dimension("support mask length".into()));
        }
        let mut pt = FactorPoint::new(r, y);
        pt.support = self.solution.support.clone();
        Ok(pt)
    }

    pub fn lambda(&self) -> DVector<f64> {
        DVector::from_vec(self.certificate.lambda.clone())
    }

    pub fn to_json(&self) -> Result<String, IoError> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self, IoError> {
        let rep: Self = serde_json::from_str(text)?;
        if rep.format != REPORT_FORMAT || rep.version != SCHEMA_VERSION {
            return Err(IoError::Parse {
                line: 0,
                message: format!("unsupported report format `{}` v{}", rep.format, rep.version),
            });
        }
        Ok(rep)
    }

    pub fn read(path: &Path) -> Result<Self, IoError> {
        Self::from_json(&read_text(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<(), IoError> {
        write_text(path, &self.to_json()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::{boxqp_random, random_sparse_problem, snl_problem, theta_problem, GraphData};

    fn round_trip(prob: &ConeProblem) {
        let text = problem_to_json(prob).unwrap();
        let back = problem_from_json(&text).unwrap();
        assert_eq!(problem_to_json(&back).unwrap(), text);
        assert_eq!(problem_hash(&back).unwrap(), problem_hash(prob).unwrap());
    }

    #[test]
    fn problems_round_trip() {
        round_trip(&theta_problem(&GraphData::cycle(5)).unwrap());
        round_trip(&boxqp_random(5, 0.5, 1).unwrap());
        round_trip(&snl_problem(10, 2).unwrap());
        round_trip(&random_sparse_problem(8, 3, 6, 4).unwrap());
    }

    #[test]
    fn rejects_unknown_format() {
        let text = problem_to_json(&theta_problem(&GraphData::empty(2)).unwrap())
            .unwrap()
            .replace(PROBLEM_FORMAT, "other");
        assert!(problem_from_json(&text).is_err());
        assert!(problem_from_json("{").is_err());
    }

    #[test]
    fn sdpa_two_blocks() {
        let text = "\"toy\"\n2\n2\n{2, -1}\n1.0 2.0\n0 1 1 1 -1.0\n1 1 1 1 1.0\n1 1 2 2 1.0\n2 2 1 1 1.0\n2 1 1 2 0.5\n";
        let prob = parse_sdpa(text).unwrap();
        assert_eq!((prob.n, prob.m()), (3, 2));
        assert_eq!(prob.b.as_slice(), &[1.0, 2.0]);
        assert_eq!(prob.constraints.mats()[1].entries(), &[(0, 1, 0.5), (2, 2, 1.0)]);
        let Objective::Linear { c_mat, .. } = &prob.objective else {
            panic!()
        };
        assert_eq!(c_mat.entries(), &[(0, 0, 1.0)]);
    }

    #[test]
    fn sdpa_rejects_bad_entries() {
        assert!(parse_sdpa("1\n1\n2\n1.0\n1 1 3 1 1.0\n").is_err());
        assert!(parse_sdpa("1\n1\n-2\n1.0\n1 1 1 2 1.0\n").is_err());
    }
}
