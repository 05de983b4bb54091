//! Feasible low-rank solver for semidefinite programs with a fixed identity
//! block and a nonnegative vector variable, in factorized form
//! `X = R̂R̂ᵀ`, `x = y∘y`.

pub mod certificate;
pub mod cli;
pub mod driver;
pub mod eig;
pub mod error;
pub mod geometry;
pub mod instances;
pub mod io;
pub mod linsolve;
pub mod model;
pub mod saddle;

pub use driver::{solve, SolveOptions, SolveOutput, SolveReport, SolveStatus};
pub use error::{GeometryError, IoError, ModelError, SolveError};
pub use geometry::FactorPoint;
pub use model::{ConeProblem, Family, Objective};
