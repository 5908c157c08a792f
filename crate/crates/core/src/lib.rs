//! Solvers for competitive equilibria (CE) of chores markets.
//!
//! A chores market allocates `m` divisible chores among `n` agents. Agent `i`
//! has a per-unit disutility `d[i][j] > 0` for chore `j` and must earn a
//! budget `B[i] > 0` from the prices paid for chores. A competitive
//! equilibrium is a price vector and allocation such that every agent earns
//! exactly their budget on disutility-minimizing chores and every chore is
//! fully allocated.
//!
//! The solvers here work on an unconstrained difference-of-convex
//! reformulation in log-price coordinates whose stationary points are exactly
//! the equilibria:
//!
//! * [`dca::solve_dca`] — difference-of-convex algorithm; each outer step
//!   solves a small dual QP over a product of scaled simplices.
//! * [`dca::solve_rounded_dca`] — DCA interleaved with a price-floor rounding
//!   step, giving a non-asymptotic iteration bound.
//! * [`sgr::solve_sgr`] — smoothed gradient method with rounding; gradient
//!   descent on an entropically smoothed objective, subproblem-free.
//!
//! [`equilibrium`] verifies exact and approximate equilibria and provides a
//! grid-search oracle for tiny markets. [`market`] holds instance types,
//! random generators, and file I/O.

pub mod dca;
pub mod equilibrium;
mod kernels;
pub mod market;
pub mod objective;
pub mod rounding;
pub mod sgr;
pub mod simplex;
pub mod trace;

pub use dca::{solve_dca, solve_rounded_dca, DcaConfig};
pub use equilibrium::{verify_eps_ce, EquilibriumCandidate, VerificationReport};
pub use market::{GeneratorConfig, MarketInstance};
pub use objective::{IncomeMatrix, LogPrices};
pub use sgr::{solve_sgr, SgrConfig};
pub use trace::SolverTrace;

/// Outcome of a solver run: the extracted equilibrium candidate plus the
/// state needed for verification and diagnostics.
#[derive(Debug, Clone)]
pub struct SolveOutput {
    pub candidate: EquilibriumCandidate,
    pub trace: SolverTrace,
    pub final_mu: LogPrices,
    pub incomes: IncomeMatrix,
    /// Largest relative stopping measure at the final iterate.
    pub final_measure: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Errors shared by the iterative solvers.
#[derive(Debug, thiserror::Error)]
pub enum SolveError {
    /// Iteration budget or time limit exhausted; carries the best iterate.
    #[error("solver did not converge: measure {measure:.3e} after {iterations} iterations")]
    NotConverged {
        measure: f64,
        iterations: usize,
        best: Box<SolveOutput>,
    },
    #[error(transparent)]
    Round(#[from] rounding::RoundError),
}
