//! Difference-of-convex algorithm: each outer step linearizes the smooth
//! concave part at the current point and minimizes the resulting strongly
//! convex model through its dual, a QP over a product of scaled simplices.
//!
//! The dual solution doubles as the income matrix, so every iterate comes
//! with a candidate equilibrium for free. The rounded variant lifts the
//! iterate onto a price floor before each step, which yields a
//! non-asymptotic bound without changing the local behavior.

use crate::equilibrium::extract_equilibrium;
use crate::kernels;
use crate::market::MarketInstance;
use crate::objective::{self, IncomeMatrix, LogPrices};
use crate::rounding;
use crate::simplex::{solve_dual_qp, DualQp, InnerMethod, InnerSolveResult};
use crate::trace::{SolverTrace, TraceRow};
use crate::{SolveError, SolveOutput};
use std::time::{Duration, Instant};

/// Where a solver starts.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialPoint {
    /// `mu_j = log(sum B / m)`, the uniform point on the normalization
    /// slice.
    UniformSlice,
    Given(Vec<f64>),
}

impl InitialPoint {
    pub(crate) fn build(&self, inst: &MarketInstance) -> Vec<f64> {
        match self {
            InitialPoint::UniformSlice => {
                LogPrices::uniform_on_slice(inst).into_vec()
            }
            InitialPoint::Given(mu) => {
                assert_eq!(mu.len(), inst.chores(), "initial point has wrong length");
                assert!(mu.iter().all(|v| v.is_finite()));
                mu.clone()
            }
        }
    }
}

/// Inner-solve tolerance rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InnerTolPolicy {
    /// `max(1e-12, min(1e-8, 0.01 * ||last step||^2))`: tightens with outer
    /// progress, which preserves the descent property while bounding inner
    /// work.
    Adaptive,
    Fixed(f64),
}

impl InnerTolPolicy {
    fn tol(&self, last_step_norm: Option<f64>) -> f64 {
        match *self {
            InnerTolPolicy::Fixed(t) => t,
            InnerTolPolicy::Adaptive => match last_step_norm {
                None => 1e-8,
                Some(s) => (0.01 * s * s).clamp(1e-12, 1e-8),
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct DcaConfig {
    /// Target accuracy for the relative stopping measure, in (0, 1).
    pub eps: f64,
    /// Regularization coefficient; `None` means `n/m`.
    pub reg_eta: Option<f64>,
    pub inner_method: InnerMethod,
    pub inner_tol: InnerTolPolicy,
    pub inner_max_iter: usize,
    pub max_outer: usize,
    /// Price floor for the rounded variant; `None` means one below the
    /// stationary-point floor.
    pub round_floor: Option<f64>,
    pub initial_mu: InitialPoint,
    /// Keep the full iterate history in the trace (needed for rate fits).
    pub record_mu: bool,
    pub time_limit: Option<Duration>,
}

impl Default for DcaConfig {
    fn default() -> Self {
        DcaConfig {
            eps: 0.01,
            reg_eta: None,
            // PGD reaches tight KKT tolerances in a few hundred iterations
            // where the multiplicative updates of mirror descent can crawl
            // for 1e5+ when support coordinates span many orders of
            // magnitude; mirror descent stays available for cross-checks.
            inner_method: InnerMethod::Pgd,
            inner_tol: InnerTolPolicy::Adaptive,
            inner_max_iter: 100_000,
            max_outer: 5_000,
            round_floor: None,
            initial_mu: InitialPoint::UniformSlice,
            record_mu: true,
            time_limit: None,
        }
    }
}

impl DcaConfig {
    pub fn with_eps(eps: f64) -> Self {
        DcaConfig {
            eps,
            ..DcaConfig::default()
        }
    }

    pub(crate) fn effective_eta(&self, inst: &MarketInstance) -> f64 {
        let eta = self
            .reg_eta
            .unwrap_or(inst.agents() as f64 / inst.chores() as f64);
        assert!(eta > 0.0, "regularization coefficient must be positive");
        eta
    }
}

/// Gradient of the linearized part: `q(mu) + eta * mu`.
pub fn linearization_gradient(inst: &MarketInstance, mu: &LogPrices, reg_eta: f64) -> Vec<f64> {
    let mut q = objective::implied_prices(inst, mu);
    for (g, &v) in q.iter_mut().zip(mu.as_slice()) {
        *g += reg_eta * v;
    }
    q
}

/// One DCA step from `mu`: assembles the dual QP with target
/// `(1/eta) (q(mu) + eta mu)`, costs `log d`, and row radii `B_i/eta`,
/// solves it, and recovers the next iterate as `target - column sums`.
/// The incomes are `eta * lambda`, whose rows sum to the budgets exactly.
pub fn dca_step(
    inst: &MarketInstance,
    mu: &LogPrices,
    cfg: &DcaConfig,
    inner_tol: f64,
    warm_start: Option<&[f64]>,
) -> (LogPrices, IncomeMatrix, InnerSolveResult) {
    let eta = cfg.effective_eta(inst);
    let mut q = vec![0.0; inst.chores()];
    objective::implied_prices_into(inst.budget_total(), mu.as_slice(), &mut q);
    let (mu_next, incomes, inner) = step_raw(
        inst,
        cfg,
        eta,
        mu.as_slice(),
        &q,
        inner_tol,
        warm_start,
    );
    (
        LogPrices::new(mu_next),
        IncomeMatrix::from_raw(inst.agents(), inst.chores(), incomes),
        inner,
    )
}

fn step_raw(
    inst: &MarketInstance,
    cfg: &DcaConfig,
    eta: f64,
    mu: &[f64],
    q: &[f64],
    inner_tol: f64,
    warm_start: Option<&[f64]>,
) -> (Vec<f64>, Vec<f64>, InnerSolveResult) {
    let (n, m) = (inst.agents(), inst.chores());
    let target: Vec<f64> = mu.iter().zip(q).map(|(&v, &qj)| v + qj / eta).collect();
    let radii: Vec<f64> = inst.budgets().iter().map(|&b| b / eta).collect();
    let qp = DualQp::new(target.clone(), inst.log_disutilities_flat(), radii);
    let inner = solve_dual_qp(
        &qp,
        cfg.inner_method,
        inner_tol,
        cfg.inner_max_iter,
        warm_start,
    );
    let colsum = kernels::column_sums(&inner.lambda, n, m, true);
    let mu_next: Vec<f64> = target.iter().zip(&colsum).map(|(&c, &s)| c - s).collect();
    let incomes: Vec<f64> = inner.lambda.iter().map(|&l| eta * l).collect();
    (mu_next, incomes, inner)
}

/// Plain DCA. Stops when `max_j |u_j| / q_j(mu^{k+1}) <= eps` for the
/// canonical subgradient `u = grad g(mu^k) - grad g(mu^{k+1})`.
pub fn solve_dca(inst: &MarketInstance, cfg: &DcaConfig) -> Result<SolveOutput, SolveError> {
    run(inst, cfg, false)
}

/// Rounded DCA: lifts each iterate onto the price floor `e^a` before the
/// step; the stopping measure is evaluated against the lifted point's
/// prices.
pub fn solve_rounded_dca(
    inst: &MarketInstance,
    cfg: &DcaConfig,
) -> Result<SolveOutput, SolveError> {
    run(inst, cfg, true)
}

fn run(inst: &MarketInstance, cfg: &DcaConfig, rounded: bool) -> Result<SolveOutput, SolveError> {
    assert!(cfg.eps > 0.0 && cfg.eps < 1.0, "eps must lie in (0, 1)");
    let m = inst.chores();
    let eta = cfg.effective_eta(inst);
    let total = inst.budget_total();
    let floor = cfg
        .round_floor
        .unwrap_or_else(|| objective::log_price_floor(inst) - 1.0);

    let mut mu = cfg.initial_mu.build(inst);
    let mut trace = SolverTrace::default();
    if cfg.record_mu {
        trace.mu_history.push(mu.clone());
    }

    let mut q = vec![0.0; m];
    let mut warm: Option<Vec<f64>> = None;
    let mut last_step_norm: Option<f64> = None;
    let mut best: Option<(f64, Vec<f64>, Vec<f64>)> = None; // (measure, mu, incomes)
    let started = Instant::now();
    let mut failed_inner = false;

    for k in 1..=cfg.max_outer {
        let iter_started = Instant::now();
        let mu_base = if rounded {
            rounding::round_slice(floor, &mu, total)?
        } else {
            std::mem::take(&mut mu)
        };
        objective::implied_prices_into(total, &mu_base, &mut q);
        let q_base = q.clone();

        let inner_tol = cfg.inner_tol.tol(last_step_norm);
        let (mu_next, incomes, inner) = step_raw(
            inst,
            cfg,
            eta,
            &mu_base,
            &q_base,
            inner_tol,
            warm.as_deref(),
        );

        objective::implied_prices_into(total, &mu_next, &mut q);
        // u = grad g(base) - grad g(next), with q recomputed exactly
        let mut measure = 0.0f64;
        for j in 0..m {
            let u = (q_base[j] + eta * mu_base[j]) - (q[j] + eta * mu_next[j]);
            let denom = if rounded { q_base[j] } else { q[j] };
            measure = measure.max((u / denom).abs());
        }
        let step_norm = {
            let mut s = 0.0;
            for j in 0..m {
                let d = mu_next[j] - mu_base[j];
                s += d * d;
            }
            s.sqrt()
        };

        trace.push(TraceRow {
            k,
            objective: objective::objective_impl(inst, &mu_next, true),
            smoothed_objective: None,
            step_norm,
            measure_max: measure,
            inner_iterations: inner.iterations,
            elapsed_ms: iter_started.elapsed().as_secs_f64() * 1e3,
        });
        if cfg.record_mu {
            trace.mu_history.push(mu_next.clone());
        }

        if best.as_ref().map_or(true, |(bm, _, _)| measure < *bm) {
            best = Some((measure, mu_next.clone(), incomes.clone()));
        }
        warm = Some(inner.lambda);
        last_step_norm = Some(step_norm);
        mu = mu_next;

        let converged = measure <= cfg.eps;
        if converged {
            let out = build_output(inst, mu, incomes, trace, measure, k, true);
            return Ok(out);
        }
        if !inner.converged {
            failed_inner = true;
            break;
        }
        if let Some(limit) = cfg.time_limit {
            if started.elapsed() >= limit {
                break;
            }
        }
    }

    let _ = failed_inner;
    let (measure, best_mu, best_incomes) = best.expect("at least one iteration ran");
    let iterations = trace.iterations();
    let out = build_output(inst, best_mu, best_incomes, trace, measure, iterations, false);
    Err(SolveError::NotConverged {
        measure,
        iterations,
        best: Box::new(out),
    })
}

fn build_output(
    inst: &MarketInstance,
    mu: Vec<f64>,
    incomes: Vec<f64>,
    trace: SolverTrace,
    measure: f64,
    iterations: usize,
    converged: bool,
) -> SolveOutput {
    let final_mu = LogPrices::new(mu);
    let incomes = IncomeMatrix::from_raw(inst.agents(), inst.chores(), incomes);
    let candidate = extract_equilibrium(inst, &final_mu, &incomes)
        .expect("dual incomes sum to budgets by construction");
    SolveOutput {
        candidate,
        trace,
        final_mu,
        incomes,
        final_measure: measure,
        iterations,
        converged,
    }
}

#[derive(Debug, thiserror::Error)]
pub enum FitError {
    #[error("trace too short for a rate fit: {usable} usable points, need {needed}")]
    InsufficientTrace { usable: usize, needed: usize },
}

/// Window length for [`fit_linear_rate`].
pub const FIT_WINDOW: usize = 30;

/// Least-squares fit of `log ||mu^k - mu^K||` against `k` over the last
/// [`FIT_WINDOW`] recorded iterates (the final iterate stands in for the
/// limit). Returns `(rho, r_squared)`; `rho < 1` with a good fit indicates
/// R-linear convergence. Points at the numerical noise floor are dropped.
pub fn fit_linear_rate(trace: &SolverTrace) -> Result<(f64, f64), FitError> {
    fit_linear_rate_window(trace, FIT_WINDOW)
}

pub fn fit_linear_rate_window(
    trace: &SolverTrace,
    window: usize,
) -> Result<(f64, f64), FitError> {
    const MIN_POINTS: usize = 20;
    let history = &trace.mu_history;
    let t = history.len();
    if t < MIN_POINTS + 2 {
        return Err(FitError::InsufficientTrace {
            usable: t.saturating_sub(2),
            needed: MIN_POINTS,
        });
    }
    let last = &history[t - 1];
    let scale = 1.0 + kernels::norm2(last);
    let floor = 1e-13 * scale;

    let lo = (t - 1).saturating_sub(window);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (k, mu) in history.iter().enumerate().take(t - 1).skip(lo) {
        let dist = {
            let mut s = 0.0;
            for (a, b) in mu.iter().zip(last) {
                s += (a - b) * (a - b);
            }
            s.sqrt()
        };
        if dist > floor {
            xs.push(k as f64);
            ys.push(dist.ln());
        }
    }
    if xs.len() < MIN_POINTS {
        return Err(FitError::InsufficientTrace {
            usable: xs.len(),
            needed: MIN_POINTS,
        });
    }

    let n = xs.len() as f64;
    let mean_x = xs.iter().sum::<f64>() / n;
    let mean_y = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        sxx += (x - mean_x) * (x - mean_x);
        sxy += (x - mean_x) * (y - mean_y);
        syy += (y - mean_y) * (y - mean_y);
    }
    let slope = sxy / sxx;
    let rho = slope.exp();
    let ss_res = syy - slope * sxy;
    let r_squared = if syy <= 1e-30 {
        1.0
    } else {
        1.0 - ss_res / syy
    };
    Ok((rho, r_squared))
}
