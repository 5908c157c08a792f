//! Smoothed gradient method with rounding: constant-step gradient descent on
//! the entropically smoothed objective, with a per-iteration lift onto the
//! price floor and a relative-gradient stopping rule. Subproblem-free; each
//! iteration costs one fused pass over the disutility matrix plus an O(m^2)
//! worst-case rounding sweep.

use crate::dca::InitialPoint;
use crate::equilibrium::extract_equilibrium;
use crate::kernels;
use crate::market::MarketInstance;
use crate::objective::{self, IncomeMatrix, LogPrices};
use crate::rounding;
use crate::trace::{SolverTrace, TraceRow};
use crate::{SolveError, SolveOutput};
use std::time::{Duration, Instant};

/// How the smoothing level is chosen from the target accuracy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DeltaMode {
    /// `eps / (1.3 + log(m-1))`: guarantees the stopping rule certifies an
    /// eps-accurate equilibrium.
    Theoretical,
    /// `eps / 1.3`: the practical choice; validated post hoc through the
    /// accuracy diagnostic.
    Heuristic,
    Given(f64),
}

#[derive(Debug, Clone)]
pub struct SgrConfig {
    /// Target accuracy, in (0, 1/2).
    pub eps: f64,
    pub delta_mode: DeltaMode,
    /// Step-size fraction in (0, 1).
    pub gamma: f64,
    pub max_iter: usize,
    /// Price floor exponent; `None` derives it from the smoothing level.
    pub floor_a: Option<f64>,
    pub initial_mu: InitialPoint,
    pub record_mu: bool,
    pub time_limit: Option<Duration>,
}

impl Default for SgrConfig {
    fn default() -> Self {
        SgrConfig {
            eps: 0.01,
            delta_mode: DeltaMode::Heuristic,
            gamma: 0.99,
            max_iter: 2_000_000,
            floor_a: None,
            initial_mu: InitialPoint::UniformSlice,
            record_mu: false,
            time_limit: None,
        }
    }
}

impl SgrConfig {
    pub fn with_eps(eps: f64) -> Self {
        SgrConfig {
            eps,
            ..SgrConfig::default()
        }
    }
}

/// Smoothing level for a target accuracy. For a single chore the smoothed
/// and plain objectives coincide, so the heuristic value is used there.
pub fn default_delta(eps: f64, m: usize, mode: DeltaMode) -> f64 {
    assert!(eps > 0.0 && eps < 0.5, "eps must lie in (0, 1/2)");
    match mode {
        DeltaMode::Given(d) => {
            assert!(d > 0.0);
            d
        }
        DeltaMode::Heuristic => eps / 1.3,
        DeltaMode::Theoretical => {
            if m < 2 {
                eps / 1.3
            } else {
                eps / (1.3 + ((m - 1) as f64).ln())
            }
        }
    }
}

/// Constant step size `gamma / (sum B) * delta / (1 + delta)`, the inverse
/// of the smoothed gradient's Lipschitz constant scaled by `gamma`.
pub fn default_step(inst: &MarketInstance, delta: f64, gamma: f64) -> f64 {
    assert!(delta > 0.0);
    assert!(gamma > 0.0 && gamma < 1.0, "gamma must lie in (0, 1)");
    gamma / inst.budget_total() * delta / (1.0 + delta)
}

/// Runs the smoothed gradient method. On success the returned candidate is
/// extracted at the last rounded iterate: prices `q(mu_hat)` and allocation
/// `v_ij / p_j` from the softmax income matrix.
pub fn solve_sgr(inst: &MarketInstance, cfg: &SgrConfig) -> Result<SolveOutput, SolveError> {
    assert!(cfg.eps > 0.0 && cfg.eps < 0.5, "eps must lie in (0, 1/2)");
    let (n, m) = (inst.agents(), inst.chores());
    let total = inst.budget_total();
    let delta = default_delta(cfg.eps, m, cfg.delta_mode);
    let step = default_step(inst, delta, cfg.gamma);
    let floor = cfg
        .floor_a
        .unwrap_or_else(|| objective::smoothed_log_price_floor(inst, delta));

    // scores are (mu_j - log d_ij)/delta; the d part never changes
    let neg_logd_over_delta: Vec<f64> = inst
        .log_disutilities_flat()
        .iter()
        .map(|&l| -l / delta)
        .collect();
    let par = n * m >= kernels::PAR_MIN_ENTRIES;

    let mut mu = cfg.initial_mu.build(inst);
    let mut incomes = vec![0.0; n * m];
    let mut mu_over_delta = vec![0.0; m];
    let mut q = vec![0.0; m];
    let mut trace = SolverTrace::default();
    let mut best: Option<(f64, Vec<f64>)> = None;
    let started = Instant::now();

    for k in 0..=cfg.max_iter {
        let iter_started = Instant::now();
        let mu_hat = rounding::round_slice(floor, &mu, total)?;

        for (s, &v) in mu_over_delta.iter_mut().zip(&mu_hat) {
            *s = v / delta;
        }
        let (sum_b_max, sum_b_lse) = objective::income_pass(
            inst.budgets(),
            &neg_logd_over_delta,
            &mu_over_delta,
            m,
            par,
            &mut incomes,
        );
        let ell = total * kernels::log_sum_exp(&mu_hat);
        let f_plain = delta * sum_b_max - ell;
        let f_smoothed = delta * sum_b_lse - ell;

        objective::implied_prices_into(total, &mu_hat, &mut q);
        let mut grad = kernels::column_sums(&incomes, n, m, par);
        let mut measure = 0.0f64;
        for j in 0..m {
            grad[j] -= q[j];
            measure = measure.max((grad[j] / q[j]).abs());
        }
        let step_norm = step * kernels::norm2(&grad);

        trace.push(TraceRow {
            k,
            objective: f_plain,
            smoothed_objective: Some(f_smoothed),
            step_norm,
            measure_max: measure,
            inner_iterations: 0,
            elapsed_ms: iter_started.elapsed().as_secs_f64() * 1e3,
        });
        if cfg.record_mu {
            trace.mu_history.push(mu_hat.clone());
        }
        if best.as_ref().map_or(true, |(bm, _)| measure < *bm) {
            best = Some((measure, mu_hat.clone()));
        }

        if measure < cfg.eps {
            let out = build_output(
                inst,
                mu_hat,
                IncomeMatrix::from_raw(n, m, incomes),
                trace,
                measure,
                k,
                true,
            );
            return Ok(out);
        }

        // gradient step from the rounded point
        for (v, (&h, &g)) in mu.iter_mut().zip(mu_hat.iter().zip(&grad)) {
            *v = h - step * g;
        }

        if let Some(limit) = cfg.time_limit {
            if started.elapsed() >= limit {
                break;
            }
        }
    }

    let (measure, best_mu) = best.expect("at least one iteration ran");
    // recompute incomes at the best iterate
    for (s, &v) in mu_over_delta.iter_mut().zip(&best_mu) {
        *s = v / delta;
    }
    objective::income_pass(
        inst.budgets(),
        &neg_logd_over_delta,
        &mu_over_delta,
        m,
        par,
        &mut incomes,
    );
    let iterations = trace.iterations();
    let out = build_output(
        inst,
        best_mu,
        IncomeMatrix::from_raw(n, m, incomes),
        trace,
        measure,
        iterations,
        false,
    );
    Err(SolveError::NotConverged {
        measure,
        iterations,
        best: Box::new(out),
    })
}

fn build_output(
    inst: &MarketInstance,
    mu: Vec<f64>,
    incomes: IncomeMatrix,
    trace: SolverTrace,
    measure: f64,
    iterations: usize,
    converged: bool,
) -> SolveOutput {
    let final_mu = LogPrices::new(mu);
    let candidate = extract_equilibrium(inst, &final_mu, &incomes)
        .expect("softmax incomes sum to budgets by construction");
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
