//! The difference-of-convex objective in log-price coordinates, its smoothed
//! counterpart, first-order information, and the analytic bounds used by the
//! rounding procedures.
//!
//! With `mu` the log-price vector, the objective is
//!
//! ```text
//! F(mu) = sum_i B_i * max_j { mu_j - log d_ij }  -  sum_i B_i * log sum_j e^{mu_j}
//! ```
//!
//! and the smoothed variant replaces each inner max by a `delta`-scaled
//! log-sum-exp. Every log-sum-exp and softmax here subtracts the running
//! maximum before exponentiating; log-price coordinates routinely reach
//! magnitudes where the naive forms overflow.

use crate::kernels;
use crate::market::MarketInstance;
#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Relative tie tolerance for membership in the best-chore set of an agent.
pub const TIE_TOLERANCE: f64 = 1e-12;

/// A point in log-price coordinates; entries must be finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogPrices(Vec<f64>);

impl LogPrices {
    /// Panics if any entry is non-finite.
    pub fn new(mu: Vec<f64>) -> Self {
        assert!(
            mu.iter().all(|v| v.is_finite()),
            "log prices must be finite"
        );
        LogPrices(mu)
    }

    /// The uniform point on the slice `sum_j e^{mu_j} = sum_i B_i`, the
    /// solvers' default start.
    pub fn uniform_on_slice(inst: &MarketInstance) -> Self {
        let v = (inst.budget_total() / inst.chores() as f64).ln();
        LogPrices(vec![v; inst.chores()])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Index<usize> for LogPrices {
    type Output = f64;
    fn index(&self, j: usize) -> &f64 {
        &self.0[j]
    }
}

/// Agent incomes `v[i][j]` (income of agent `i` from chore `j`); each row
/// sums to the agent's budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncomeMatrix {
    n: usize,
    m: usize,
    v: Vec<f64>,
}

#[derive(Debug, thiserror::Error)]
#[error("income row {agent} sums to {sum}, budget is {budget}")]
pub struct RowSumViolation {
    pub agent: usize,
    pub sum: f64,
    pub budget: f64,
}

impl IncomeMatrix {
    /// Validates nonnegativity and that each row sums to the corresponding
    /// budget within 1e-9 relative.
    pub fn new(inst: &MarketInstance, v: Vec<f64>) -> Result<Self, RowSumViolation> {
        let (n, m) = (inst.agents(), inst.chores());
        assert_eq!(v.len(), n * m, "income matrix has wrong shape");
        let mat = IncomeMatrix { n, m, v };
        mat.check_rows(inst.budgets())?;
        Ok(mat)
    }

    pub(crate) fn from_raw(n: usize, m: usize, v: Vec<f64>) -> Self {
        debug_assert_eq!(v.len(), n * m);
        IncomeMatrix { n, m, v }
    }

    pub(crate) fn check_rows(&self, budgets: &[f64]) -> Result<(), RowSumViolation> {
        for (i, &b) in budgets.iter().enumerate() {
            let sum: f64 = self.row(i).iter().sum();
            if self.row(i).iter().any(|&x| x < 0.0) || (sum - b).abs() > 1e-9 * b {
                return Err(RowSumViolation {
                    agent: i,
                    sum,
                    budget: b,
                });
            }
        }
        Ok(())
    }

    pub fn agents(&self) -> usize {
        self.n
    }

    pub fn chores(&self) -> usize {
        self.m
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.v[i * self.m..(i + 1) * self.m]
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.v
    }

    /// Column sums, i.e. total income paid out per chore.
    pub fn chore_totals(&self) -> Vec<f64> {
        kernels::column_sums(&self.v, self.n, self.m, true)
    }
}

/// A canonical subgradient of the objective together with the implied prices
/// and the per-chore relative measure used as a stopping rule.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubgradientReport {
    /// `u = column sums of incomes - q(mu)`: the value of over-allocated
    /// (positive) or unallocated (negative) chores.
    pub excess_value: Vec<f64>,
    /// Implied prices `q(mu)`.
    pub prices: Vec<f64>,
    /// `|u_j| / q_j` per chore.
    pub measure: Vec<f64>,
}

impl SubgradientReport {
    pub fn measure_max(&self) -> f64 {
        self.measure.iter().cloned().fold(0.0, f64::max)
    }
}

/// Value of agent `i`'s weighted max term `B_i * max_j (mu_j - log d_ij)`
/// together with the set of chores attaining the max within
/// [`TIE_TOLERANCE`] (relative).
pub fn agent_term(inst: &MarketInstance, mu: &LogPrices, i: usize) -> (f64, Vec<usize>) {
    let logd = inst.log_disutility_row(i);
    let mu = mu.as_slice();
    let mut best = f64::NEG_INFINITY;
    for j in 0..mu.len() {
        best = best.max(mu[j] - logd[j]);
    }
    let tol = TIE_TOLERANCE * (1.0 + best.abs());
    let ties = (0..mu.len())
        .filter(|&j| mu[j] - logd[j] >= best - tol)
        .collect();
    (inst.budgets()[i] * best, ties)
}

fn weighted_lse(budget_total: f64, mu: &[f64]) -> f64 {
    budget_total * kernels::log_sum_exp(mu)
}

/// The objective `F(mu)`.
pub fn objective(inst: &MarketInstance, mu: &LogPrices) -> f64 {
    objective_impl(inst, mu.as_slice(), true)
}

pub(crate) fn objective_impl(inst: &MarketInstance, mu: &[f64], par: bool) -> f64 {
    let n = inst.agents();
    let budgets = inst.budgets();
    let sum_h = kernels::sum_over(n, par && n * inst.chores() >= kernels::PAR_MIN_ENTRIES, |i| {
        let logd = inst.log_disutility_row(i);
        let mut best = f64::NEG_INFINITY;
        for j in 0..mu.len() {
            best = best.max(mu[j] - logd[j]);
        }
        budgets[i] * best
    });
    sum_h - weighted_lse(inst.budget_total(), mu)
}

/// Implied prices `q(mu)`: the gradient of the weighted log-sum-exp term.
/// `q_j = (sum_i B_i) * softmax(mu)_j`, so the prices sum to the total
/// budget for any `mu`.
pub fn implied_prices(inst: &MarketInstance, mu: &LogPrices) -> Vec<f64> {
    let mut q = vec![0.0; mu.len()];
    implied_prices_into(inst.budget_total(), mu.as_slice(), &mut q);
    q
}

pub(crate) fn implied_prices_into(budget_total: f64, mu: &[f64], out: &mut [f64]) {
    kernels::softmax_into(mu, out);
    for o in out.iter_mut() {
        *o *= budget_total;
    }
}

pub(crate) fn implied_prices_vec(inst: &MarketInstance, mu: &[f64]) -> Vec<f64> {
    let mut q = vec![0.0; mu.len()];
    implied_prices_into(inst.budget_total(), mu, &mut q);
    q
}

/// The smoothed objective `F_delta(mu)`.
pub fn smoothed_objective(inst: &MarketInstance, mu: &LogPrices, delta: f64) -> f64 {
    smoothed_objective_impl(inst, mu.as_slice(), delta, true)
}

/// Sequential twin of [`smoothed_objective`]; used by the benches to compare
/// against the parallel dispatch.
pub fn smoothed_objective_seq(inst: &MarketInstance, mu: &LogPrices, delta: f64) -> f64 {
    smoothed_objective_impl(inst, mu.as_slice(), delta, false)
}

pub(crate) fn smoothed_objective_impl(
    inst: &MarketInstance,
    mu: &[f64],
    delta: f64,
    par: bool,
) -> f64 {
    assert!(delta > 0.0, "smoothing parameter must be positive");
    let n = inst.agents();
    let m = inst.chores();
    let budgets = inst.budgets();
    let par = par && n * m >= kernels::PAR_MIN_ENTRIES;
    let smoothed = kernels::map_chunks(n, par, |range| {
        let mut scores = vec![0.0; m];
        let mut acc = 0.0;
        for i in range {
            let logd = inst.log_disutility_row(i);
            for j in 0..m {
                scores[j] = (mu[j] - logd[j]) / delta;
            }
            acc += budgets[i] * kernels::log_sum_exp(&scores);
        }
        acc
    });
    let sum_h: f64 = smoothed.iter().sum();
    delta * sum_h - weighted_lse(inst.budget_total(), mu)
}

/// Gradient of the smoothed objective and the softmax income matrix behind
/// it: `grad_j = sum_i v_ij - q_j` with
/// `v_ij = B_i * softmax_j((mu_j - log d_ij)/delta)`.
pub fn smoothed_gradient(
    inst: &MarketInstance,
    mu: &LogPrices,
    delta: f64,
) -> (Vec<f64>, IncomeMatrix) {
    smoothed_gradient_impl(inst, mu.as_slice(), delta, true)
}

/// Sequential twin of [`smoothed_gradient`]; same contract, no data
/// parallelism.
pub fn smoothed_gradient_seq(
    inst: &MarketInstance,
    mu: &LogPrices,
    delta: f64,
) -> (Vec<f64>, IncomeMatrix) {
    smoothed_gradient_impl(inst, mu.as_slice(), delta, false)
}

pub(crate) fn smoothed_gradient_impl(
    inst: &MarketInstance,
    mu: &[f64],
    delta: f64,
    par: bool,
) -> (Vec<f64>, IncomeMatrix) {
    assert!(delta > 0.0, "smoothing parameter must be positive");
    let n = inst.agents();
    let m = inst.chores();
    let mut incomes = vec![0.0; n * m];
    income_rows_into(inst, mu, delta, par, &mut incomes);
    let mut grad = kernels::column_sums(&incomes, n, m, par);
    let mut q = vec![0.0; m];
    implied_prices_into(inst.budget_total(), mu, &mut q);
    for (g, &qj) in grad.iter_mut().zip(&q) {
        *g -= qj;
    }
    (grad, IncomeMatrix::from_raw(n, m, incomes))
}

/// Fills `out` (n x m) with the softmax income rows at `mu`.
pub(crate) fn income_rows_into(
    inst: &MarketInstance,
    mu: &[f64],
    delta: f64,
    par: bool,
    out: &mut [f64],
) {
    let m = inst.chores();
    let budgets = inst.budgets();
    kernels::for_each_row(out, m, par, |i, row| {
        let logd = inst.log_disutility_row(i);
        let mut max = f64::NEG_INFINITY;
        for j in 0..m {
            let s = (mu[j] - logd[j]) / delta;
            row[j] = s;
            if s > max {
                max = s;
            }
        }
        let mut sum = 0.0;
        for r in row.iter_mut() {
            *r = (*r - max).exp();
            sum += *r;
        }
        let scale = budgets[i] / sum;
        for r in row.iter_mut() {
            *r *= scale;
        }
    });
}

/// One fused pass over the agents for the smoothed solvers: fills `out`
/// (n x m) with softmax income rows from pre-scaled scores
/// `t_ij = mu_over_delta[j] + neg_logd_over_delta[i*m+j]`, and returns
/// `(sum_i B_i * max_j t_ij, sum_i B_i * lse_j t_ij)`, from which both the
/// plain and the smoothed objective follow at O(m) extra cost.
pub(crate) fn income_pass(
    budgets: &[f64],
    neg_logd_over_delta: &[f64],
    mu_over_delta: &[f64],
    m: usize,
    par: bool,
    out: &mut [f64],
) -> (f64, f64) {
    let n = budgets.len();
    debug_assert_eq!(out.len(), n * m);
    debug_assert_eq!(neg_logd_over_delta.len(), n * m);

    let chunk_rows = kernels::AGENT_CHUNK;
    let run_chunk = |chunk_idx: usize, block: &mut [f64]| -> (f64, f64) {
        let start = chunk_idx * chunk_rows;
        let mut sum_max = 0.0;
        let mut sum_lse = 0.0;
        for (local, row) in block.chunks_mut(m).enumerate() {
            let i = start + local;
            let pre = &neg_logd_over_delta[i * m..(i + 1) * m];
            let mut max = f64::NEG_INFINITY;
            for j in 0..m {
                let s = mu_over_delta[j] + pre[j];
                row[j] = s;
                if s > max {
                    max = s;
                }
            }
            let mut sum = 0.0;
            for r in row.iter_mut() {
                *r = (*r - max).exp();
                sum += *r;
            }
            let scale = budgets[i] / sum;
            for r in row.iter_mut() {
                *r *= scale;
            }
            sum_max += budgets[i] * max;
            sum_lse += budgets[i] * (max + sum.ln());
        }
        (sum_max, sum_lse)
    };

    let partials: Vec<(f64, f64)>;
    #[cfg(feature = "parallel")]
    {
        if par && n * m >= kernels::PAR_MIN_ENTRIES {
            partials = out
                .par_chunks_mut(chunk_rows * m)
                .enumerate()
                .map(|(c, block)| run_chunk(c, block))
                .collect();
        } else {
            partials = out
                .chunks_mut(chunk_rows * m)
                .enumerate()
                .map(|(c, block)| run_chunk(c, block))
                .collect();
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = par;
        partials = out
            .chunks_mut(chunk_rows * m)
            .enumerate()
            .map(|(c, block)| run_chunk(c, block))
            .collect();
    }
    let sum_max = partials.iter().map(|p| p.0).sum();
    let sum_lse = partials.iter().map(|p| p.1).sum();
    (sum_max, sum_lse)
}

/// Canonical subgradient `u = column sums of incomes - q(mu)` and the
/// relative measure `|u_j|/q_j`. Errors if any income row does not sum to
/// its budget.
pub fn subgradient_report(
    inst: &MarketInstance,
    mu: &LogPrices,
    incomes: &IncomeMatrix,
) -> Result<SubgradientReport, RowSumViolation> {
    incomes.check_rows(inst.budgets())?;
    let q = implied_prices(inst, mu);
    let totals = incomes.chore_totals();
    let excess_value: Vec<f64> = totals.iter().zip(&q).map(|(&t, &qj)| t - qj).collect();
    let measure = excess_value
        .iter()
        .zip(&q)
        .map(|(&u, &qj)| (u / qj).abs())
        .collect();
    Ok(SubgradientReport {
        excess_value,
        prices: q,
        measure,
    })
}

/// A canonical subgradient choice at ties: each agent's budget is spread
/// uniformly over their best-chore set. The result lies in the
/// subdifferential of the max term exactly.
pub fn tie_averaged_incomes(inst: &MarketInstance, mu: &LogPrices) -> IncomeMatrix {
    let n = inst.agents();
    let m = inst.chores();
    let mut v = vec![0.0; n * m];
    for i in 0..n {
        let (_, ties) = agent_term(inst, mu, i);
        let share = inst.budgets()[i] / ties.len() as f64;
        for j in ties {
            v[i * m + j] = share;
        }
    }
    IncomeMatrix::from_raw(n, m, v)
}

/// Lower bound on the log prices of any stationary point on the slice
/// `sum_j e^{mu_j} = sum_i B_i`:
/// `log(sum B / m) - max log d + min log d`.
pub fn log_price_floor(inst: &MarketInstance) -> f64 {
    let (lo, hi) = inst.disutility_range();
    (inst.budget_total() / inst.chores() as f64).ln() - hi.ln() + lo.ln()
}

/// Smoothed analogue of [`log_price_floor`]: below this level the smoothed
/// gradient is provably negative, so low coordinates can be lifted without
/// increasing the smoothed objective.
///
/// Meaningful for `delta <= 1/(2 + log(m-1))` when `m >= 2`; callers should
/// keep `delta` in that range.
pub fn smoothed_log_price_floor(inst: &MarketInstance, delta: f64) -> f64 {
    assert!(delta > 0.0);
    let m = inst.chores() as f64;
    let (lo, hi) = inst.disutility_range();
    debug_assert!(
        inst.chores() < 2 || delta <= 1.0 / (2.0 + (m - 1.0).ln()) + 1e-12,
        "smoothing parameter too large for the floor bound"
    );
    (inst.budget_total() / (2.0 * m)).ln()
        - (1.0 + delta) / (1.0 - delta) * (hi / lo).ln()
        - delta * (4.0 * m).ln()
}

/// Analytic lower and upper bounds on the objective over all of R^m.
pub fn objective_bounds(inst: &MarketInstance) -> (f64, f64) {
    let total = inst.budget_total();
    let (lo, hi) = inst.disutility_range();
    let floor = log_price_floor(inst);
    let lower = total * (floor - hi.ln()) - total * total.ln();
    let upper = total * (total.ln() - lo.ln()) - total * total.ln();
    (lower, upper)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{generate_instance, Distribution, GeneratorConfig};
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn inst_2x2() -> MarketInstance {
        MarketInstance::new(vec![vec![1.0, 2.0], vec![2.0, 1.0]], vec![1.0, 1.0]).unwrap()
    }

    fn random_mu<R: Rng>(rng: &mut R, m: usize, scale: f64) -> LogPrices {
        LogPrices::new((0..m).map(|_| (rng.random::<f64>() - 0.5) * 2.0 * scale).collect())
    }

    #[test]
    fn agent_term_hand_values() {
        let inst = inst_2x2();
        let mu = LogPrices::new(vec![0.0, 0.0]);
        // agent 0: scores (0, -log 2), max at chore 0 only
        let (val, ties) = agent_term(&inst, &mu, 0);
        assert_abs_diff_eq!(val, 0.0, epsilon = 1e-15);
        assert_eq!(ties, vec![0]);
    }

    #[test]
    fn agent_term_full_tie_and_shift() {
        let inst = MarketInstance::new(vec![vec![3.0, 3.0, 3.0]], vec![2.0]).unwrap();
        let mu = LogPrices::new(vec![1.0, 1.0, 1.0]);
        let (val, ties) = agent_term(&inst, &mu, 0);
        assert_abs_diff_eq!(val, 2.0 * (1.0 - 3.0f64.ln()), epsilon = 1e-12);
        assert_eq!(ties, vec![0, 1, 2]);

        // additive shift moves the value by B_i * t and keeps the ties
        let t = 0.7;
        let shifted = LogPrices::new(vec![1.0 + t, 1.0 + t, 1.0 + t]);
        let (val2, ties2) = agent_term(&inst, &shifted, 0);
        assert_abs_diff_eq!(val2, val + 2.0 * t, epsilon = 1e-12);
        assert_eq!(ties2, ties);
    }

    #[test]
    fn objective_hand_value() {
        let inst = inst_2x2();
        let mu = LogPrices::new(vec![0.0, 0.0]);
        assert_abs_diff_eq!(objective(&inst, &mu), -2.0 * 2.0f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn objective_single_entry_is_constant() {
        let inst = MarketInstance::new(vec![vec![5.0]], vec![3.0]).unwrap();
        for mu in [-4.0, 0.0, 11.0] {
            let f = objective(&inst, &LogPrices::new(vec![mu]));
            assert_abs_diff_eq!(f, -3.0 * 5.0f64.ln(), epsilon = 1e-12);
        }
    }

    #[test]
    fn objective_is_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let cfg = GeneratorConfig::new(
                Distribution::LogStdNormal,
                1 + rng.random_range(0..4),
                2 + rng.random_range(0..4),
                rng.random(),
            );
            let inst = generate_instance(&cfg).unwrap();
            let mu = random_mu(&mut rng, inst.chores(), 5.0);
            let t = (rng.random::<f64>() - 0.5) * 40.0;
            let shifted =
                LogPrices::new(mu.as_slice().iter().map(|&v| v + t).collect());
            assert_abs_diff_eq!(
                objective(&inst, &mu),
                objective(&inst, &shifted),
                epsilon = 1e-9
            );
        }
    }

    #[test]
    fn implied_prices_symmetry_and_normalization() {
        let inst = MarketInstance::new(
            vec![vec![1.0, 1.0, 1.0], vec![2.0, 2.0, 2.0]],
            vec![1.0, 1.0],
        )
        .unwrap();
        let q = implied_prices(&inst, &LogPrices::new(vec![0.0; 3]));
        for &qj in &q {
            assert_abs_diff_eq!(qj, 2.0 / 3.0, epsilon = 1e-15);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let cfg = GeneratorConfig::new(Distribution::Exponential1, 3, 5, rng.random());
            let inst = generate_instance(&cfg).unwrap();
            let mu = random_mu(&mut rng, 5, 8.0);
            let q = implied_prices(&inst, &mu);
            assert!(q.iter().all(|&v| v > 0.0));
            let total: f64 = q.iter().sum();
            assert_abs_diff_eq!(
                total,
                inst.budget_total(),
                epsilon = 1e-9 * inst.budget_total()
            );
            // shift invariance
            let shifted = LogPrices::new(mu.as_slice().iter().map(|&v| v + 3.3).collect());
            let q2 = implied_prices(&inst, &shifted);
            for (a, b) in q.iter().zip(&q2) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn smoothed_objective_full_tie_hits_upper_bound() {
        let inst = MarketInstance::new(vec![vec![1.0, 1.0]], vec![1.0]).unwrap();
        let mu = LogPrices::new(vec![0.0, 0.0]);
        let delta = 0.1;
        let f = objective(&inst, &mu);
        let fd = smoothed_objective(&inst, &mu, delta);
        assert_abs_diff_eq!(fd, f + delta * 2.0f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(fd, 0.1 * 2.0f64.ln() - 2.0f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn smoothing_sandwich() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let cfg = GeneratorConfig::new(
                Distribution::Uniform01,
                1 + rng.random_range(0..5),
                2 + rng.random_range(0..5),
                rng.random(),
            );
            let inst = generate_instance(&cfg).unwrap();
            let mu = random_mu(&mut rng, inst.chores(), 6.0);
            let delta = 10f64.powf(rng.random_range(-6.0..0.0));
            let f = objective(&inst, &mu);
            let fd = smoothed_objective(&inst, &mu, delta);
            let gap = delta * (inst.chores() as f64).ln() * inst.budget_total();
            assert!(f <= fd + 1e-9, "F <= F_delta violated: {f} vs {fd}");
            assert!(fd <= f + gap + 1e-9, "upper sandwich violated");
        }
    }

    #[test]
    fn smoothed_gradient_hand_value() {
        let inst = MarketInstance::new(vec![vec![1.0, 1.0]], vec![1.0]).unwrap();
        let mu = LogPrices::new(vec![3.0f64.ln(), 0.0]);
        let (grad, incomes) = smoothed_gradient(&inst, &mu, 0.5);
        assert_abs_diff_eq!(incomes.row(0)[0], 0.9, epsilon = 1e-12);
        assert_abs_diff_eq!(incomes.row(0)[1], 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(grad[0], 0.15, epsilon = 1e-12);
        assert_abs_diff_eq!(grad[1], -0.15, epsilon = 1e-12);
    }

    #[test]
    fn smoothed_gradient_zero_at_symmetric_point() {
        let inst = MarketInstance::new(
            vec![vec![2.0, 2.0, 2.0], vec![2.0, 2.0, 2.0]],
            vec![1.0, 3.0],
        )
        .unwrap();
        let (grad, _) = smoothed_gradient(&inst, &LogPrices::new(vec![1.1; 3]), 0.3);
        for g in grad {
            assert_abs_diff_eq!(g, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn smoothed_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..100 {
            let cfg = GeneratorConfig::new(
                Distribution::LogStdNormal,
                1 + rng.random_range(0..4),
                2 + rng.random_range(0..4),
                rng.random(),
            );
            let inst = generate_instance(&cfg).unwrap();
            let m = inst.chores();
            let mu = random_mu(&mut rng, m, 2.0);
            let delta = rng.random_range(0.05..1.0);
            let (grad, incomes) = smoothed_gradient(&inst, &mu, delta);
            incomes.check_rows(inst.budgets()).unwrap();
            let scale = grad.iter().fold(1.0f64, |a, g| a.max(g.abs()));
            for j in 0..m {
                let h = 1e-5 * (1.0 + mu[j].abs());
                let mut up = mu.as_slice().to_vec();
                up[j] += h;
                let mut down = mu.as_slice().to_vec();
                down[j] -= h;
                let fd = (smoothed_objective(&inst, &LogPrices::new(up), delta)
                    - smoothed_objective(&inst, &LogPrices::new(down), delta))
                    / (2.0 * h);
                assert!(
                    (fd - grad[j]).abs() <= 1e-5 * scale,
                    "fd {fd} vs grad {g} (delta {delta})",
                    g = grad[j]
                );
            }
        }
    }

    #[test]
    fn smoothed_gradient_lipschitz_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let cfg = GeneratorConfig::new(Distribution::Exponential1, 3, 4, rng.random());
            let inst = generate_instance(&cfg).unwrap();
            let delta = rng.random_range(0.05..1.0);
            let mu1 = random_mu(&mut rng, 4, 4.0);
            let mu2 = random_mu(&mut rng, 4, 4.0);
            let (g1, _) = smoothed_gradient(&inst, &mu1, delta);
            let (g2, _) = smoothed_gradient(&inst, &mu2, delta);
            let gdiff: f64 = g1
                .iter()
                .zip(&g2)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let xdiff: f64 = mu1
                .as_slice()
                .iter()
                .zip(mu2.as_slice())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let lip = inst.budget_total() * (1.0 / delta + 1.0);
            assert!(gdiff <= lip * xdiff * (1.0 + 1e-9) + 1e-12);
        }
    }

    #[test]
    fn parallel_and_sequential_paths_agree_bitwise() {
        let cfg = GeneratorConfig::new(Distribution::LogStdNormal, 300, 80, 5);
        let inst = generate_instance(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mu = random_mu(&mut rng, 80, 6.0);
        let delta = 0.05;
        let (gp, vp) = smoothed_gradient(&inst, &mu, delta);
        let (gs, vs) = smoothed_gradient_seq(&inst, &mu, delta);
        assert_eq!(vp, vs);
        for (a, b) in gp.iter().zip(&gs) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let fp = smoothed_objective(&inst, &mu, delta);
        let fs = smoothed_objective_seq(&inst, &mu, delta);
        assert_eq!(fp.to_bits(), fs.to_bits());
    }

    #[test]
    fn subgradient_hand_value() {
        let inst = MarketInstance::new(vec![vec![1.0, 1.0]], vec![1.0]).unwrap();
        let mu = LogPrices::new(vec![0.0, 0.0]);
        let incomes = IncomeMatrix::new(&inst, vec![1.0, 0.0]).unwrap();
        let rep = subgradient_report(&inst, &mu, &incomes).unwrap();
        assert_abs_diff_eq!(rep.excess_value[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(rep.excess_value[1], -0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(rep.measure[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(rep.measure[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn subgradient_sums_to_zero_and_rejects_bad_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..200 {
            let cfg = GeneratorConfig::new(Distribution::Uniform01, 3, 4, rng.random());
            let inst = generate_instance(&cfg).unwrap();
            let mu = random_mu(&mut rng, 4, 5.0);
            let incomes = tie_averaged_incomes(&inst, &mu);
            let rep = subgradient_report(&inst, &mu, &incomes).unwrap();
            let total: f64 = rep.excess_value.iter().sum();
            assert_abs_diff_eq!(total, 0.0, epsilon = 1e-9 * inst.budget_total());
        }

        let inst = MarketInstance::new(vec![vec![1.0, 2.0]], vec![2.0]).unwrap();
        let bad = IncomeMatrix::from_raw(1, 2, vec![0.5, 0.5]);
        assert!(subgradient_report(&inst, &LogPrices::new(vec![0.0, 0.0]), &bad).is_err());
    }

    #[test]
    fn stationary_subgradient_is_zero() {
        // single agent, d = (1, 3), B = 4: CE prices (1, 3)
        let inst = MarketInstance::new(vec![vec![1.0, 3.0]], vec![4.0]).unwrap();
        let mu = LogPrices::new(vec![0.0, 3.0f64.ln()]);
        let incomes = IncomeMatrix::new(&inst, vec![1.0, 3.0]).unwrap();
        let rep = subgradient_report(&inst, &mu, &incomes).unwrap();
        for u in rep.excess_value {
            assert_abs_diff_eq!(u, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn floor_hand_values() {
        let inst = MarketInstance::new(vec![vec![1.0, 1.0], vec![1.0, 1.0]], vec![2.0, 2.0])
            .unwrap();
        assert_abs_diff_eq!(log_price_floor(&inst), 2.0f64.ln(), epsilon = 1e-12);

        // scaling d leaves the floor unchanged
        let scaled = MarketInstance::new(vec![vec![7.0, 7.0], vec![7.0, 7.0]], vec![2.0, 2.0])
            .unwrap();
        assert_abs_diff_eq!(
            log_price_floor(&scaled),
            2.0f64.ln(),
            epsilon = 1e-12
        );

        assert_abs_diff_eq!(
            smoothed_log_price_floor(&inst, 0.1),
            -0.1 * 8.0f64.ln(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn smoothed_floor_sits_below_plain_floor() {
        // for constant d: floor_delta = floor - log 2 - delta log 4m
        let inst = MarketInstance::new(vec![vec![2.0, 2.0, 2.0]], vec![5.0]).unwrap();
        for delta in [1e-4, 1e-2, 0.2] {
            assert!(
                smoothed_log_price_floor(&inst, delta)
                    <= log_price_floor(&inst) - 2.0f64.ln() + 1e-12
            );
        }
    }

    #[test]
    fn low_coordinates_have_negative_subgradient() {
        // Fact check: on the slice sum e^mu >= sum B, coordinates below the
        // floor never carry income, so every canonical subgradient there is
        // negative.
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..200 {
            let cfg = GeneratorConfig::new(Distribution::LogStdNormal, 3, 4, rng.random());
            let inst = generate_instance(&cfg).unwrap();
            let floor = log_price_floor(&inst);
            // three coordinates at log(sum B / 3) or above keep the point on
            // the slice sum e^mu >= sum B even with the fourth pushed low
            let mut mu: Vec<f64> = (0..4)
                .map(|_| (inst.budget_total() / 3.0).ln() + rng.random::<f64>())
                .collect();
            mu[2] = floor - 1.0 - rng.random::<f64>();
            let mu = LogPrices::new(mu);
            let sum_exp: f64 = mu.as_slice().iter().map(|&v| v.exp()).sum();
            assert!(sum_exp >= inst.budget_total());
            let incomes = tie_averaged_incomes(&inst, &mu);
            let rep = subgradient_report(&inst, &mu, &incomes).unwrap();
            assert!(rep.excess_value[2] < 0.0);
            assert_eq!(incomes.row(2.min(inst.agents() - 1)).len(), 4);
            for i in 0..inst.agents() {
                assert_eq!(incomes.row(i)[2], 0.0);
            }
        }
    }

    #[test]
    fn objective_bounds_hold_on_slice() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..50 {
            let cfg = GeneratorConfig::new(Distribution::Exponential1, 4, 3, rng.random());
            let inst = generate_instance(&cfg).unwrap();
            let (lower, upper) = objective_bounds(&inst);
            assert!(lower <= upper);
            for _ in 0..20 {
                // random point rescaled onto the slice sum e^mu = sum B
                let raw = random_mu(&mut rng, 3, 4.0);
                let lse = raw.as_slice().iter().map(|&v| v.exp()).sum::<f64>().ln();
                let shift = inst.budget_total().ln() - lse;
                let mu = LogPrices::new(raw.as_slice().iter().map(|&v| v + shift).collect());
                let f = objective(&inst, &mu);
                assert!(f >= lower - 1e-9 && f <= upper + 1e-9);
            }
        }
    }

    #[test]
    fn objective_bounds_gap_for_constant_d() {
        let inst = MarketInstance::new(
            vec![vec![3.0, 3.0, 3.0, 3.0], vec![3.0, 3.0, 3.0, 3.0]],
            vec![1.0, 2.0],
        )
        .unwrap();
        let (lower, upper) = objective_bounds(&inst);
        assert_abs_diff_eq!(
            upper - lower,
            inst.budget_total() * 4.0f64.ln(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn objective_bounds_degenerate_market() {
        let inst = MarketInstance::new(vec![vec![5.0]], vec![3.0]).unwrap();
        let (lower, upper) = objective_bounds(&inst);
        assert_abs_diff_eq!(lower, -3.0 * 5.0f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(upper, -3.0 * 5.0f64.ln(), epsilon = 1e-12);
    }
}
