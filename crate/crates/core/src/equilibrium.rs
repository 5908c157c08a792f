//! Equilibrium extraction, exact and approximate verification, the
//! post-hoc accuracy diagnostic, and a brute-force oracle for tiny markets.

use crate::kernels;
use crate::market::MarketInstance;
use crate::objective::{implied_prices, IncomeMatrix, LogPrices, RowSumViolation};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum VerifyError {
    #[error("price {value} at chore {index} is not positive")]
    NonPositivePrice { index: usize, value: f64 },
    #[error("oracle supports at most 3x3 markets, got {n}x{m}")]
    OracleScaleExceeded { n: usize, m: usize },
    #[error(transparent)]
    RowSum(#[from] RowSumViolation),
}

/// Prices and allocation produced by a solver or the oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumCandidate {
    /// Per-chore prices, strictly positive.
    pub p: Vec<f64>,
    /// Allocation rows per agent; `x[i][j]` is the amount of chore `j`
    /// assigned to agent `i`.
    pub x: Vec<Vec<f64>>,
}

impl EquilibriumCandidate {
    fn check_prices(&self) -> Result<(), VerifyError> {
        for (j, &pj) in self.p.iter().enumerate() {
            if !(pj > 0.0) || !pj.is_finite() {
                return Err(VerifyError::NonPositivePrice {
                    index: j,
                    value: pj,
                });
            }
        }
        Ok(())
    }

    /// Money earned by agent `i`.
    pub fn earning(&self, i: usize) -> f64 {
        kernels::dot(&self.p, &self.x[i])
    }
}

/// Residuals of the three approximate-equilibrium conditions (smallest
/// epsilon making each hold) and of their exact counterparts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerificationReport {
    /// Budget condition: earnings within `[(1-eps) B_i, B_i/(1-eps)]`.
    pub a1_residual: f64,
    /// Best-response condition via the closed-form bundle value.
    pub a2_residual: f64,
    /// Clearance condition: chore totals within `[1-eps, 1/(1-eps)]`.
    pub a3_residual: f64,
    /// Smallest epsilon from [`EPS_LADDER`] at which all three pass.
    pub passes_at: f64,
    /// Exact residuals: relative budget gap, normalized best-ratio gap on
    /// the support, absolute clearance gap.
    pub e1_residual: f64,
    pub e2_residual: f64,
    pub e3_residual: f64,
}

impl VerificationReport {
    pub fn max_approx_residual(&self) -> f64 {
        self.a1_residual.max(self.a2_residual).max(self.a3_residual)
    }

    pub fn passes(&self, eps: f64) -> bool {
        self.max_approx_residual() <= eps
    }
}

/// Epsilon ladder used for the `passes_at` field.
pub const EPS_LADDER: [f64; 12] = [
    1e-12, 1e-10, 1e-8, 1e-6, 1e-4, 1e-3, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5,
];

/// Scale-aware support floor: allocations above this count as genuine
/// support in the exact checks.
fn support_floor(budget: f64, m: usize) -> f64 {
    1e-9 * budget / m as f64
}

/// Builds the price/allocation pair implied by a log-price point and an
/// income matrix: `p = q(mu)`, `x_ij = v_ij / p_j`.
pub fn extract_equilibrium(
    inst: &MarketInstance,
    mu: &LogPrices,
    incomes: &IncomeMatrix,
) -> Result<EquilibriumCandidate, RowSumViolation> {
    incomes.check_rows(inst.budgets())?;
    let p = implied_prices(inst, mu);
    let x = (0..inst.agents())
        .map(|i| {
            incomes
                .row(i)
                .iter()
                .zip(&p)
                .map(|(&v, &pj)| v / pj)
                .collect()
        })
        .collect();
    Ok(EquilibriumCandidate { p, x })
}

/// Checks the three approximate-CE conditions at level `eps` and reports
/// per-condition residuals (the smallest epsilon making each hold).
///
/// The best-response condition is checked through the closed form
/// `min { d_i' y : p' y >= p' x_i, y >= 0 } = (p' x_i) / max_j (p_j / d_ij)`;
/// the minimum is attained by spending everything on the best-ratio chore.
pub fn verify_eps_ce(
    inst: &MarketInstance,
    cand: &EquilibriumCandidate,
    eps: f64,
) -> Result<(VerificationReport, bool), VerifyError> {
    let report = verification_report(inst, cand)?;
    let pass = report.passes(eps);
    Ok((report, pass))
}

pub fn verification_report(
    inst: &MarketInstance,
    cand: &EquilibriumCandidate,
) -> Result<VerificationReport, VerifyError> {
    cand.check_prices()?;
    let n = inst.agents();
    let m = inst.chores();
    assert_eq!(cand.p.len(), m);
    assert_eq!(cand.x.len(), n);

    let mut a1 = 0.0f64;
    let mut a2 = 0.0f64;
    let mut e1 = 0.0f64;
    let mut e2 = 0.0f64;
    for i in 0..n {
        let b = inst.budgets()[i];
        let earned = cand.earning(i);
        let s = earned / b;
        a1 = a1.max(1.0 - s.min(1.0 / s));
        e1 = e1.max((earned - b).abs() / b);

        let d = inst.disutility_row(i);
        let cost = kernels::dot(d, &cand.x[i]);
        let best_ratio = (0..m).map(|j| cand.p[j] / d[j]).fold(0.0f64, f64::max);
        if cost > 0.0 {
            let best_value = earned / best_ratio;
            a2 = a2.max(1.0 - best_value / cost);
        }

        let floor = support_floor(b, m);
        for j in 0..m {
            if cand.x[i][j] > floor {
                e2 = e2.max((best_ratio - cand.p[j] / d[j]) / best_ratio);
            }
        }
    }

    let mut a3 = 0.0f64;
    let mut e3 = 0.0f64;
    for j in 0..m {
        let total: f64 = (0..n).map(|i| cand.x[i][j]).sum();
        a3 = a3.max(1.0 - total.min(1.0 / total));
        e3 = e3.max((total - 1.0).abs());
    }

    let worst = a1.max(a2).max(a3);
    let passes_at = EPS_LADDER
        .iter()
        .cloned()
        .find(|&e| worst <= e)
        .unwrap_or(f64::INFINITY);

    Ok(VerificationReport {
        a1_residual: a1.max(0.0),
        a2_residual: a2.max(0.0),
        a3_residual: a3.max(0.0),
        passes_at,
        e1_residual: e1,
        e2_residual: e2,
        e3_residual: e3,
    })
}

/// Exact-CE residuals `(e1, e2, e3)`: relative budget gap, normalized
/// best-ratio gap over the support, absolute clearance gap.
pub fn exact_ce_residual(
    inst: &MarketInstance,
    cand: &EquilibriumCandidate,
) -> Result<(f64, f64, f64), VerifyError> {
    let report = verification_report(inst, cand)?;
    Ok((report.e1_residual, report.e2_residual, report.e3_residual))
}

/// How far `(mu, incomes)` is from witnessing a stationary point: price
/// normalization gap, per-chore income balance, and membership of the
/// income support in the best-chore sets. Shift-invariant in `mu`.
pub fn stationarity_residual(
    inst: &MarketInstance,
    mu: &LogPrices,
    incomes: &IncomeMatrix,
) -> f64 {
    let m = inst.chores();
    let total = inst.budget_total();
    // rescale onto the slice sum e^mu = sum B
    let shift = total.ln() - kernels::log_sum_exp(mu.as_slice());
    let mu_s: Vec<f64> = mu.as_slice().iter().map(|&v| v + shift).collect();
    let prices: Vec<f64> = mu_s.iter().map(|&v| v.exp()).collect();

    let r1 = (prices.iter().sum::<f64>() - total).abs() / total;

    let totals = incomes.chore_totals();
    let mut r2 = 0.0f64;
    for j in 0..m {
        r2 = r2.max((totals[j] - prices[j]).abs() / prices[j]);
    }

    let mut r3 = 0.0f64;
    for i in 0..inst.agents() {
        let d = inst.disutility_row(i);
        let best_ratio = (0..m).map(|j| prices[j] / d[j]).fold(0.0f64, f64::max);
        let floor = support_floor(inst.budgets()[i], m);
        for j in 0..m {
            if incomes.row(i)[j] > floor {
                r3 = r3.max(1.0 - (prices[j] / d[j]) / best_ratio);
            }
        }
    }
    r1.max(r2).max(r3)
}

/// Post-hoc accuracy certificate for smoothed solves: the output is an
/// `eps'`-CE for `eps' = 1 - 1/r(mu)` with
/// `r = max_i [ sum_j (p_j/d_ij)^{1/delta - 1} * max_j(p_j/d_ij) / sum_j (p_j/d_ij)^{1/delta} ]`,
/// all powers evaluated in log space.
pub fn epsilon_prime(inst: &MarketInstance, mu: &LogPrices, delta: f64) -> f64 {
    assert!(delta > 0.0);
    let m = inst.chores();
    let total = inst.budget_total();
    let shift = total.ln() - kernels::log_sum_exp(mu.as_slice());
    let log_p: Vec<f64> = mu.as_slice().iter().map(|&v| v + shift).collect();
    let gamma = 1.0 / delta;

    let mut log_r = f64::NEG_INFINITY;
    let mut ratios = vec![0.0; m];
    for i in 0..inst.agents() {
        let logd = inst.log_disutility_row(i);
        for j in 0..m {
            ratios[j] = log_p[j] - logd[j];
        }
        let max_ratio = ratios.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let num: Vec<f64> = ratios.iter().map(|&l| (gamma - 1.0) * l).collect();
        let den: Vec<f64> = ratios.iter().map(|&l| gamma * l).collect();
        let log_term = kernels::log_sum_exp(&num) - kernels::log_sum_exp(&den) + max_ratio;
        log_r = log_r.max(log_term);
    }
    // r >= 1 in exact arithmetic; clamp float noise
    (1.0 - (-log_r).exp()).max(0.0)
}

// ---------------------------------------------------------------------------
// Brute-force oracle for n, m <= 3
// ---------------------------------------------------------------------------

/// Routes budgets to price mass over near-best-ratio edges and scores the
/// outcome: max of relative row mismatch (budgets), relative column
/// mismatch (clearance), and the genuine ratio gap across used edges. The
/// score has a strict zero exactly at an equilibrium, which is what the
/// grid refinement descends on.
fn flow_score(inst: &MarketInstance, p: &[f64], tol: f64) -> f64 {
    let n = inst.agents();
    let m = inst.chores();
    let flow = route_incomes(inst, p, tol);
    let mut score = 0.0f64;
    for i in 0..n {
        let b = inst.budgets()[i];
        let row = &flow[i * m..(i + 1) * m];
        let rowsum: f64 = row.iter().sum();
        score = score.max((rowsum - b).abs() / b);
        let d = inst.disutility_row(i);
        let best = (0..m).map(|j| p[j] / d[j]).fold(0.0f64, f64::max);
        for j in 0..m {
            if row[j] > 1e-12 * b {
                score = score.max(1.0 - (p[j] / d[j]) / best);
            }
        }
    }
    for j in 0..m {
        let colsum: f64 = (0..n).map(|i| flow[i * m + j]).sum();
        score = score.max((colsum - p[j]).abs() / p[j]);
    }
    score
}

/// Max-flow routing of budgets to price mass over the allowed edges;
/// returns the income matrix (flows) on `n x m`.
fn route_incomes(inst: &MarketInstance, p: &[f64], tol: f64) -> Vec<f64> {
    let n = inst.agents();
    let m = inst.chores();
    let mut allowed = vec![false; n * m];
    for i in 0..n {
        let d = inst.disutility_row(i);
        let best = (0..m).map(|j| p[j] / d[j]).fold(0.0f64, f64::max);
        for j in 0..m {
            allowed[i * m + j] = p[j] / d[j] >= best * (1.0 - tol);
        }
    }
    // augmenting paths on the tiny bipartite graph, deterministic order
    let mut flow = vec![0.0; n * m];
    let mut remaining_supply: Vec<f64> = inst.budgets().to_vec();
    let mut remaining_cap: Vec<f64> = p.to_vec();
    let eps = 1e-15 * inst.budget_total();
    loop {
        // BFS from any agent with remaining supply over residual edges
        let mut parent_chore: Vec<Option<usize>> = vec![None; m]; // chore <- agent
        let mut parent_agent: Vec<Option<usize>> = vec![None; n]; // agent <- chore
        let mut queue: Vec<usize> = Vec::new();
        for i in 0..n {
            if remaining_supply[i] > eps {
                parent_agent[i] = Some(usize::MAX);
                queue.push(i);
            }
        }
        let mut sink_chore = None;
        'bfs: while let Some(i) = queue.pop() {
            for j in 0..m {
                if allowed[i * m + j] && parent_chore[j].is_none() {
                    parent_chore[j] = Some(i);
                    if remaining_cap[j] > eps {
                        sink_chore = Some(j);
                        break 'bfs;
                    }
                    // chore saturated: traverse backwards along used edges
                    for i2 in 0..n {
                        if flow[i2 * m + j] > eps && parent_agent[i2].is_none() {
                            parent_agent[i2] = Some(j);
                            queue.push(i2);
                        }
                    }
                }
            }
        }
        let Some(mut j) = sink_chore else { break };
        // bottleneck along the alternating path
        let mut bottleneck = remaining_cap[j];
        {
            let mut jj = j;
            loop {
                let i = parent_chore[jj].expect("path");
                if parent_agent[i] == Some(usize::MAX) {
                    bottleneck = bottleneck.min(remaining_supply[i]);
                    break;
                }
                let back = parent_agent[i].expect("path");
                bottleneck = bottleneck.min(flow[i * m + back]);
                jj = back;
            }
        }
        if bottleneck <= eps {
            break;
        }
        // apply augmentation
        loop {
            let i = parent_chore[j].expect("path");
            flow[i * m + j] += bottleneck;
            if parent_agent[i] == Some(usize::MAX) {
                remaining_supply[i] -= bottleneck;
                break;
            }
            let back = parent_agent[i].expect("path");
            flow[i * m + back] -= bottleneck;
            j = back;
        }
        remaining_cap = p.to_vec();
        for j2 in 0..m {
            let used: f64 = (0..n).map(|i| flow[i * m + j2]).sum();
            remaining_cap[j2] -= used;
        }
    }
    flow
}

/// Grid search with local refinement for equilibria of markets with
/// `n, m <= 3`. `grid_resolution` is the absolute price step of the coarse
/// pass; returned clusters are polished far beyond it and filtered at
/// relative residual `10 * grid_resolution / sum B`.
///
/// The oracle is deliberately a different code path from the solvers: it
/// never looks at the difference-of-convex objective.
pub fn oracle_ce_small(
    inst: &MarketInstance,
    grid_resolution: f64,
) -> Result<Vec<EquilibriumCandidate>, VerifyError> {
    let n = inst.agents();
    let m = inst.chores();
    if n > 3 || m > 3 {
        return Err(VerifyError::OracleScaleExceeded { n, m });
    }
    assert!(grid_resolution > 0.0);
    let total = inst.budget_total();

    if m == 1 {
        let x = inst.budgets().iter().map(|&b| vec![b / total]).collect();
        return Ok(vec![EquilibriumCandidate {
            p: vec![total],
            x,
        }]);
    }

    let step = grid_resolution;
    let k_max = (total / step).floor() as usize;

    // score the full coarse grid; cells are independent, merged in index order
    let mut kept: Vec<(Vec<f64>, f64)> = Vec::new();
    if m == 2 {
        let scored = kernels::map_chunks(k_max.saturating_sub(1), true, |range| {
            let mut local = Vec::new();
            for k in range {
                let p1 = (k + 1) as f64 * step;
                let p = vec![p1, total - p1];
                if p[1] <= 0.0 {
                    continue;
                }
                let score = flow_score(inst, &p, grid_tol(&p, step));
                if score <= keep_threshold(&p, step, total) {
                    local.push((p, score));
                }
            }
            local
        });
        for chunk in scored {
            kept.extend(chunk);
        }
    } else {
        let scored = kernels::map_chunks(k_max.saturating_sub(1), true, |range| {
            let mut local = Vec::new();
            for k1 in range {
                let p1 = (k1 + 1) as f64 * step;
                for k2 in 0..k_max {
                    let p2 = (k2 + 1) as f64 * step;
                    let p3 = total - p1 - p2;
                    if p3 <= 0.5 * step {
                        break;
                    }
                    let p = vec![p1, p2, p3];
                    let score = flow_score(inst, &p, grid_tol(&p, step));
                    if score <= keep_threshold(&p, step, total) {
                        local.push((p, score));
                    }
                }
            }
            local
        });
        for chunk in scored {
            kept.extend(chunk);
        }
    }

    // greedy clustering of surviving coarse points
    kept.sort_by(|a, b| a.1.partial_cmp(&b.1).expect("finite deficits"));
    let mut seeds: Vec<Vec<f64>> = Vec::new();
    let merge_radius = 2.5 * step;
    for (p, _) in &kept {
        if seeds
            .iter()
            .all(|s| linf_distance(s, p) > merge_radius)
        {
            seeds.push(p.clone());
            if seeds.len() >= 64 {
                break;
            }
        }
    }

    // local pattern-search refinement of each seed
    let mut polished: Vec<EquilibriumCandidate> = Vec::new();
    let final_filter = 10.0 * grid_resolution / total;
    for seed in seeds {
        let p = refine_prices(inst, seed, step);
        let tol_final = grid_tol(&p, 1e-11 * total);
        let incomes = route_incomes(inst, &p, tol_final);
        let x: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..m).map(|j| incomes[i * m + j] / p[j]).collect())
            .collect();
        let cand = EquilibriumCandidate { p, x };
        let (e1, e2, e3) = exact_ce_residual(inst, &cand)?;
        if e1.max(e2).max(e3) <= final_filter {
            polished.push(cand);
        }
    }

    // drop near-duplicate clusters, keeping the first (they are polished to
    // the same point anyway)
    let mut clusters: Vec<EquilibriumCandidate> = Vec::new();
    let dup_radius = (2.0 * grid_resolution).max(1e-9 * total);
    for cand in polished {
        if clusters
            .iter()
            .all(|c| linf_distance(&c.p, &cand.p) > dup_radius)
        {
            clusters.push(cand);
        }
    }
    Ok(clusters)
}

fn linf_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Support tolerance matched to a price step: a move of size `s` perturbs
/// ratios by at most `s / p_min` relatively.
fn grid_tol(p: &[f64], s: f64) -> f64 {
    let p_min = p.iter().cloned().fold(f64::INFINITY, f64::min);
    (8.0 * s / p_min).max(1e-12).min(0.9)
}

fn keep_threshold(p: &[f64], step: f64, total: f64) -> f64 {
    grid_tol(p, step) + 4.0 * p.len() as f64 * step / total
}

/// Pattern search over pairwise price transfers (which preserve the price
/// sum) on the flow score, with a support tolerance tied to the current
/// step so the target sharpens as the step shrinks.
fn refine_prices(inst: &MarketInstance, mut p: Vec<f64>, step0: f64) -> Vec<f64> {
    let m = p.len();
    let total = inst.budget_total();
    let mut s = step0;
    let s_min = 1e-11 * total;
    while s > s_min {
        let current = flow_score(inst, &p, grid_tol(&p, s));
        let mut best: Option<(Vec<f64>, f64)> = None;
        for j in 0..m {
            for k in 0..m {
                if j == k {
                    continue;
                }
                let mut q = p.clone();
                q[j] += s;
                q[k] -= s;
                if q[k] <= 0.0 {
                    continue;
                }
                let score = flow_score(inst, &q, grid_tol(&q, s));
                if score < best.as_ref().map_or(current, |b| b.1) {
                    best = Some((q, score));
                }
            }
        }
        match best {
            Some((q, _)) => p = q,
            None => s *= 0.2,
        }
    }
    p
}
