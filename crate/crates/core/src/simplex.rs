//! First-order solvers for the DCA dual subproblem — a convex QP over a
//! product of scaled simplices — and the exact simplex-projection primitive.
//!
//! The subproblem has one row of variables per agent, constrained to the
//! scaled simplex `{ w >= 0 : sum w = radius_i }`, with objective
//! `0.5 * || column_sums(lambda) - c ||^2 + <log_d, lambda>`.

use crate::kernels;

/// Euclidean projection of `v` onto `{ w >= 0 : sum w = radius }`.
/// Sort-and-threshold, O(k log k).
pub fn project_simplex(v: &[f64], radius: f64) -> Vec<f64> {
    assert!(radius > 0.0, "simplex radius must be positive");
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite entries"));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (k, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let candidate = (cumsum - radius) / (k + 1) as f64;
        if u - candidate > 0.0 {
            theta = candidate;
        } else {
            break;
        }
    }
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

/// Multiplicative-weights update on a scaled simplex row:
/// `w_j' ∝ w_j * exp(-step * g_j)`, renormalized to the row's sum.
/// Exponents are max-shifted so constant gradient offsets cancel exactly.
pub fn mirror_step(row: &mut [f64], grad: &[f64], step: f64) {
    assert!(step > 0.0, "mirror step must be positive");
    let radius: f64 = row.iter().sum();
    let mut max = f64::NEG_INFINITY;
    // work in log space; zero weights stay zero
    for (w, &g) in row.iter_mut().zip(grad) {
        let l = w.ln() - step * g;
        *w = l;
        if l > max {
            max = l;
        }
    }
    let mut sum = 0.0;
    for w in row.iter_mut() {
        *w = (*w - max).exp();
        sum += *w;
    }
    let scale = radius / sum;
    for w in row.iter_mut() {
        *w *= scale;
    }
}

/// The dual subproblem data: target `c` (length m), per-agent cost rows
/// `log_d` (n x m, row-major), and per-agent simplex radii (length n).
#[derive(Debug, Clone)]
pub struct DualQp<'a> {
    pub c: Vec<f64>,
    pub log_d: &'a [f64],
    pub radii: Vec<f64>,
    pub n: usize,
    pub m: usize,
}

impl<'a> DualQp<'a> {
    pub fn new(c: Vec<f64>, log_d: &'a [f64], radii: Vec<f64>) -> Self {
        let n = radii.len();
        let m = c.len();
        assert_eq!(log_d.len(), n * m, "cost matrix has wrong shape");
        assert!(radii.iter().all(|&r| r > 0.0), "radii must be positive");
        DualQp { c, log_d, radii, n, m }
    }

    pub fn objective(&self, lambda: &[f64]) -> f64 {
        let colsum = kernels::column_sums(lambda, self.n, self.m, true);
        let quad: f64 = colsum
            .iter()
            .zip(&self.c)
            .map(|(&s, &c)| (s - c) * (s - c))
            .sum();
        0.5 * quad + kernels::dot(self.log_d, lambda)
    }

    fn uniform_start(&self) -> Vec<f64> {
        let mut lambda = vec![0.0; self.n * self.m];
        for (i, row) in lambda.chunks_mut(self.m).enumerate() {
            let v = self.radii[i] / self.m as f64;
            row.fill(v);
        }
        lambda
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InnerMethod {
    MirrorDescent,
    Pgd,
}

/// Result of an inner solve. `converged == false` means the iteration
/// budget ran out; the best iterate is still returned.
#[derive(Debug, Clone)]
pub struct InnerSolveResult {
    pub lambda: Vec<f64>,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub objective: f64,
    pub converged: bool,
}

/// Minimizes the dual QP to `kkt_residual <= tol`, where the residual is the
/// scaled projected-gradient mapping `||lambda - P(lambda - grad)|| / (1 + ||c||)`.
///
/// Row feasibility is enforced exactly at every iterate. Both methods use a
/// non-increase acceptance rule with step halving, so the objective is
/// monotone along the iterates; the step doubles after accepted moves.
pub fn solve_dual_qp(
    qp: &DualQp<'_>,
    method: InnerMethod,
    tol: f64,
    max_iter: usize,
    warm_start: Option<&[f64]>,
) -> InnerSolveResult {
    solve_dual_qp_traced(qp, method, tol, max_iter, warm_start, None)
}

pub(crate) fn solve_dual_qp_traced(
    qp: &DualQp<'_>,
    method: InnerMethod,
    tol: f64,
    max_iter: usize,
    warm_start: Option<&[f64]>,
    mut objective_log: Option<&mut Vec<f64>>,
) -> InnerSolveResult {
    assert!(tol > 0.0);
    let (n, m) = (qp.n, qp.m);
    let par = n * m >= kernels::PAR_MIN_ENTRIES;

    let mut lambda = match warm_start {
        Some(w) => {
            debug_assert_eq!(w.len(), n * m);
            let mut lambda = w.to_vec();
            // re-project rows so warm starts are exactly feasible; mirror
            // descent additionally needs strictly positive entries
            for (i, row) in lambda.chunks_mut(m).enumerate() {
                match method {
                    InnerMethod::Pgd => {
                        let p = project_simplex(row, qp.radii[i]);
                        row.copy_from_slice(&p);
                    }
                    InnerMethod::MirrorDescent => {
                        let floor = qp.radii[i] * 1e-20;
                        let mut sum = 0.0;
                        for w in row.iter_mut() {
                            *w = w.max(floor);
                            sum += *w;
                        }
                        let scale = qp.radii[i] / sum;
                        for w in row.iter_mut() {
                            *w *= scale;
                        }
                    }
                }
            }
            lambda
        }
        None => qp.uniform_start(),
    };

    let mut colsum = kernels::column_sums(&lambda, n, m, par);
    let mut obj = objective_from(qp, &lambda, &colsum);
    if let Some(log) = objective_log.as_deref_mut() {
        log.push(obj);
    }

    // base step 1/L with L = n: the quadratic term sums n rows per column
    let base_step = 1.0 / n as f64;
    let mut step = base_step;
    let max_step = 64.0 * base_step;
    // below this step descent is guaranteed by the smoothness constants, so
    // the move is accepted without an objective comparison; objective-based
    // acceptance alone cannot certify progress once decreases fall under the
    // f64 noise floor
    let max_radius = qp.radii.iter().cloned().fold(0.0f64, f64::max);
    let safe_step = match method {
        InnerMethod::Pgd => base_step,
        InnerMethod::MirrorDescent => base_step / max_radius.max(1.0),
    };

    let mut candidate = vec![0.0; n * m];
    let mut kkt = kkt_residual(qp, &lambda, &colsum, par);
    let mut iterations = 0;

    while kkt > tol && iterations < max_iter {
        // residual r_j = colsum_j - c_j is shared by all rows
        let residual: Vec<f64> = colsum.iter().zip(&qp.c).map(|(&s, &c)| s - c).collect();
        loop {
            candidate.copy_from_slice(&lambda);
            step_rows(qp, &mut candidate, &residual, step, method, par);
            let cand_colsum = kernels::column_sums(&candidate, n, m, par);
            let cand_obj = objective_from(qp, &candidate, &cand_colsum);
            let within_safe_step = step <= safe_step * (1.0 + 1e-12);
            if within_safe_step || cand_obj <= obj - 1e-13 * (1.0 + obj.abs()) {
                std::mem::swap(&mut lambda, &mut candidate);
                colsum = cand_colsum;
                obj = cand_obj;
                break;
            }
            step = (step * 0.5).max(safe_step);
        }
        iterations += 1;
        if let Some(log) = objective_log.as_deref_mut() {
            log.push(obj);
        }
        step = (step * 2.0).min(max_step);
        kkt = kkt_residual(qp, &lambda, &colsum, par);
    }

    InnerSolveResult {
        lambda,
        kkt_residual: kkt,
        iterations,
        objective: obj,
        converged: kkt <= tol,
    }
}

fn objective_from(qp: &DualQp<'_>, lambda: &[f64], colsum: &[f64]) -> f64 {
    let quad: f64 = colsum
        .iter()
        .zip(&qp.c)
        .map(|(&s, &c)| (s - c) * (s - c))
        .sum();
    0.5 * quad + kernels::dot(qp.log_d, lambda)
}

fn step_rows(
    qp: &DualQp<'_>,
    lambda: &mut [f64],
    residual: &[f64],
    step: f64,
    method: InnerMethod,
    par: bool,
) {
    let m = qp.m;
    let radii = &qp.radii;
    let log_d = qp.log_d;
    kernels::for_each_row(lambda, m, par, |i, row| {
        let logd_row = &log_d[i * m..(i + 1) * m];
        match method {
            InnerMethod::MirrorDescent => {
                let radius: f64 = row.iter().sum();
                let mut max = f64::NEG_INFINITY;
                for j in 0..m {
                    let l = row[j].ln() - step * (residual[j] + logd_row[j]);
                    row[j] = l;
                    if l > max {
                        max = l;
                    }
                }
                let mut sum = 0.0;
                for w in row.iter_mut() {
                    *w = (*w - max).exp();
                    sum += *w;
                }
                let scale = radius / sum;
                for w in row.iter_mut() {
                    *w *= scale;
                }
            }
            InnerMethod::Pgd => {
                let mut moved = vec![0.0; m];
                for j in 0..m {
                    moved[j] = row[j] - step * (residual[j] + logd_row[j]);
                }
                let projected = project_simplex(&moved, radii[i]);
                row.copy_from_slice(&projected);
            }
        }
    });
}

/// `||lambda - P(lambda - grad(lambda))||_F / (1 + ||c||)` with `P` the
/// row-wise projection; scale-invariant and well-defined for both methods.
fn kkt_residual(qp: &DualQp<'_>, lambda: &[f64], colsum: &[f64], par: bool) -> f64 {
    let m = qp.m;
    let residual: Vec<f64> = colsum.iter().zip(&qp.c).map(|(&s, &c)| s - c).collect();
    let sq_chunks = kernels::map_chunks(qp.n, par, |range| {
        let mut acc = 0.0;
        let mut moved = vec![0.0; m];
        for i in range {
            let row = &lambda[i * m..(i + 1) * m];
            let logd_row = &qp.log_d[i * m..(i + 1) * m];
            for j in 0..m {
                moved[j] = row[j] - (residual[j] + logd_row[j]);
            }
            let projected = project_simplex(&moved, qp.radii[i]);
            for j in 0..m {
                let d = row[j] - projected[j];
                acc += d * d;
            }
        }
        acc
    });
    let sq: f64 = sq_chunks.iter().sum();
    sq.sqrt() / (1.0 + kernels::norm2(&qp.c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn projection_hand_value() {
        let w = project_simplex(&[0.5, 0.5, 1.5], 1.0);
        assert_abs_diff_eq!(w[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(w[1], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(w[2], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn projection_fixes_feasible_points_and_symmetry() {
        let v = [0.2, 0.3, 0.5];
        let w = project_simplex(&v, 1.0);
        for (a, b) in v.iter().zip(&w) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
        let u = project_simplex(&[3.0, 3.0, 3.0, 3.0], 2.0);
        for &x in &u {
            assert_abs_diff_eq!(x, 0.5, epsilon = 1e-15);
        }
    }

    #[test]
    fn projection_is_variational() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let k = rng.random_range(1..8);
            let radius = rng.random_range(0.1..5.0);
            let v: Vec<f64> = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
            let w = project_simplex(&v, radius);
            assert!(w.iter().all(|&x| x >= 0.0));
            assert_abs_diff_eq!(w.iter().sum::<f64>(), radius, epsilon = 1e-12 * radius);
            let dist_w: f64 = v.iter().zip(&w).map(|(a, b)| (a - b) * (a - b)).sum();
            for _ in 0..20 {
                // random feasible point via normalized exponentials
                let mut p: Vec<f64> = (0..k).map(|_| -(rng.random::<f64>()).ln()).collect();
                let s: f64 = p.iter().sum();
                for x in p.iter_mut() {
                    *x *= radius / s;
                }
                let dist_p: f64 = v.iter().zip(&p).map(|(a, b)| (a - b) * (a - b)).sum();
                assert!(dist_w <= dist_p + 1e-12);
            }
        }
    }

    #[test]
    fn mirror_step_identities_and_hand_value() {
        let mut row = vec![0.3, 0.7];
        mirror_step(&mut row, &[0.0, 0.0], 1.0);
        assert_abs_diff_eq!(row[0], 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(row[1], 0.7, epsilon = 1e-15);

        // constant gradients are absorbed by normalization
        let mut row = vec![0.3, 0.7];
        mirror_step(&mut row, &[5.0, 5.0], 0.4);
        assert_abs_diff_eq!(row[0], 0.3, epsilon = 1e-14);
        assert_abs_diff_eq!(row[1], 0.7, epsilon = 1e-14);

        let mut row = vec![0.5, 0.5];
        mirror_step(&mut row, &[1.0, 0.0], 2.0f64.ln());
        assert_abs_diff_eq!(row[0], 1.0 / 3.0, epsilon = 1e-14);
        assert_abs_diff_eq!(row[1], 2.0 / 3.0, epsilon = 1e-14);
    }

    fn random_qp<'a>(
        rng: &mut ChaCha8Rng,
        n: usize,
        m: usize,
        log_d: &'a mut Vec<f64>,
    ) -> DualQp<'a> {
        *log_d = (0..n * m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c = (0..m).map(|_| rng.random_range(-1.0..2.0)).collect();
        let radii = (0..n).map(|_| rng.random_range(0.2..2.0)).collect();
        DualQp::new(c, log_d, radii)
    }

    #[test]
    fn singleton_simplex_is_forced() {
        let log_d = vec![4.2];
        let qp = DualQp::new(vec![-3.0], &log_d, vec![1.7]);
        for method in [InnerMethod::MirrorDescent, InnerMethod::Pgd] {
            let res = solve_dual_qp(&qp, method, 1e-10, 100, None);
            assert_abs_diff_eq!(res.lambda[0], 1.7, epsilon = 1e-12);
            assert!(res.converged);
        }
    }

    #[test]
    fn reduces_to_projection_without_costs() {
        // n=1, zero costs: minimizer is the projection of c
        let log_d = vec![0.0, 0.0];
        let qp = DualQp::new(vec![0.6, 0.6], &log_d, vec![1.0]);
        for method in [InnerMethod::MirrorDescent, InnerMethod::Pgd] {
            let res = solve_dual_qp(&qp, method, 1e-10, 20_000, None);
            assert!(res.converged, "{method:?} did not converge");
            assert_abs_diff_eq!(res.lambda[0], 0.5, epsilon = 1e-7);
            assert_abs_diff_eq!(res.lambda[1], 0.5, epsilon = 1e-7);
        }
    }

    #[test]
    fn feasibility_of_returned_iterates() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for trial in 0..40 {
            let n = 1 + rng.random_range(0..4);
            let m = 1 + rng.random_range(0..5);
            let mut log_d = Vec::new();
            let qp = random_qp(&mut rng, n, m, &mut log_d);
            let method = if trial % 2 == 0 {
                InnerMethod::MirrorDescent
            } else {
                InnerMethod::Pgd
            };
            let res = solve_dual_qp(&qp, method, 1e-9, 50_000, None);
            for (i, row) in res.lambda.chunks(m).enumerate() {
                assert!(row.iter().all(|&x| x >= 0.0));
                let sum: f64 = row.iter().sum();
                assert_abs_diff_eq!(sum, qp.radii[i], epsilon = 1e-12 * qp.radii[i]);
            }
        }
    }

    #[test]
    fn objective_is_monotone_for_both_methods() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for method in [InnerMethod::Pgd, InnerMethod::MirrorDescent] {
            for _ in 0..20 {
                let mut log_d = Vec::new();
                let qp = random_qp(&mut rng, 3, 4, &mut log_d);
                let mut log = Vec::new();
                let _ = solve_dual_qp_traced(&qp, method, 1e-10, 5_000, None, Some(&mut log));
                for w in log.windows(2) {
                    assert!(
                        w[1] <= w[0] + 1e-12 * (1.0 + w[0].abs()),
                        "{method:?} objective increased: {} -> {}",
                        w[0],
                        w[1]
                    );
                }
            }
        }
    }

    #[test]
    fn tighter_tolerance_never_worsens_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        for _ in 0..20 {
            let mut log_d = Vec::new();
            let qp = random_qp(&mut rng, 2, 3, &mut log_d);
            let loose = solve_dual_qp(&qp, InnerMethod::MirrorDescent, 1e-4, 50_000, None);
            let tight = solve_dual_qp(&qp, InnerMethod::MirrorDescent, 1e-9, 50_000, None);
            assert!(tight.objective <= loose.objective + 1e-12);
        }
    }

    /// Grid search over the product of scaled simplices with local
    /// refinement; independent check of the solver objective.
    fn grid_best(qp: &DualQp<'_>, rounds: usize) -> f64 {
        fn row_points(radius: f64, m: usize, center: Option<&[f64]>, span: f64, g: usize) -> Vec<Vec<f64>> {
            // compositions of g into m parts, mapped onto the simplex around
            // `center` (or the whole simplex when center is None)
            let mut pts = Vec::new();
            let mut comp = vec![0usize; m];
            fn rec(
                j: usize,
                left: usize,
                comp: &mut Vec<usize>,
                m: usize,
                out: &mut Vec<Vec<usize>>,
            ) {
                if j == m - 1 {
                    comp[j] = left;
                    out.push(comp.clone());
                    return;
                }
                for k in 0..=left {
                    comp[j] = k;
                    rec(j + 1, left - k, comp, m, out);
                }
            }
            let mut comps = Vec::new();
            rec(0, g, &mut comp, m, &mut comps);
            for c in comps {
                let raw: Vec<f64> = c.iter().map(|&k| k as f64 / g as f64).collect();
                let point: Vec<f64> = match center {
                    None => raw.iter().map(|&x| x * radius).collect(),
                    Some(ctr) => {
                        // blend of center and the grid point, stays feasible
                        let blended: Vec<f64> = ctr
                            .iter()
                            .zip(&raw)
                            .map(|(&a, &b)| (1.0 - span) * a + span * b * radius)
                            .collect();
                        blended
                    }
                };
                pts.push(point);
            }
            pts
        }

        let mut centers: Vec<Vec<f64>> = Vec::new();
        let mut best = f64::INFINITY;
        let mut best_lambda: Option<Vec<f64>> = None;
        let mut span = 1.0;
        for round in 0..rounds {
            let g = if round == 0 { 12 } else { 6 };
            let mut per_row: Vec<Vec<Vec<f64>>> = Vec::new();
            for i in 0..qp.n {
                let center = centers.get(i).map(|c| c.as_slice());
                per_row.push(row_points(qp.radii[i], qp.m, center, span, g));
            }
            // cartesian product over rows
            let mut indices = vec![0usize; qp.n];
            loop {
                let mut lambda = Vec::with_capacity(qp.n * qp.m);
                for (i, &ix) in indices.iter().enumerate() {
                    lambda.extend_from_slice(&per_row[i][ix]);
                }
                let obj = qp.objective(&lambda);
                if obj < best {
                    best = obj;
                    best_lambda = Some(lambda);
                }
                // advance mixed-radix counter
                let mut carry = true;
                for (i, ix) in indices.iter_mut().enumerate() {
                    if carry {
                        *ix += 1;
                        if *ix == per_row[i].len() {
                            *ix = 0;
                        } else {
                            carry = false;
                        }
                    }
                }
                if carry {
                    break;
                }
            }
            let lambda = best_lambda.clone().unwrap();
            centers = lambda.chunks(qp.m).map(|r| r.to_vec()).collect();
            span *= 0.35;
        }
        best
    }

    #[test]
    fn matches_grid_search_on_small_qps() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        for trial in 0..10 {
            let n = 1 + rng.random_range(0..3);
            let m = 2 + rng.random_range(0..2);
            let mut log_d = Vec::new();
            let qp = random_qp(&mut rng, n, m, &mut log_d);
            let oracle = grid_best(&qp, 9);
            for method in [InnerMethod::MirrorDescent, InnerMethod::Pgd] {
                let res = solve_dual_qp(&qp, method, 1e-11, 200_000, None);
                assert!(
                    (res.objective - oracle).abs() <= 1e-4 * (1.0 + oracle.abs()),
                    "trial {trial} {method:?}: solver {} vs grid {}",
                    res.objective,
                    oracle
                );
            }
        }
    }
}
