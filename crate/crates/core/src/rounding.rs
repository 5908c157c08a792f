//! Price-floor rounding: lifts low log-price coordinates to thresholds so
//! every implied price satisfies `q_j >= e^a`, preserving the coordinate sum
//! and never increasing the (smoothed) objective.
//!
//! The lift proceeds in at most `m` sweeps. Coordinates whose implied price
//! is below the floor are first raised to their common maximum, then raised
//! together toward a threshold; whenever the threshold would overtake a
//! coordinate that is currently above the lifted group, that coordinate
//! joins the group instead. A final uniform shift restores the original
//! coordinate sum.

use crate::kernels;
use crate::objective::LogPrices;

#[derive(Debug, thiserror::Error)]
pub enum RoundError {
    /// `e^a >= b/m`: every coordinate could sit below the floor at once and
    /// the lifting threshold becomes ill-defined.
    #[error("price floor e^{floor} too high for total budget {budget} over {chores} chores")]
    FloorTooHigh {
        floor: f64,
        budget: f64,
        chores: usize,
    },
    /// Threshold denominator `b - |J| e^a` was non-positive; signals a guard
    /// breach by the caller.
    #[error("degenerate rounding threshold")]
    DegenerateThreshold,
}

/// The lifting threshold for the excluded set `J`:
/// `log sum_{j not in J} e^{mu_j} - log(b e^{-a} - |J|)`, evaluated as
/// `lse + a - log(b - |J| e^a)` so very negative floors cannot overflow.
pub fn threshold(mu: &[f64], in_group: &[bool], a: f64, b: f64) -> Result<f64, RoundError> {
    debug_assert_eq!(mu.len(), in_group.len());
    let group_size = in_group.iter().filter(|&&x| x).count();
    let den = b - group_size as f64 * a.exp();
    if den <= 0.0 {
        return Err(RoundError::DegenerateThreshold);
    }
    let outside: Vec<f64> = mu
        .iter()
        .zip(in_group)
        .filter(|(_, &inside)| !inside)
        .map(|(&v, _)| v)
        .collect();
    Ok(kernels::log_sum_exp(&outside) + a - den.ln())
}

/// Rounds `mu0` so that `q_j(out) >= e^a` for every chore, with
/// `1' out = 1' mu0` and `F_delta(out) <= F_delta(mu0)` for any smoothing
/// level whose floor dominates `a`. Returns `mu0` unchanged when no
/// coordinate is below the floor.
pub fn round(a: f64, mu0: &LogPrices, b: f64) -> Result<LogPrices, RoundError> {
    round_slice(a, mu0.as_slice(), b).map(LogPrices::new)
}

pub(crate) fn round_slice(a: f64, mu0: &[f64], b: f64) -> Result<Vec<f64>, RoundError> {
    let m = mu0.len();
    assert!(b > 0.0, "total budget must be positive");
    if a.exp() >= b / m as f64 {
        return Err(RoundError::FloorTooHigh {
            floor: a,
            budget: b,
            chores: m,
        });
    }

    // q_j(mu0) < e^a  <=>  mu0_j < a - log b + lse(mu0)
    let cut = a - b.ln() + kernels::log_sum_exp(mu0);
    let mut in_group: Vec<bool> = mu0.iter().map(|&v| v < cut).collect();
    if in_group.iter().all(|&x| !x) {
        return Ok(mu0.to_vec());
    }

    let mut mu = mu0.to_vec();
    let top = mu
        .iter()
        .zip(&in_group)
        .filter(|(_, &inside)| inside)
        .map(|(&v, _)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    for (v, &inside) in mu.iter_mut().zip(&in_group) {
        if inside {
            *v = top;
        }
    }

    let mut sweeps = 0;
    loop {
        sweeps += 1;
        assert!(sweeps <= m, "rounding exceeded {m} sweeps");
        let thres = threshold(&mu, &in_group, a, b)?;

        // smallest coordinate outside the group that sits below the threshold
        let mut joins = f64::INFINITY;
        for (&v, &inside) in mu.iter().zip(&in_group) {
            if !inside && v < thres && v < joins {
                joins = v;
            }
        }
        if joins.is_finite() {
            for (v, inside) in mu.iter_mut().zip(in_group.iter_mut()) {
                if *inside {
                    *v = joins;
                } else if *v == joins {
                    *inside = true;
                }
            }
        } else {
            for (v, &inside) in mu.iter_mut().zip(&in_group) {
                if inside {
                    *v = thres;
                }
            }
            let shift =
                (mu0.iter().sum::<f64>() - mu.iter().sum::<f64>()) / m as f64;
            for v in mu.iter_mut() {
                *v += shift;
            }
            return Ok(mu);
        }
    }
}
