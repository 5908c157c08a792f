//! Per-iteration solver traces and their CSV form.

use serde::{Deserialize, Serialize};

/// One outer-iteration record. `smoothed_objective` is only set by solvers
/// that work on the smoothed objective.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRow {
    pub k: usize,
    pub objective: f64,
    pub smoothed_objective: Option<f64>,
    pub step_norm: f64,
    pub measure_max: f64,
    pub inner_iterations: usize,
    /// Wall-clock duration of this iteration in milliseconds.
    pub elapsed_ms: f64,
}

/// Iteration records plus (optionally) the full iterate history, which the
/// convergence-rate fit needs.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SolverTrace {
    pub rows: Vec<TraceRow>,
    /// Iterates `mu^0, mu^1, ...` when recording was enabled; empty
    /// otherwise.
    pub mu_history: Vec<Vec<f64>>,
}

pub const TRACE_CSV_HEADER: &str = "k,F,F_delta,step_norm,measure_max,inner_iters,elapsed_ms";

impl SolverTrace {
    pub fn push(&mut self, row: TraceRow) {
        debug_assert!(self.rows.last().map_or(true, |r| row.k > r.k));
        self.rows.push(row);
    }

    pub fn iterations(&self) -> usize {
        self.rows.len()
    }

    pub fn mean_iteration_ms(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().map(|r| r.elapsed_ms).sum::<f64>() / self.rows.len() as f64
    }

    /// Renders the trace in the fixed schema
    /// `k,F,F_delta,step_norm,measure_max,inner_iters,elapsed_ms`; the
    /// `F_delta` field is empty when not applicable.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.rows.len() + 1));
        out.push_str(TRACE_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let fd = r
                .smoothed_objective
                .map(|v| format!("{v:.17e}"))
                .unwrap_or_default();
            out.push_str(&format!(
                "{},{:.17e},{},{:.17e},{:.17e},{},{:.3}\n",
                r.k, r.objective, fd, r.step_norm, r.measure_max, r.inner_iterations, r.elapsed_ms
            ));
        }
        out
    }
}
