//! Shared numerical kernels: max-shifted log-sum-exp/softmax and
//! deterministic reductions over agents.
//!
//! All reductions run in a fixed order so results are bit-identical across
//! runs and across the `parallel` feature: sums over agents are chunked at a
//! fixed size, each chunk is accumulated sequentially, and chunk partials are
//! combined in chunk order. With `parallel` enabled the chunk partials are
//! computed concurrently; the combination order is unchanged.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Fixed chunk size for agent reductions. Keeping this constant (rather than
/// deriving it from the thread count) is what makes parallel and sequential
/// results bit-identical.
pub(crate) const AGENT_CHUNK: usize = 64;

/// Work threshold (in matrix entries) below which the parallel dispatch
/// stays sequential; rayon overhead dominates tiny markets.
pub(crate) const PAR_MIN_ENTRIES: usize = 16 * 1024;

/// log(sum_j exp(x_j)) with the running maximum subtracted first.
/// Returns -inf for an empty slice.
pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for &x in xs {
        if x > max {
            max = x;
        }
    }
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let mut sum = 0.0;
    for &x in xs {
        sum += (x - max).exp();
    }
    max + sum.ln()
}

/// Writes softmax(x) into `out` using a max shift. `out.len() == xs.len()`.
pub(crate) fn softmax_into(xs: &[f64], out: &mut [f64]) {
    debug_assert_eq!(xs.len(), out.len());
    let mut max = f64::NEG_INFINITY;
    for &x in xs {
        if x > max {
            max = x;
        }
    }
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(xs) {
        let e = (x - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Sum of `f(i)` over `i in 0..n`, reduced deterministically.
pub(crate) fn sum_over<F>(n: usize, par: bool, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    let chunk_sums = map_chunks(n, par, |range| range.map(&f).sum::<f64>());
    chunk_sums.iter().sum()
}

/// Applies `f` to each fixed-size chunk of `0..n` and returns the per-chunk
/// results in chunk order. Concurrent when `par` is set, the feature is on,
/// and there is enough work; the chunking itself never changes.
pub(crate) fn map_chunks<T, F>(n: usize, par: bool, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(std::ops::Range<usize>) -> T + Sync + Send,
{
    let ranges: Vec<_> = (0..n)
        .step_by(AGENT_CHUNK)
        .map(|start| start..(start + AGENT_CHUNK).min(n))
        .collect();
    #[cfg(feature = "parallel")]
    {
        if par && n > 2 * AGENT_CHUNK {
            return ranges.into_par_iter().map(f).collect();
        }
    }
    let _ = par;
    ranges.into_iter().map(f).collect()
}

/// Runs `f` on each row of an `n x m` row-major matrix, in parallel when
/// worthwhile. Rows are disjoint, so scheduling cannot affect the result.
pub(crate) fn for_each_row<F>(data: &mut [f64], m: usize, par: bool, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    debug_assert_eq!(data.len() % m, 0);
    #[cfg(feature = "parallel")]
    {
        if par && data.len() >= PAR_MIN_ENTRIES {
            data.par_chunks_mut(m)
                .enumerate()
                .for_each(|(i, row)| f(i, row));
            return;
        }
    }
    let _ = par;
    for (i, row) in data.chunks_mut(m).enumerate() {
        f(i, row);
    }
}

/// Column sums of an `n x m` row-major matrix, reduced deterministically
/// (chunks of rows, partials combined in chunk order).
pub(crate) fn column_sums(data: &[f64], n: usize, m: usize, par: bool) -> Vec<f64> {
    debug_assert_eq!(data.len(), n * m);
    let partials = map_chunks(n, par && n * m >= PAR_MIN_ENTRIES, |range| {
        let mut acc = vec![0.0; m];
        for i in range {
            let row = &data[i * m..(i + 1) * m];
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        acc
    });
    let mut out = vec![0.0; m];
    for part in &partials {
        for (o, &p) in out.iter_mut().zip(part) {
            *o += p;
        }
    }
    out
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
