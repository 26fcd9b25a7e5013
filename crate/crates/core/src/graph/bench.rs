//! Wall-clock comparison of the slice-shift generator against the O(N²)
//! scan baseline.

use super::{generate_grid_graph, oracle_adjacency, GridSpec, NeighborMode};
use crate::error::{Error, Result};
use std::hint::black_box;
use std::time::Instant;

/// One benchmark measurement: mean seconds per generation for both
/// contenders at one size, and their ratio (baseline / fast).
#[derive(Clone, Debug)]
pub struct BenchRow {
    pub n: usize,
    pub mode: NeighborMode,
    pub fast_seconds: f64,
    pub oracle_seconds: f64,
    pub ratio: f64,
}

/// Times both generators on each grid of the ladder.
///
/// Per size: one untimed warm-up run each, then the mean of `repeats`
/// timed runs on the monotonic clock. Both contenders run single-threaded
/// on identical inputs and each is measured end to end — from grid spec
/// to finished sparse adjacency — so the comparison is between the two
/// complete construction strategies. Requires `repeats >= 3` so the mean
/// is not a single noisy sample.
pub fn bench_generation(
    sizes: &[GridSpec],
    mode: NeighborMode,
    repeats: usize,
) -> Result<Vec<BenchRow>> {
    if repeats < 3 {
        return Err(Error::Invalid(format!(
            "benchmark repeats must be at least 3, got {repeats}"
        )));
    }
    let mut rows = Vec::with_capacity(sizes.len());
    for &spec in sizes {
        let fast_seconds = time_mean(repeats, || {
            black_box(generate_grid_graph(black_box(spec), mode).unwrap());
        });
        let oracle_seconds = time_mean(repeats, || {
            black_box(oracle_adjacency(black_box(spec), mode).unwrap());
        });
        rows.push(BenchRow {
            n: spec.nodes(mode),
            mode,
            fast_seconds,
            oracle_seconds,
            ratio: oracle_seconds / fast_seconds,
        });
    }
    Ok(rows)
}

fn time_mean(repeats: usize, mut f: impl FnMut()) -> f64 {
    f(); // warm-up, discarded
    let start = Instant::now();
    for _ in 0..repeats {
        f();
    }
    start.elapsed().as_secs_f64() / repeats as f64
}

/// Renders benchmark rows as CSV: header
/// `n,mode,fast_seconds,oracle_seconds,ratio`, seconds and ratio with six
/// decimals.
pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("n,mode,fast_seconds,oracle_seconds,ratio\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6}\n",
            r.n, r.mode, r.fast_seconds, r.oracle_seconds, r.ratio
        ));
    }
    out
}
