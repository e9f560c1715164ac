//! Rectangular Hungarian (Kuhn-Munkres) assignment.

use alloc::vec;
use alloc::vec::Vec;

const FORBIDDEN_COST: f64 = 1e15;

/// Minimum-cost assignment on a rectangular cost matrix, potentials
/// formulation, O(n^3). Returns (row, col) pairs; rows/cols beyond the
/// smaller dimension stay unassigned.
pub fn minimize(cost: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let rows = cost.len();
    if rows == 0 {
        return Vec::new();
    }
    let cols = cost[0].len();
    if cols == 0 {
        return Vec::new();
    }
    let n = rows.max(cols);
    // pad to square; dummy entries cost 0
    let at = |i: usize, j: usize| -> f64 {
        if i < rows && j < cols {
            let c = cost[i][j];
            if c.is_finite() {
                c
            } else {
                FORBIDDEN_COST
            }
        } else {
            0.0
        }
    };

    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1]; // col -> row (1-based; 0 = free)
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut out = Vec::new();
    #[allow(clippy::needless_range_loop)] // p is 1-indexed; enumerate obscures that
    for j in 1..=n {
        let i = p[j];
        if i >= 1 && i - 1 < rows && j - 1 < cols && at(i - 1, j - 1) < FORBIDDEN_COST {
            out.push((i - 1, j - 1));
        }
    }
    out.sort_unstable();
    out
}

/// Maximum-score assignment; `f64::NEG_INFINITY` marks forbidden pairs,
/// which are never returned.
pub fn maximize(score: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let cost: Vec<Vec<f64>> = score
        .iter()
        .map(|r| {
            r.iter()
                .map(|&s| {
                    if s == f64::NEG_INFINITY {
                        f64::INFINITY
                    } else {
                        -s
                    }
                })
                .collect()
        })
        .collect();
    minimize(&cost)
}
