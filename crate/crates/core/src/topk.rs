//! Deterministic top-k selection shared by every ranking operation.

use alloc::vec::Vec;
use core::cmp::Ordering;

/// Above this population size selection switches from a full sort to
/// `select_nth_unstable_by`. Both paths produce the same set because the
/// comparators below are total orders over distinct indices.
pub(crate) const PARTIAL_SELECT_THRESHOLD: usize = 4096;

#[inline]
fn cmp_scores(a: f32, b: f32) -> Ordering {
    // Finite inputs only; -0.0 and 0.0 compare equal so they tie on index.
    a.partial_cmp(&b).unwrap_or(Ordering::Equal)
}

/// Highest score first, lower index wins ties.
#[inline]
pub(crate) fn high_first(scores: &[f32], a: usize, b: usize) -> Ordering {
    cmp_scores(scores[b], scores[a]).then(a.cmp(&b))
}

/// Lowest score first, higher index wins ties.
#[inline]
pub(crate) fn low_first(scores: &[f32], a: usize, b: usize) -> Ordering {
    cmp_scores(scores[a], scores[b]).then(b.cmp(&a))
}

/// Picks the first `k` of `pool` under `order` and returns them ascending by index.
pub(crate) fn select<F>(mut pool: Vec<usize>, k: usize, order: F) -> Vec<usize>
where
    F: Fn(usize, usize) -> Ordering,
{
    if k == 0 {
        return Vec::new();
    }
    if k < pool.len() {
        if pool.len() > PARTIAL_SELECT_THRESHOLD {
            pool.select_nth_unstable_by(k - 1, |&a, &b| order(a, b));
        } else {
            pool.sort_by(|&a, &b| order(a, b));
        }
        pool.truncate(k);
    }
    pool.sort_unstable();
    pool
}
