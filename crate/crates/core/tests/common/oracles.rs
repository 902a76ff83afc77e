//! Brute-force reference implementations. These use only plain slices and full
//! sorts so they stay independent of the library code paths they check.

#![allow(dead_code)]

use std::cmp::Ordering;

fn cmp(a: f32, b: f32) -> Ordering {
    a.partial_cmp(&b).unwrap()
}

/// Naive double loop, float32, dimension-sequential.
pub fn similarity(eos: &[Vec<f32>], visual: &[Vec<f32>]) -> Vec<Vec<f32>> {
    eos.iter()
        .map(|e| {
            visual
                .iter()
                .map(|v| {
                    let mut acc = 0.0f32;
                    for k in 0..e.len() {
                        acc += e[k] * v[k];
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

/// Stable sort by descending score; stability leaves ties in index order.
pub fn ranks(row: &[f32]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| cmp(row[b], row[a]));
    let mut ranks = vec![0; row.len()];
    for (r, &j) in order.iter().enumerate() {
        ranks[j] = r;
    }
    ranks
}

/// Sort ascending by score, higher index first among ties, take `k`.
pub fn lowest(row: &[f32], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| cmp(row[a], row[b]).then(b.cmp(&a)));
    let mut out: Vec<usize> = order.into_iter().take(k).collect();
    out.sort();
    out
}

/// Sort descending by score, lower index first among ties, take `k`.
pub fn highest(row: &[f32], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| cmp(row[b], row[a]).then(a.cmp(&b)));
    let mut out: Vec<usize> = order.into_iter().take(k).collect();
    out.sort();
    out
}

/// Highest `k` of `(token, score)` pairs, lower token first among ties.
pub fn highest_pairs(pairs: &[(usize, f32)], k: usize) -> Vec<usize> {
    let mut v = pairs.to_vec();
    v.sort_by(|a, b| cmp(b.1, a.1).then(a.0.cmp(&b.0)));
    let mut out: Vec<usize> = v.into_iter().take(k).map(|p| p.0).collect();
    out.sort();
    out
}

/// Per-head softmax over `domain` of q·k/sqrt(d), weighted value norms, mean
/// over heads. `query[h]`, `keys[h][j]`, `values[h][j]`.
pub fn context_scores(
    query: &[Vec<f32>],
    keys: &[Vec<Vec<f32>>],
    values: &[Vec<Vec<f32>>],
    domain: &[usize],
    candidates: &[usize],
) -> Vec<f64> {
    let heads = query.len();
    let mut out = vec![0.0f64; candidates.len()];
    for h in 0..heads {
        let d = query[h].len() as f64;
        let logit = |j: usize| -> f64 {
            let mut acc = 0.0f64;
            for k in 0..query[h].len() {
                acc += query[h][k] as f64 * keys[h][j][k] as f64;
            }
            acc / d.sqrt()
        };
        let mut denom = 0.0f64;
        for &j in domain {
            denom += logit(j).exp();
        }
        for (n, &i) in candidates.iter().enumerate() {
            let w = logit(i).exp() / denom;
            let scaled: f64 = values[h][i]
                .iter()
                .map(|&v| (w * v as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            out[n] += scaled / heads as f64;
        }
    }
    out
}

/// Weighted sum of value rows, `weights[r]` against `values[r]`.
pub fn weighted_sum(weights: &[f64], values: &[Vec<f32>]) -> Vec<f64> {
    let mut out = vec![0.0f64; values[0].len()];
    for (w, row) in weights.iter().zip(values) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += w * v as f64;
        }
    }
    out
}

/// Textbook two-pass Pearson correlation.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-30)
}
