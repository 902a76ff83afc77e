//! Contextual importance of visual tokens relative to the `[CLS]` query, and
//! reconstruction of the `[CLS]` embedding from its attention row.
//!
//! For every head `h` and candidate token `i` the weight `w_h[i]` is a softmax
//! of `q_h · k_{h,i} / sqrt(d_h)` taken over the candidate set, and the
//! per-head score is `‖w_h[i] · v_{h,i}‖₂ = w_h[i] · ‖v_{h,i}‖₂`. Heads are then
//! reduced to a single score per token.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot_f32, l2_norm, Matrix, Tensor3};
use crate::topk;

/// Token set the softmax denominator runs over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftmaxDomain {
    /// Only the candidate (non-retained) tokens.
    #[default]
    Candidates,
    /// All `M` visual tokens; scores are still reported for candidates only.
    All,
}

/// How per-head scores collapse into one score per token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadReduce {
    #[default]
    Mean,
    Max,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextOptions {
    pub softmax_domain: SoftmaxDomain,
    pub head_reduce: HeadReduce,
}

/// Contextual importance per candidate token. `scores[n]` belongs to `candidates[n]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextScores {
    candidates: Vec<usize>,
    scores: Vec<f32>,
}

impl ContextScores {
    /// Candidate set, ascending and without duplicates.
    pub fn candidates(&self) -> &[usize] {
        &self.candidates
    }

    pub fn scores(&self) -> &[f32] {
        &self.scores
    }

    pub fn get(&self, token: usize) -> Option<f32> {
        self.candidates
            .binary_search(&token)
            .ok()
            .map(|n| self.scores[n])
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f32)> + '_ {
        self.candidates.iter().copied().zip(self.scores.iter().copied())
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

fn check_shapes(query: &Matrix, keys: &Tensor3, values: &Tensor3) -> Result<(usize, usize, usize)> {
    let [h, m, d] = keys.dims();
    if values.dims() != keys.dims() {
        return Err(Error::DimensionMismatch {
            what: "values vs keys",
            expected: h * m * d,
            found: values.dims().iter().product(),
        });
    }
    if query.rows() != h {
        return Err(Error::DimensionMismatch {
            what: "query heads",
            expected: h,
            found: query.rows(),
        });
    }
    if query.cols() != d {
        return Err(Error::DimensionMismatch {
            what: "head dimension",
            expected: d,
            found: query.cols(),
        });
    }
    Ok((h, m, d))
}

fn normalize_candidates(candidates: &[usize], m: usize) -> Result<Vec<usize>> {
    if candidates.is_empty() {
        return Err(Error::EmptyCandidateSet);
    }
    let mut set = candidates.to_vec();
    set.sort_unstable();
    set.dedup();
    if let Some(&bad) = set.last().filter(|&&i| i >= m) {
        return Err(Error::IndexOutOfRange { index: bad, len: m });
    }
    Ok(set)
}

/// Softmax weights of one head's `[CLS]` query over `domain`, in `domain` order.
///
/// Logits are computed in float32; the max-subtracted exponentials and their
/// sum are accumulated in f64.
pub fn head_weights(query: &[f32], keys: &[f32], head_dim: usize, domain: &[usize]) -> Vec<f64> {
    let scale = 1.0 / libm::sqrt(head_dim as f64);
    let logits: Vec<f64> = domain
        .iter()
        .map(|&i| f64::from(dot_f32(query, &keys[i * head_dim..(i + 1) * head_dim])) * scale)
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = logits.iter().map(|&l| libm::exp(l - max)).collect();
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    weights
}

/// Contextual importance score of every token in `candidates`.
pub fn context_importance(
    query: &Matrix,
    keys: &Tensor3,
    values: &Tensor3,
    candidates: &[usize],
    opts: ContextOptions,
) -> Result<ContextScores> {
    let (heads, m, d) = check_shapes(query, keys, values)?;
    if d == 0 {
        return Err(Error::DimensionMismatch {
            what: "head dimension",
            expected: 1,
            found: 0,
        });
    }
    let candidates = normalize_candidates(candidates, m)?;
    let all: Vec<usize>;
    let domain: &[usize] = match opts.softmax_domain {
        SoftmaxDomain::Candidates => &candidates,
        SoftmaxDomain::All => {
            all = (0..m).collect();
            &all
        }
    };

    let mut reduced = vec![
        match opts.head_reduce {
            HeadReduce::Mean => 0.0f64,
            HeadReduce::Max => f64::NEG_INFINITY,
        };
        candidates.len()
    ];
    // Heads are folded in index order so the reduction is reproducible.
    for h in 0..heads {
        let weights = head_weights(query.row(h), keys.slab(h), d, domain);
        for (n, &token) in candidates.iter().enumerate() {
            let w = match opts.softmax_domain {
                SoftmaxDomain::Candidates => weights[n],
                SoftmaxDomain::All => weights[token],
            };
            let score = w * l2_norm(values.vector(h, token));
            match opts.head_reduce {
                HeadReduce::Mean => reduced[n] += score,
                HeadReduce::Max => reduced[n] = reduced[n].max(score),
            }
        }
    }
    let scores = reduced
        .into_iter()
        .map(|s| match opts.head_reduce {
            HeadReduce::Mean if heads > 0 => (s / heads as f64) as f32,
            HeadReduce::Mean => 0.0,
            HeadReduce::Max if heads > 0 => s as f32,
            HeadReduce::Max => 0.0,
        })
        .collect();
    Ok(ContextScores { candidates, scores })
}

/// The `min(k, |S|)` highest-scoring candidates, ascending by index. Ties go
/// to the lower index.
pub fn recover_context_tokens(scores: &ContextScores, k: usize) -> Vec<usize> {
    let by_token = |a: usize, b: usize| {
        let sa = scores.scores[a];
        let sb = scores.scores[b];
        sb.partial_cmp(&sa)
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    };
    // Positions in `candidates` are ordered the same way as token indices.
    topk::select((0..scores.len()).collect(), k, by_token)
        .into_iter()
        .map(|n| scores.candidates[n])
        .collect()
}

/// Tolerance on `self_weight + Σ attention` when rebuilding the `[CLS]` embedding.
pub const CLS_NORMALIZATION_TOL: f64 = 1e-4;

/// Rebuilds the `[CLS]` output as the attention-weighted sum of values.
///
/// Row 0 of `values` is the `[CLS]` token's own value (weighted by
/// `self_weight`); row `j + 1` is visual token `j` (weighted by `attention[j]`).
pub fn cls_embedding(attention: &[f32], self_weight: f32, values: &Matrix) -> Result<Vec<f32>> {
    if values.rows() != attention.len() + 1 {
        return Err(Error::DimensionMismatch {
            what: "value rows",
            expected: attention.len() + 1,
            found: values.rows(),
        });
    }
    let sum = f64::from(self_weight) + attention.iter().map(|&a| f64::from(a)).sum::<f64>();
    let normalized = (sum - 1.0).abs() <= CLS_NORMALIZATION_TOL;
    if !normalized {
        return Err(Error::AttentionNotNormalized { sum });
    }
    let mut acc = vec![0.0f64; values.cols()];
    let weights = core::iter::once(self_weight).chain(attention.iter().copied());
    for (w, row) in weights.zip(values.iter_rows()) {
        let w = f64::from(w);
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += w * f64::from(v);
        }
    }
    Ok(acc.into_iter().map(|x| x as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_head(keys: &[[f32; 2]], values: &[[f32; 2]], query: [f32; 2]) -> (Matrix, Tensor3, Tensor3) {
        let m = keys.len();
        let q = Matrix::from_rows(&[query]).unwrap();
        let k = Tensor3::from_vec([1, m, 2], keys.iter().flatten().copied().collect()).unwrap();
        let v = Tensor3::from_vec([1, m, 2], values.iter().flatten().copied().collect()).unwrap();
        (q, k, v)
    }

    #[test]
    fn equal_logits_split_evenly() {
        let (q, k, v) = single_head(&[[1.0, 0.0], [1.0, 0.0]], &[[2.0, 0.0], [0.0, 4.0]], [1.0, 1.0]);
        let s = context_importance(&q, &k, &v, &[0, 1], ContextOptions::default()).unwrap();
        assert_eq!(s.get(0), Some(1.0));
        assert_eq!(s.get(1), Some(2.0));
        assert_eq!(recover_context_tokens(&s, 1), vec![1]);
        assert_eq!(recover_context_tokens(&s, 5), vec![0, 1]);
    }

    #[test]
    fn candidate_domain_renormalizes() {
        let (q, k, v) = single_head(
            &[[1.0, 0.0], [2.0, 0.0], [3.0, 0.0]],
            &[[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]],
            [1.0, 0.0],
        );
        let cand = context_importance(&q, &k, &v, &[0, 2], ContextOptions::default()).unwrap();
        let total: f32 = cand.scores().iter().sum();
        assert!((total - 1.0).abs() < 1e-6);
        let all = context_importance(
            &q,
            &k,
            &v,
            &[0, 2],
            ContextOptions {
                softmax_domain: SoftmaxDomain::All,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(all.scores().iter().sum::<f32>() < 0.99);
    }

    #[test]
    fn candidate_errors() {
        let (q, k, v) = single_head(&[[1.0, 0.0]], &[[1.0, 0.0]], [1.0, 0.0]);
        let opts = ContextOptions::default();
        assert_eq!(
            context_importance(&q, &k, &v, &[], opts),
            Err(Error::EmptyCandidateSet)
        );
        assert_eq!(
            context_importance(&q, &k, &v, &[3], opts),
            Err(Error::IndexOutOfRange { index: 3, len: 1 })
        );
    }

    #[test]
    fn max_reduce_takes_largest_head() {
        let q = Matrix::from_rows(&[[0.0], [0.0]]).unwrap();
        let k = Tensor3::zeros(2, 2, 1);
        let v = Tensor3::from_vec([2, 2, 1], vec![1.0, 1.0, 6.0, 2.0]).unwrap();
        let opts = ContextOptions {
            head_reduce: HeadReduce::Max,
            ..Default::default()
        };
        let s = context_importance(&q, &k, &v, &[0, 1], opts).unwrap();
        assert_eq!(s.scores(), &[3.0, 1.0]);
        let mean = context_importance(&q, &k, &v, &[0, 1], ContextOptions::default()).unwrap();
        assert_eq!(mean.scores(), &[1.75, 0.75]);
    }

    #[test]
    fn cls_one_hot_and_uniform() {
        let values = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0], [7.0, 8.0]]).unwrap();
        let e = cls_embedding(&[0.0, 1.0, 0.0], 0.0, &values).unwrap();
        assert_eq!(e, vec![5.0, 6.0]);
        let e = cls_embedding(&[0.25; 3], 0.25, &values).unwrap();
        assert_eq!(e, vec![4.0, 5.0]);
        assert!(matches!(
            cls_embedding(&[0.5, 0.0, 0.0], 0.0, &values),
            Err(Error::AttentionNotNormalized { .. })
        ));
    }
}
