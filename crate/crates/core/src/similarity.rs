//! Visual-text similarity, token ranking and reversed (low-similarity) selection.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot_f32, l2_norm, Matrix};
use crate::topk;

/// `scores[i][j]` is the similarity between text `i` and visual token `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    scores: Matrix,
}

impl SimilarityMatrix {
    pub fn texts(&self) -> usize {
        self.scores.rows()
    }

    pub fn tokens(&self) -> usize {
        self.scores.cols()
    }

    pub fn row(&self, text: usize) -> &[f32] {
        self.scores.row(text)
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.scores
    }
}

/// Plain dot products between each `[EOS]` embedding and each projected visual
/// token. No normalization is applied.
///
/// Each entry is accumulated in float32 over the embedding dimension in order,
/// so results are bit-reproducible on a given platform.
pub fn visual_text_similarity(eos: &Matrix, visual: &Matrix) -> Result<SimilarityMatrix> {
    if eos.cols() != visual.cols() {
        return Err(Error::DimensionMismatch {
            what: "embedding dimension",
            expected: visual.cols(),
            found: eos.cols(),
        });
    }
    let (n, m) = (eos.rows(), visual.rows());
    let mut scores = Vec::with_capacity(n * m);
    for text in eos.iter_rows() {
        for token in visual.iter_rows() {
            scores.push(dot_f32(text, token));
        }
    }
    Ok(SimilarityMatrix {
        scores: Matrix::from_vec(n, m, scores)?,
    })
}

/// Cosine variant of [`visual_text_similarity`]: both sides are scaled to unit
/// norm first. Fails on any zero-norm row.
pub fn visual_text_cosine(eos: &Matrix, visual: &Matrix) -> Result<SimilarityMatrix> {
    visual_text_similarity(&normalize_rows(eos)?, &normalize_rows(visual)?)
}

fn normalize_rows(m: &Matrix) -> Result<Matrix> {
    let mut out = m.clone();
    for i in 0..m.rows() {
        let norm = l2_norm(m.row(i));
        if norm == 0.0 {
            return Err(Error::ZeroNormVector);
        }
        for x in out.row_mut(i) {
            *x = (f64::from(*x) / norm) as f32;
        }
    }
    Ok(out)
}

/// Rank of every token by descending score: rank 0 is the most similar token
/// and rank `M - 1` the least. Ties go to the lower index.
pub fn rank_tokens(row: &[f32]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| topk::high_first(row, a, b));
    let mut ranks = vec![0; row.len()];
    for (rank, &token) in order.iter().enumerate() {
        ranks[token] = rank;
    }
    ranks
}

/// The `min(k, M)` least similar tokens, ascending by index.
///
/// These are exactly the tokens holding the `k` largest ranks under
/// [`rank_tokens`]; among equal scores the higher index is taken first.
pub fn select_low_similarity(row: &[f32], k: usize) -> Vec<usize> {
    topk::select((0..row.len()).collect(), k, |a, b| topk::low_first(row, a, b))
}

/// The `min(k, M)` most similar tokens, ascending by index (ties to the lower index).
pub fn select_high_similarity(row: &[f32], k: usize) -> Vec<usize> {
    topk::select((0..row.len()).collect(), k, |a, b| topk::high_first(row, a, b))
}

/// Cosine similarity clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            what: "cosine operands",
            expected: a.len(),
            found: b.len(),
        });
    }
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNormVector);
    }
    let dot: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Symmetric InfoNCE over cosine similarities of paired image/text embeddings.
///
/// Row `i` of `images` is paired with row `i` of `texts`. Evaluation only.
pub fn contrastive_loss(images: &Matrix, texts: &Matrix, tau: f64) -> Result<f64> {
    let positive = tau > 0.0;
    if !positive {
        return Err(Error::NonPositiveTemperature(tau));
    }
    if images.rows() != texts.rows() {
        return Err(Error::DimensionMismatch {
            what: "batch size",
            expected: images.rows(),
            found: texts.rows(),
        });
    }
    let b = images.rows();
    if b == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut logits = vec![0.0f64; b * b];
    for i in 0..b {
        for j in 0..b {
            logits[i * b + j] = cosine_similarity(images.row(i), texts.row(j))? / tau;
        }
    }

    let mut image_to_text = 0.0;
    for i in 0..b {
        let row = (0..b).map(|j| logits[i * b + j]);
        image_to_text += log_sum_exp(row) - logits[i * b + i];
    }
    let mut text_to_image = 0.0;
    for j in 0..b {
        let col = (0..b).map(|k| logits[k * b + j]);
        text_to_image += log_sum_exp(col) - logits[j * b + j];
    }
    Ok((image_to_text + text_to_image) / (2.0 * b as f64))
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = values.map(|v| libm::exp(v - max)).sum();
    max + libm::log(sum)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basis_similarity() {
        let eos = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let vis = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]]).unwrap();
        let s = visual_text_similarity(&eos, &vis).unwrap();
        assert_eq!(s.row(0), &[1.0, 0.0, -1.0]);
    }

    #[test]
    fn zero_text_gives_zero_scores() {
        let eos = Matrix::zeros(1, 3);
        let vis = Matrix::from_rows(&[[1.0, 2.0, 3.0], [-4.0, 5.0, 0.5]]).unwrap();
        let s = visual_text_similarity(&eos, &vis).unwrap();
        assert!(s.row(0).iter().all(|&x| x == 0.0));
        // signed zeros still tie on index
        assert_eq!(rank_tokens(s.row(0)), vec![0, 1]);
    }

    #[test]
    fn dimension_mismatch() {
        let eos = Matrix::zeros(1, 3);
        let vis = Matrix::zeros(4, 2);
        assert!(matches!(
            visual_text_similarity(&eos, &vis),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn cosine_path_normalizes() {
        let eos = Matrix::from_rows(&[[2.0, 0.0]]).unwrap();
        let vis = Matrix::from_rows(&[[3.0, 0.0], [0.0, 5.0]]).unwrap();
        let s = visual_text_cosine(&eos, &vis).unwrap();
        assert_eq!(s.row(0), &[1.0, 0.0]);
        assert_eq!(
            visual_text_cosine(&Matrix::zeros(1, 2), &vis),
            Err(Error::ZeroNormVector)
        );
    }

    #[test]
    fn ranks_and_selection() {
        let row = [0.5, 0.9, 0.1];
        assert_eq!(rank_tokens(&row), vec![1, 0, 2]);
        assert_eq!(select_low_similarity(&row, 1), vec![2]);
        assert_eq!(select_high_similarity(&row, 1), vec![1]);
        assert_eq!(select_low_similarity(&row, 3), vec![0, 1, 2]);
        assert_eq!(select_low_similarity(&row, 10), vec![0, 1, 2]);
        assert!(select_low_similarity(&row, 0).is_empty());
    }

    #[test]
    fn ties_are_mirrored() {
        let row = [1.0; 5];
        assert_eq!(rank_tokens(&row), vec![0, 1, 2, 3, 4]);
        assert_eq!(select_low_similarity(&row, 2), vec![3, 4]);
        assert_eq!(select_high_similarity(&row, 2), vec![0, 1]);
    }

    #[test]
    fn cosine_values() {
        assert!((cosine_similarity(&[3.0, 4.0], &[3.0, 4.0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - core::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6);
        assert_eq!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::ZeroNormVector)
        );
    }

    #[test]
    fn contrastive_single_pair_is_zero() {
        let a = Matrix::from_rows(&[[0.3, -1.0, 2.0]]).unwrap();
        let b = Matrix::from_rows(&[[1.0, 1.0, 1.0]]).unwrap();
        assert!(contrastive_loss(&a, &b, 0.07).unwrap().abs() < 1e-12);
    }

    #[test]
    fn contrastive_orthonormal_pairs() {
        let eye = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let loss = contrastive_loss(&eye, &eye, 1.0).unwrap();
        let e = core::f64::consts::E;
        assert!((loss - -libm::log(e / (e + 1.0))).abs() < 1e-12);
        assert!((loss - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn contrastive_rejects_bad_temperature() {
        let eye = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        assert_eq!(
            contrastive_loss(&eye, &eye, 0.0),
            Err(Error::NonPositiveTemperature(0.0))
        );
    }
}
