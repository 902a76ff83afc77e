mod common {
    pub mod oracles;
}

use common::oracles;
use prunekit_core::analysis::{attention_correlation, CorrelationMethod};
use prunekit_core::context::{cls_embedding, context_importance, recover_context_tokens, ContextOptions, SoftmaxDomain};
use prunekit_core::similarity::{rank_tokens, select_high_similarity, select_low_similarity, visual_text_similarity};
use prunekit_core::{Matrix, Tensor3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f32>> {
    (0..n)
        .map(|_| (0..d).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
        .collect()
}

#[test]
fn similarity_matches_double_loop_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let eos = rows(&mut rng, 2, 4);
    let vis = rows(&mut rng, 8, 4);
    let got = visual_text_similarity(&Matrix::from_rows(&eos).unwrap(), &Matrix::from_rows(&vis).unwrap()).unwrap();
    let want = oracles::similarity(&eos, &vis);
    for i in 0..2 {
        let a: Vec<u32> = got.row(i).iter().map(|x| x.to_bits()).collect();
        let b: Vec<u32> = want[i].iter().map(|x| x.to_bits()).collect();
        assert_eq!(a, b);
    }
}

#[test]
fn ranking_matches_stable_sort() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for trial in 0..50 {
        let row: Vec<f32> = (0..64)
            .map(|_| if trial % 2 == 0 { rng.gen_range(-1.0..1.0) } else { rng.gen_range(0..5) as f32 })
            .collect();
        assert_eq!(rank_tokens(&row), oracles::ranks(&row));
    }
}

#[test]
fn low_selection_matches_sort_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..20 {
        let row: Vec<f32> = (0..512)
            .map(|_| if trial % 2 == 0 { rng.gen_range(-1.0..1.0) } else { rng.gen_range(0..9) as f32 })
            .collect();
        assert_eq!(select_low_similarity(&row, 64), oracles::lowest(&row, 64));
        assert_eq!(select_high_similarity(&row, 64), oracles::highest(&row, 64));
    }
}

#[test]
fn partial_selection_path_matches_full_sort() {
    // Above 4096 tokens the selection switches to select_nth_unstable.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for &m in &[4097usize, 6000] {
        let row: Vec<f32> = (0..m).map(|_| rng.gen_range(0..50) as f32).collect();
        for k in [1, 100, m / 2, m - 1] {
            assert_eq!(select_low_similarity(&row, k), oracles::lowest(&row, k));
            assert_eq!(select_high_similarity(&row, k), oracles::highest(&row, k));
        }
    }
}

fn random_heads(rng: &mut ChaCha8Rng, h: usize, m: usize, d: usize) -> (Vec<Vec<f32>>, Vec<Vec<Vec<f32>>>, Vec<Vec<Vec<f32>>>) {
    let q = rows(rng, h, d);
    let k: Vec<_> = (0..h).map(|_| rows(rng, m, d)).collect();
    let v: Vec<_> = (0..h).map(|_| rows(rng, m, d)).collect();
    (q, k, v)
}

fn to_tensor(t: &[Vec<Vec<f32>>]) -> Tensor3 {
    let dims = [t.len(), t[0].len(), t[0][0].len()];
    Tensor3::from_vec(dims, t.iter().flatten().flatten().copied().collect()).unwrap()
}

#[test]
fn context_matches_naive_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let (h, m, d) = (4, 32, 8);
        let (q, k, v) = random_heads(&mut rng, h, m, d);
        let mut cand: Vec<usize> = (0..m).filter(|_| rng.gen_bool(0.5)).collect();
        if cand.is_empty() {
            cand.push(0);
        }
        let all: Vec<usize> = (0..m).collect();
        for (domain, opt) in [(&cand, SoftmaxDomain::Candidates), (&all, SoftmaxDomain::All)] {
            let got = context_importance(
                &Matrix::from_rows(&q).unwrap(),
                &to_tensor(&k),
                &to_tensor(&v),
                &cand,
                ContextOptions { softmax_domain: opt, ..Default::default() },
            )
            .unwrap();
            let want = oracles::context_scores(&q, &k, &v, domain, &cand);
            for (g, w) in got.scores().iter().zip(&want) {
                assert!(oracles::rel_err(*g as f64, *w) < 1e-5, "{g} vs {w}");
            }
            let pairs: Vec<(usize, f32)> = got.iter().collect();
            for kk in [0, 1, 5, cand.len()] {
                assert_eq!(recover_context_tokens(&got, kk), oracles::highest_pairs(&pairs, kk));
            }
        }
    }
}

#[test]
fn cls_embedding_matches_naive_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let m = 16;
    let values = rows(&mut rng, m + 1, 12);
    let raw: Vec<f64> = (0..=m).map(|_| rng.gen_range(0.01..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let weights: Vec<f32> = raw.iter().map(|w| (w / total) as f32).collect();
    let got = cls_embedding(&weights[1..], weights[0], &Matrix::from_rows(&values).unwrap()).unwrap();
    let w64: Vec<f64> = weights.iter().map(|&w| w as f64).collect();
    let want = oracles::weighted_sum(&w64, &values);
    for (g, w) in got.iter().zip(&want) {
        assert!((*g as f64 - w).abs() < 1e-6);
    }
}

#[test]
fn pearson_matches_two_pass() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a: Vec<f32> = (0..64).map(|_| rng.gen_range(0.0..1.0)).collect();
    let b: Vec<f32> = a.iter().map(|x| x * 0.3 + rng.gen_range(0.0..0.5)).collect();
    let got = attention_correlation(&a, &b, CorrelationMethod::Pearson).unwrap();
    let want = oracles::pearson(
        &a.iter().map(|&x| x as f64).collect::<Vec<_>>(),
        &b.iter().map(|&x| x as f64).collect::<Vec<_>>(),
    );
    assert!((got - want).abs() < 1e-6);
}
