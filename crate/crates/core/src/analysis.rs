//! Diagnostics over encoder dumps: which tokens cover the referent, where those
//! tokens rank by similarity, how the `[EOS]` token spreads its attention over
//! the text, and how well a pruning result keeps the referent.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dump::{TextLabel, ROW_SUM_TOL};
use crate::error::{Error, Result};
use crate::pruning::PruneResult;
use crate::similarity::rank_tokens;
use crate::tensor::Matrix;

/// Default patch overlap needed for a token to count as part of the referent.
pub const DEFAULT_REF_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefTokenSet {
    pub indices: Vec<usize>,
    pub threshold: f64,
    pub referent_id: usize,
}

/// Tokens whose patch overlaps the mask by at least `threshold`. Cell
/// `(row, col)` of the grid is token `row * G + col`.
pub fn identify_ref_tokens(mask: &Matrix, threshold: f64, referent_id: usize) -> Result<RefTokenSet> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::BadThreshold(threshold));
    }
    let indices = mask
        .as_slice()
        .iter()
        .enumerate()
        .filter(|&(_, &f)| f64::from(f) >= threshold)
        .map(|(j, _)| j)
        .collect();
    Ok(RefTokenSet {
        indices,
        threshold,
        referent_id,
    })
}

/// Histogram of the similarity ranks of referent tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankHistogram {
    pub tokens: usize,
    /// `bins + 1` uniform edges over `[0, tokens)`.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    /// Set when the referent set was empty; the counts are then all zero.
    pub empty_ref: bool,
}

impl RankHistogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Merges a histogram over the same token count and bin layout.
    pub fn accumulate(&mut self, other: &RankHistogram) -> Result<()> {
        if other.tokens != self.tokens || other.counts.len() != self.counts.len() {
            return Err(Error::DimensionMismatch {
                what: "histogram layout",
                expected: self.counts.len(),
                found: other.counts.len(),
            });
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.empty_ref &= other.empty_ref;
        Ok(())
    }
}

/// Bins the rank of each referent token in `scores` (rank 0 = most similar).
/// Rank `r` lands in bin `floor(r * bins / M)`.
pub fn ref_rank_distribution(scores: &[f32], ref_tokens: &RefTokenSet, bins: usize) -> Result<RankHistogram> {
    if bins == 0 {
        return Err(Error::BadBinCount);
    }
    let m = scores.len();
    if let Some(&bad) = ref_tokens.indices.iter().find(|&&j| j >= m) {
        return Err(Error::IndexOutOfRange { index: bad, len: m });
    }
    let ranks = rank_tokens(scores);
    let mut counts = vec![0u64; bins];
    for &j in &ref_tokens.indices {
        counts[ranks[j] * bins / m] += 1;
    }
    let edges = (0..=bins).map(|b| b as f64 * m as f64 / bins as f64).collect();
    Ok(RankHistogram {
        tokens: m,
        edges,
        counts,
        empty_ref: ref_tokens.indices.is_empty(),
    })
}

/// Mean attention mass from `[EOS]` onto each text category.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkStats {
    pub sos: f64,
    pub user: f64,
    pub res: f64,
    pub eos: f64,
    /// Number of texts averaged.
    pub samples: usize,
}

impl SinkStats {
    pub fn category(&self, label: TextLabel) -> Option<f64> {
        match label {
            TextLabel::Sos => Some(self.sos),
            TextLabel::User => Some(self.user),
            TextLabel::Res => Some(self.res),
            TextLabel::Eos => Some(self.eos),
            TextLabel::Pad => None,
        }
    }

    /// Count-weighted merge of two sets of means.
    pub fn merge(&self, other: &SinkStats) -> SinkStats {
        let n = self.samples + other.samples;
        if n == 0 {
            return *self;
        }
        let (a, b) = (self.samples as f64, other.samples as f64);
        let mix = |x: f64, y: f64| (x * a + y * b) / n as f64;
        SinkStats {
            sos: mix(self.sos, other.sos),
            user: mix(self.user, other.user),
            res: mix(self.res, other.res),
            eos: mix(self.eos, other.eos),
            samples: n,
        }
    }
}

/// Attention mass per category `[SOS, USER, RES, EOS]` for one text, PAD excluded.
///
/// If padding positions hold any mass the remaining masses are rescaled so
/// they still sum to one.
pub fn category_masses(row: &[f32], labels: &[TextLabel]) -> [f64; 4] {
    let mut mass = [0.0f64; 4];
    let mut pad = 0.0f64;
    for (&a, &label) in row.iter().zip(labels) {
        match label {
            TextLabel::Pad => pad += f64::from(a),
            other => mass[other as usize] += f64::from(a),
        }
    }
    if pad > 0.0 {
        let kept: f64 = mass.iter().sum();
        if kept > 0.0 {
            mass.iter_mut().for_each(|m| *m /= kept);
        }
    }
    mass
}

/// Averages per-text category masses over all texts.
pub fn attention_sink_stats(rows: &[Vec<f32>], labels: &[Vec<TextLabel>]) -> Result<SinkStats> {
    if rows.len() != labels.len() {
        return Err(Error::LabelLengthMismatch {
            text: rows.len().min(labels.len()),
            row: rows.len(),
            labels: labels.len(),
        });
    }
    let mut total = [0.0f64; 4];
    for (i, (row, lab)) in rows.iter().zip(labels).enumerate() {
        if row.len() != lab.len() {
            return Err(Error::LabelLengthMismatch {
                text: i,
                row: row.len(),
                labels: lab.len(),
            });
        }
        let sum: f64 = row.iter().map(|&a| f64::from(a)).sum();
        if (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::AttentionNotNormalized { sum });
        }
        let mass = category_masses(row, lab);
        for (t, m) in total.iter_mut().zip(mass) {
            *t += m;
        }
    }
    let n = rows.len();
    let mean = |k: usize| if n == 0 { 0.0 } else { total[k] / n as f64 };
    Ok(SinkStats {
        sos: mean(0),
        user: mean(1),
        res: mean(2),
        eos: mean(3),
        samples: n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationMethod {
    #[default]
    Pearson,
    Spearman,
}

/// Correlation between a `[CLS]`-side and an `[EOS]`-side per-token vector.
pub fn attention_correlation(cls: &[f32], eos: &[f32], method: CorrelationMethod) -> Result<f64> {
    if cls.len() != eos.len() {
        return Err(Error::DimensionMismatch {
            what: "correlation operands",
            expected: cls.len(),
            found: eos.len(),
        });
    }
    let a: Vec<f64> = cls.iter().map(|&x| f64::from(x)).collect();
    let b: Vec<f64> = eos.iter().map(|&x| f64::from(x)).collect();
    match method {
        CorrelationMethod::Pearson => pearson(&a, &b),
        CorrelationMethod::Spearman => pearson(&average_ranks(&a), &average_ranks(&b)),
    }
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    if a.is_empty() {
        return Err(Error::ZeroVariance);
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok((sab / libm::sqrt(saa * sbb)).clamp(-1.0, 1.0))
}

/// Fractional ranks, ties sharing the mean of their positions.
fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&i, &j| v[i].partial_cmp(&v[j]).unwrap_or(core::cmp::Ordering::Equal));
    let mut ranks = vec![0.0; v.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && v[order[end]] == v[order[start]] {
            end += 1;
        }
        let r = (start + end - 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = r;
        }
        start = end;
    }
    ranks
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetentionMetrics {
    /// `|retained ∩ REF| / |REF|`.
    pub ref_recall: f64,
    /// `|retained ∩ REF| / |retained|`.
    pub ref_precision: f64,
    pub budget: usize,
    /// Set when the referent or the retained set is empty.
    pub degenerate: bool,
}

pub fn retention_metrics(result: &PruneResult, ref_tokens: &RefTokenSet) -> RetentionMetrics {
    let mut refs = ref_tokens.indices.clone();
    refs.sort_unstable();
    refs.dedup();
    let hits = result
        .retained
        .iter()
        .filter(|j| refs.binary_search(j).is_ok())
        .count();
    let recall = if refs.is_empty() {
        1.0
    } else {
        hits as f64 / refs.len() as f64
    };
    let precision = if result.retained.is_empty() {
        0.0
    } else {
        hits as f64 / result.retained.len() as f64
    };
    RetentionMetrics {
        ref_recall: recall,
        ref_precision: precision,
        budget: result.budget,
        degenerate: refs.is_empty() || result.retained.is_empty(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pruning::Strategy;

    fn grid(g: usize, cells: &[(usize, f32)]) -> Matrix {
        let mut m = Matrix::zeros(g, g);
        for &(j, v) in cells {
            m.as_mut_slice()[j] = v;
        }
        m
    }

    #[test]
    fn ref_tokens_from_mask() {
        let full = Matrix::from_vec(2, 2, vec![1.0; 4]).unwrap();
        assert_eq!(identify_ref_tokens(&full, 0.5, 0).unwrap().indices, vec![0, 1, 2, 3]);
        let single = grid(24, &[(0, 0.6)]);
        assert_eq!(identify_ref_tokens(&single, 0.5, 0).unwrap().indices, vec![0]);
        let exact = grid(2, &[(3, 0.5)]);
        assert_eq!(identify_ref_tokens(&exact, 0.5, 0).unwrap().indices, vec![3]);
        assert_eq!(identify_ref_tokens(&full, 0.0, 0), Err(Error::BadThreshold(0.0)));
        assert_eq!(identify_ref_tokens(&full, 1.5, 0), Err(Error::BadThreshold(1.5)));
    }

    #[test]
    fn lowest_token_lands_in_last_bin() {
        let scores: Vec<f32> = (0..576).map(|j| j as f32).collect();
        let refs = RefTokenSet {
            indices: vec![0],
            threshold: 0.5,
            referent_id: 0,
        };
        let h = ref_rank_distribution(&scores, &refs, 8).unwrap();
        assert_eq!(h.counts, vec![0, 0, 0, 0, 0, 0, 0, 1]);
        assert_eq!(h.edges.len(), 9);
        assert_eq!(h.edges[8], 576.0);
    }

    #[test]
    fn all_tokens_spread_evenly() {
        let scores: Vec<f32> = (0..100).map(|j| (j * 37 % 100) as f32).collect();
        let refs = RefTokenSet {
            indices: (0..100).collect(),
            threshold: 0.5,
            referent_id: 0,
        };
        let h = ref_rank_distribution(&scores, &refs, 7).unwrap();
        assert_eq!(h.total(), 100);
        let (lo, hi) = (h.counts.iter().min().unwrap(), h.counts.iter().max().unwrap());
        assert!(hi - lo <= 1);
    }

    #[test]
    fn empty_ref_is_reported() {
        let refs = RefTokenSet {
            indices: vec![],
            threshold: 0.5,
            referent_id: 0,
        };
        let h = ref_rank_distribution(&[1.0, 2.0], &refs, 2).unwrap();
        assert!(h.empty_ref);
        assert_eq!(h.total(), 0);
        assert_eq!(ref_rank_distribution(&[1.0], &refs, 0), Err(Error::BadBinCount));
    }

    use TextLabel::*;

    #[test]
    fn sink_fixture() {
        let rows = vec![vec![0.68f32, 0.15, 0.14, 0.03]];
        let labels = vec![vec![Sos, User, Res, Eos]];
        let s = attention_sink_stats(&rows, &labels).unwrap();
        assert_eq!(s.sos, f64::from(0.68f32));
        assert_eq!(s.user, f64::from(0.15f32));
        assert_eq!(s.res, f64::from(0.14f32));
        assert_eq!(s.eos, f64::from(0.03f32));
    }

    #[test]
    fn sink_uniform() {
        let s = attention_sink_stats(&[vec![0.25; 4]], &[vec![Sos, User, Res, Eos]]).unwrap();
        assert_eq!([s.sos, s.user, s.res, s.eos], [0.25; 4]);
    }

    #[test]
    fn sink_two_texts() {
        let rows = vec![vec![0.5f32, 0.25, 0.25, 0.0, 0.0], vec![0.75, 0.125, 0.125]];
        let labels = vec![vec![Sos, Res, Res, Eos, Pad], vec![Sos, User, Eos]];
        let s = attention_sink_stats(&rows, &labels).unwrap();
        assert_eq!(s.sos, (0.5 + 0.75) / 2.0);
        assert_eq!(s.user, 0.125 / 2.0);
        assert_eq!(s.res, 0.5 / 2.0);
        assert_eq!(s.eos, 0.125 / 2.0);
        assert_eq!(s.samples, 2);
    }

    #[test]
    fn pad_mass_is_excluded() {
        let m = category_masses(&[0.4, 0.4, 0.2], &[Sos, Res, Pad]);
        assert!((m[0] - 0.5).abs() < 1e-7 && (m[2] - 0.5).abs() < 1e-7);
    }

    #[test]
    fn sink_errors() {
        assert!(matches!(
            attention_sink_stats(&[vec![1.0]], &[vec![Sos, Eos]]),
            Err(Error::LabelLengthMismatch { text: 0, .. })
        ));
        assert!(matches!(
            attention_sink_stats(&[vec![0.5, 0.1]], &[vec![Sos, Eos]]),
            Err(Error::AttentionNotNormalized { .. })
        ));
    }

    #[test]
    fn correlation_extremes() {
        let a = [0.1f32, 0.5, 0.2, 0.9];
        assert!((attention_correlation(&a, &a, CorrelationMethod::Pearson).unwrap() - 1.0).abs() < 1e-12);
        let b: Vec<f32> = a.iter().map(|x| 3.0 - x).collect();
        assert!((attention_correlation(&a, &b, CorrelationMethod::Pearson).unwrap() + 1.0).abs() < 1e-6);
        assert!((attention_correlation(&a, &b, CorrelationMethod::Spearman).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(
            attention_correlation(&[1.0, 1.0], &[0.0, 2.0], CorrelationMethod::Pearson),
            Err(Error::ZeroVariance)
        );
    }

    #[test]
    fn spearman_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![2.5, 0.0, 2.5, 1.0]);
    }

    fn result(retained: Vec<usize>) -> PruneResult {
        PruneResult {
            strategy: Strategy::Adaptive,
            budget: retained.len(),
            similarity_part: retained.clone(),
            retained,
            context_part: vec![],
            per_text_candidates: vec![],
            intersection_size: 0,
            warnings: vec![],
            scores_snapshot: None,
        }
    }

    #[test]
    fn retention() {
        let refs = RefTokenSet {
            indices: vec![1, 2],
            threshold: 0.5,
            referent_id: 0,
        };
        let m = retention_metrics(&result(vec![0, 1, 2, 3]), &refs);
        assert_eq!((m.ref_recall, m.ref_precision), (1.0, 0.5));
        let m = retention_metrics(&result(vec![0, 3]), &refs);
        assert_eq!(m.ref_recall, 0.0);
        let none = RefTokenSet {
            indices: vec![],
            ..refs
        };
        let m = retention_metrics(&result(vec![0]), &none);
        assert!(m.degenerate);
        assert_eq!(m.ref_recall, 1.0);
    }
}
