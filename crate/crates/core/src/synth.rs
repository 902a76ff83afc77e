//! Synthetic encoder dumps with planted ground truth.
//!
//! Text `i` targets referent `i % R`. Its `[EOS]` embedding is one of `N`
//! orthonormal directions, and every visual token's component along that
//! direction is set explicitly, so the planted referent tokens score at least
//! `similarity_gap` below every other token. Context hotspots get the largest
//! `[CLS]` logits and value norms among non-planted tokens in every head.
//!
//! All randomness is drawn from [`CounterRng`] keyed by the spec seed, in a
//! fixed order: text directions, visual tokens, then per head the query, keys
//! and values. The same spec always yields a bit-identical dump.

use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dump::{DumpManifest, EncoderDump, TextLabel, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::similarity::visual_text_similarity;
use crate::tensor::{Matrix, Tensor3};

pub const ENCODER_ID: &str = "synthetic-v1";

/// Text layout of every synthetic text and the `[EOS]` attention it receives.
pub const TEXT_LABELS: [TextLabel; 8] = [
    TextLabel::Sos,
    TextLabel::User,
    TextLabel::User,
    TextLabel::Res,
    TextLabel::Res,
    TextLabel::Res,
    TextLabel::Eos,
    TextLabel::Pad,
];

/// Sink-shaped attention: 0.68 on SOS, 0.15 on USER, 0.14 on RES, 0.03 on EOS.
pub const TEXT_ATTENTION: [f32; 8] = [0.68, 0.075, 0.075, 0.14 / 3.0, 0.14 / 3.0, 0.14 / 3.0, 0.03, 0.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    /// Grid side `G`; the dump has `G * G` tokens.
    pub grid_side: usize,
    pub proj_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub texts: usize,
    /// Planted token set of each referent.
    pub planted_ref: Vec<Vec<usize>>,
    /// Minimum score distance between planted and other tokens.
    pub similarity_gap: f64,
    pub context_hotspots: Vec<usize>,
    pub seed: u64,
}

impl SynthSpec {
    /// One text and one referent with modest dimensions; hotspots are the 16
    /// highest non-planted indices.
    pub fn new(grid_side: usize, planted: Vec<usize>, seed: u64) -> Self {
        let tokens = grid_side * grid_side;
        let hotspots = default_hotspots(tokens, core::slice::from_ref(&planted), 16);
        Self {
            grid_side,
            proj_dim: 64,
            heads: 4,
            head_dim: 16,
            texts: 1,
            planted_ref: vec![planted],
            similarity_gap: 0.5,
            context_hotspots: hotspots,
            seed,
        }
    }

    pub fn tokens(&self) -> usize {
        self.grid_side * self.grid_side
    }

    fn check(&self) -> Result<()> {
        let m = self.tokens();
        let fail = |msg: &str| Err(Error::InfeasibleSpec(msg.to_string()));
        if m == 0 || self.proj_dim == 0 || self.heads == 0 || self.head_dim == 0 {
            return fail("all dimensions must be positive");
        }
        if self.texts == 0 {
            return fail("need at least one text");
        }
        if self.texts > self.proj_dim {
            return fail("more texts than embedding dimensions");
        }
        if self.planted_ref.is_empty() {
            return fail("need at least one referent");
        }
        if !(self.similarity_gap > 0.0 && self.similarity_gap.is_finite()) {
            return fail("similarity gap must be positive");
        }
        for (r, set) in self.planted_ref.iter().enumerate() {
            if let Some(&j) = set.iter().find(|&&j| j >= m) {
                return Err(Error::InfeasibleSpec(format!("referent {r} token {j} out of range")));
            }
            if distinct(set) >= m {
                return Err(Error::InfeasibleSpec(format!("referent {r} covers every token")));
            }
        }
        for &j in &self.context_hotspots {
            if j >= m {
                return Err(Error::InfeasibleSpec(format!("hotspot {j} out of range")));
            }
            if self.planted_ref.iter().any(|s| s.contains(&j)) {
                return Err(Error::InfeasibleSpec(format!("hotspot {j} is planted")));
            }
        }
        Ok(())
    }
}

fn distinct(set: &[usize]) -> usize {
    let mut s = set.to_vec();
    s.sort_unstable();
    s.dedup();
    s.len()
}

/// The `count` highest indices below `tokens` that are in no planted set.
pub fn default_hotspots(tokens: usize, planted: &[Vec<usize>], count: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..tokens)
        .rev()
        .filter(|j| !planted.iter().any(|s| s.contains(j)))
        .take(count)
        .collect();
    out.sort_unstable();
    out
}

/// `min(other scores) - max(planted scores)` for one similarity row, or `None`
/// when either side is empty.
pub fn planted_gap(scores: &[f32], planted: &[usize]) -> Option<f64> {
    let mut is_planted = vec![false; scores.len()];
    for &j in planted {
        is_planted[j] = true;
    }
    let mut max_planted = f64::NEG_INFINITY;
    let mut min_other = f64::INFINITY;
    for (j, &s) in scores.iter().enumerate() {
        if is_planted[j] {
            max_planted = max_planted.max(f64::from(s));
        } else {
            min_other = min_other.min(f64::from(s));
        }
    }
    (max_planted.is_finite() && min_other.is_finite()).then_some(min_other - max_planted)
}

fn gaussian(rng: &mut CounterRng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.normal() * scale).collect()
}

fn dot64(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm64(a: &[f64]) -> f64 {
    libm::sqrt(dot64(a, a))
}

/// Removes from `v` its components along each unit vector in `basis`.
fn reject(v: &mut [f64], basis: &[Vec<f64>]) {
    for u in basis {
        let c = dot64(v, u);
        for (x, y) in v.iter_mut().zip(u) {
            *x -= c * y;
        }
    }
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

#[allow(clippy::needless_range_loop)]
pub fn generate_synthetic_dump(spec: &SynthSpec) -> Result<EncoderDump> {
    spec.check()?;
    let m = spec.tokens();
    let (n, d_p, heads, d_h) = (spec.texts, spec.proj_dim, spec.heads, spec.head_dim);
    let r_count = spec.planted_ref.len();
    let mut rng = CounterRng::new(spec.seed);

    let mut planted_any = vec![false; m];
    let mut planted_by_ref = vec![vec![false; m]; r_count];
    for (r, set) in spec.planted_ref.iter().enumerate() {
        for &j in set {
            planted_by_ref[r][j] = true;
            planted_any[j] = true;
        }
    }
    let mut hotspot = vec![false; m];
    for &j in &spec.context_hotspots {
        hotspot[j] = true;
    }

    // Orthonormal text directions by Gram-Schmidt.
    let mut directions: Vec<Vec<f64>> = Vec::with_capacity(n);
    while directions.len() < n {
        let mut v = gaussian(&mut rng, d_p, 1.0);
        reject(&mut v, &directions);
        let len = norm64(&v);
        if len < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= len);
        directions.push(v);
    }

    // Visual tokens: isotropic base with the text-aligned components replaced.
    let half_gap = spec.similarity_gap / 2.0;
    let margin = 0.05 * spec.similarity_gap + 1e-3;
    let mut visual = Vec::with_capacity(m * d_p);
    let base_scale = 1.0 / libm::sqrt(d_p as f64);
    for j in 0..m {
        let mut x = gaussian(&mut rng, d_p, base_scale);
        reject(&mut x, &directions);
        for (i, u) in directions.iter().enumerate() {
            let jitter = rng.unit_f64();
            let target = if planted_by_ref[i % r_count][j] {
                -half_gap - margin - jitter
            } else {
                half_gap + margin + jitter
            };
            for (a, b) in x.iter_mut().zip(u) {
                *a += target * b;
            }
        }
        visual.extend(to_f32(&x));
    }
    let projected_visual = Matrix::from_vec(m, d_p, visual)?;
    let eos_rows: Vec<Vec<f32>> = directions.iter().map(|u| to_f32(u)).collect();
    let eos_embeddings = Matrix::from_rows(&eos_rows)?;

    // Heads: the logit of token j is its key's component along the unit query.
    let mut cls_query = Matrix::zeros(heads, d_h);
    let mut keys = Tensor3::zeros(heads, m, d_h);
    let mut values = Tensor3::zeros(heads, m, d_h);
    let mut cls_attention = vec![0.0f64; m];
    for h in 0..heads {
        let mut q = gaussian(&mut rng, d_h, 1.0);
        let len = norm64(&q).max(1e-12);
        q.iter_mut().for_each(|x| *x /= len);
        let unit = vec![q.clone()];
        let scale = libm::sqrt(d_h as f64);
        let query: Vec<f64> = q.iter().map(|x| x * scale).collect();
        cls_query.row_mut(h).copy_from_slice(&to_f32(&query));

        let mut logits = Vec::with_capacity(m);
        for j in 0..m {
            let u = rng.unit_f64();
            let (logit, norm) = if hotspot[j] {
                (3.0 + 0.5 * u, 3.0 + 0.5 * u)
            } else if planted_any[j] {
                (-2.0 + 0.5 * u, 0.5 + 0.25 * u)
            } else {
                (u, 1.0 + 0.5 * u)
            };
            let mut k = gaussian(&mut rng, d_h, 0.1);
            reject(&mut k, &unit);
            for (a, b) in k.iter_mut().zip(&q) {
                *a += logit * b;
            }
            keys.vector_mut(h, j).copy_from_slice(&to_f32(&k));

            let mut v = gaussian(&mut rng, d_h, 1.0);
            let vlen = norm64(&v).max(1e-12);
            v.iter_mut().for_each(|x| *x *= norm / vlen);
            values.vector_mut(h, j).copy_from_slice(&to_f32(&v));
            logits.push(logit);
        }

        // Head attention over [CLS] (logit 0) and the tokens.
        let max = logits.iter().copied().fold(0.0f64, f64::max);
        let self_term = libm::exp(-max);
        let exps: Vec<f64> = logits.iter().map(|&l| libm::exp(l - max)).collect();
        let total = self_term + exps.iter().sum::<f64>();
        for (acc, e) in cls_attention.iter_mut().zip(exps) {
            *acc += e / total / heads as f64;
        }
    }

    let mask_grids = spec
        .planted_ref
        .iter()
        .map(|set| {
            let mut g = Matrix::zeros(spec.grid_side, spec.grid_side);
            for &j in set {
                g.as_mut_slice()[j] = 1.0;
            }
            g
        })
        .collect();

    let manifest = DumpManifest {
        format_version: FORMAT_VERSION,
        M: m,
        d_v: None,
        d_p,
        H: heads,
        d_h,
        N: n,
        T_n: vec![TEXT_LABELS.len(); n],
        G: spec.grid_side,
        R: r_count,
        encoder_id: ENCODER_ID.to_string(),
        has_surrogates: false,
    };
    let dump = EncoderDump {
        manifest,
        projected_visual,
        raw_visual: None,
        cls_query,
        keys,
        values,
        cls_attention_row: cls_attention.into_iter().map(|x| x as f32).collect(),
        eos_embeddings,
        eos_attention_rows: vec![TEXT_ATTENTION.to_vec(); n],
        text_labels: vec![TEXT_LABELS.to_vec(); n],
        mask_grids,
    };
    dump.validate()?;

    // The construction is checked, not trusted.
    let sim = visual_text_similarity(&dump.eos_embeddings, &dump.projected_visual)?;
    for i in 0..n {
        if let Some(gap) = planted_gap(sim.row(i), &spec.planted_ref[i % r_count]) {
            if gap < spec.similarity_gap {
                return Err(Error::InfeasibleSpec(format!(
                    "text {i} gap {gap} below requested {}",
                    spec.similarity_gap
                )));
            }
        }
    }
    Ok(dump)
}

/// Shape of an unstructured random dump.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RandomShape {
    pub tokens: usize,
    pub proj_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub texts: usize,
    /// Round embeddings to a coarse lattice so that score ties are common.
    pub quantized: bool,
}

/// A valid dump with no planted structure: Gaussian embeddings, keys and
/// values, random text lengths and labels, and one random fractional mask
/// when the token count is a perfect square.
pub fn random_dump(shape: &RandomShape, seed: u64) -> Result<EncoderDump> {
    let RandomShape {
        tokens: m,
        proj_dim: d_p,
        heads,
        head_dim: d_h,
        texts: n,
        quantized,
    } = *shape;
    let mut rng = CounterRng::new(seed);
    let draw = |count: usize, rng: &mut CounterRng| -> Vec<f32> {
        (0..count)
            .map(|_| {
                let x = rng.normal();
                if quantized {
                    (libm::round(x * 2.0) / 2.0) as f32
                } else {
                    x as f32
                }
            })
            .collect()
    };
    let projected_visual = Matrix::from_vec(m, d_p, draw(m * d_p, &mut rng))?;
    let eos_embeddings = Matrix::from_vec(n, d_p, draw(n * d_p, &mut rng))?;
    let cls_query = Matrix::from_vec(heads, d_h, draw(heads * d_h, &mut rng))?;
    let keys = Tensor3::from_vec([heads, m, d_h], draw(heads * m * d_h, &mut rng))?;
    let values = Tensor3::from_vec([heads, m, d_h], draw(heads * m * d_h, &mut rng))?;

    let raw: Vec<f64> = (0..m).map(|_| rng.unit_f64() + 1e-3).collect();
    let total: f64 = raw.iter().sum::<f64>() / 0.9;
    let cls_attention_row = raw.iter().map(|x| (x / total) as f32).collect();

    let mut lengths = Vec::with_capacity(n);
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let t = 1 + rng.below(12) as usize;
        let lab: Vec<TextLabel> = (0..t)
            .map(|_| TextLabel::ALL[rng.below(5) as usize])
            .collect();
        let w: Vec<f64> = (0..t).map(|_| rng.unit_f64() + 1e-3).collect();
        let sum: f64 = w.iter().sum();
        rows.push(w.iter().map(|x| (x / sum) as f32).collect());
        labels.push(lab);
        lengths.push(t);
    }

    let g = libm::sqrt(m as f64) as usize;
    let (grid, masks) = if g * g == m && m > 0 {
        let cells = (0..m).map(|_| rng.unit_f64() as f32).collect();
        (g, vec![Matrix::from_vec(g, g, cells)?])
    } else {
        (0, Vec::new())
    };

    let dump = EncoderDump {
        manifest: DumpManifest {
            format_version: FORMAT_VERSION,
            M: m,
            d_v: None,
            d_p,
            H: heads,
            d_h,
            N: n,
            T_n: lengths,
            G: grid,
            R: masks.len(),
            encoder_id: "random".to_string(),
            has_surrogates: false,
        },
        projected_visual,
        raw_visual: None,
        cls_query,
        keys,
        values,
        cls_attention_row,
        eos_embeddings,
        eos_attention_rows: rows,
        text_labels: labels,
        mask_grids: masks,
    };
    dump.validate()?;
    Ok(dump)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::similarity::select_low_similarity;

    #[test]
    fn planted_tokens_are_lowest() {
        let spec = SynthSpec::new(24, (0..32).collect(), 11);
        let d = generate_synthetic_dump(&spec).unwrap();
        let sim = visual_text_similarity(&d.eos_embeddings, &d.projected_visual).unwrap();
        assert_eq!(select_low_similarity(sim.row(0), 32), (0..32).collect::<Vec<_>>());
        assert!(planted_gap(sim.row(0), &spec.planted_ref[0]).unwrap() >= spec.similarity_gap);
    }

    #[test]
    fn deterministic() {
        let spec = SynthSpec::new(4, vec![1, 2], 5);
        assert_eq!(generate_synthetic_dump(&spec).unwrap(), generate_synthetic_dump(&spec).unwrap());
        let other = SynthSpec { seed: 6, ..spec.clone() };
        assert_ne!(
            generate_synthetic_dump(&spec).unwrap().projected_visual,
            generate_synthetic_dump(&other).unwrap().projected_visual
        );
    }

    #[test]
    fn infeasible_specs() {
        let all = SynthSpec::new(2, vec![0, 1, 2, 3], 0);
        assert!(matches!(generate_synthetic_dump(&all), Err(Error::InfeasibleSpec(_))));
        let mut clash = SynthSpec::new(3, vec![0, 1], 0);
        clash.context_hotspots = vec![1];
        assert!(matches!(generate_synthetic_dump(&clash), Err(Error::InfeasibleSpec(_))));
        let mut zero_gap = SynthSpec::new(3, vec![0], 0);
        zero_gap.similarity_gap = 0.0;
        assert!(generate_synthetic_dump(&zero_gap).is_err());
        let mut wide = SynthSpec::new(3, vec![0], 0);
        wide.proj_dim = 2;
        wide.texts = 3;
        assert!(generate_synthetic_dump(&wide).is_err());
    }

    #[test]
    fn random_dumps_validate() {
        for (seed, quantized) in [(1, false), (2, true)] {
            let shape = RandomShape {
                tokens: 16,
                proj_dim: 8,
                heads: 2,
                head_dim: 4,
                texts: 3,
                quantized,
            };
            let d = random_dump(&shape, seed).unwrap();
            assert_eq!(d.manifest.R, 1);
            assert_eq!(d, random_dump(&shape, seed).unwrap());
        }
    }

    #[test]
    fn hotspot_default_skips_planted() {
        assert_eq!(default_hotspots(6, &[vec![5, 3]], 2), vec![2, 4]);
    }

    #[test]
    fn fixture_attention_sums_to_one() {
        let s: f64 = TEXT_ATTENTION.iter().map(|&x| f64::from(x)).sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
}
