//! Pruning strategies: adaptive text-guided selection, fixed-ratio ablations and
//! the comparison baselines.
//!
//! The adaptive strategy keeps, for each text, the `B` tokens least similar to
//! its `[EOS]` embedding, intersects those candidate sets across texts, and
//! fills the remaining budget with the non-selected tokens that contribute
//! most to the `[CLS]` query. With a single text there is nothing to
//! intersect, so a fixed share of the budget (`single_text_ratio`) is taken
//! from the low-similarity end instead.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::context::{context_importance, recover_context_tokens, ContextOptions, HeadReduce, SoftmaxDomain};
use crate::dump::EncoderDump;
use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::similarity::{
    select_high_similarity, select_low_similarity, visual_text_cosine, visual_text_similarity,
    SimilarityMatrix,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Adaptive,
    FixedRatio,
    Random,
    ClsTopk,
    HighSimilarity,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Self::Adaptive,
        Self::FixedRatio,
        Self::Random,
        Self::ClsTopk,
        Self::HighSimilarity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Adaptive => "adaptive",
            Self::FixedRatio => "fixed_ratio",
            Self::Random => "random",
            Self::ClsTopk => "cls_topk",
            Self::HighSimilarity => "high_similarity",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.name() == name)
    }
}

impl core::fmt::Display for Strategy {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub budget: usize,
    pub strategy: Strategy,
    /// Share of the budget given to low-similarity tokens (`fixed_ratio` only).
    pub sim_ratio: f64,
    /// Share of the budget given to low-similarity tokens when there is one text.
    pub single_text_ratio: f64,
    /// Seed of the `random` baseline.
    pub seed: u64,
    pub normalize_similarity: bool,
    pub softmax_domain: SoftmaxDomain,
    pub head_reduce: HeadReduce,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            budget: 192,
            strategy: Strategy::Adaptive,
            sim_ratio: 0.5,
            single_text_ratio: 0.5,
            seed: 0,
            normalize_similarity: false,
            softmax_domain: SoftmaxDomain::Candidates,
            head_reduce: HeadReduce::Mean,
        }
    }
}

impl PruneConfig {
    pub fn new(strategy: Strategy, budget: usize) -> Self {
        Self {
            strategy,
            budget,
            ..Self::default()
        }
    }

    pub fn context_options(&self) -> ContextOptions {
        ContextOptions {
            softmax_domain: self.softmax_domain,
            head_reduce: self.head_reduce,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(Error::InvalidBudget);
        }
        for r in [self.sim_ratio, self.single_text_ratio] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::InvalidRatio(r));
            }
        }
        Ok(())
    }
}

/// Non-fatal conditions recorded alongside a result.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PruneWarning {
    /// The budget exceeded the token count; every token was kept.
    BudgetExceedsTokens { budget: usize, tokens: usize },
    /// A single-text strategy ran on a multi-text dump and used text 0.
    UsedFirstText { texts: usize },
}

/// Per-token scores behind a pruning decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoresSnapshot {
    /// One similarity row per text.
    pub similarity: Vec<Vec<f32>>,
    /// `(token, score)` for every context candidate.
    pub context: Vec<(usize, f32)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneResult {
    pub strategy: Strategy,
    pub budget: usize,
    /// Kept tokens, ascending; `min(budget, M)` of them.
    pub retained: Vec<usize>,
    pub similarity_part: Vec<usize>,
    pub context_part: Vec<usize>,
    /// Low-similarity candidate set of each text considered.
    pub per_text_candidates: Vec<Vec<usize>>,
    pub intersection_size: usize,
    pub warnings: Vec<PruneWarning>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub scores_snapshot: Option<ScoresSnapshot>,
}

impl PruneResult {
    pub fn clear_snapshot(mut self) -> Self {
        self.scores_snapshot = None;
        self
    }
}

fn similarity_for(dump: &EncoderDump, cfg: &PruneConfig) -> Result<SimilarityMatrix> {
    if cfg.normalize_similarity {
        visual_text_cosine(&dump.eos_embeddings, &dump.projected_visual)
    } else {
        visual_text_similarity(&dump.eos_embeddings, &dump.projected_visual)
    }
}

/// Round half to even, as used for every fractional quota.
fn quota(ratio: f64, budget: usize) -> usize {
    libm::rint(ratio * budget as f64) as usize
}

struct Budget {
    effective: usize,
    warnings: Vec<PruneWarning>,
}

fn effective_budget(cfg: &PruneConfig, tokens: usize) -> Result<Budget> {
    cfg.validate()?;
    let mut warnings = Vec::new();
    if cfg.budget > tokens {
        warnings.push(PruneWarning::BudgetExceedsTokens {
            budget: cfg.budget,
            tokens,
        });
    }
    Ok(Budget {
        effective: cfg.budget.min(tokens),
        warnings,
    })
}

fn merge_sorted(a: &[usize], b: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    out.extend_from_slice(a);
    out.extend_from_slice(b);
    out.sort_unstable();
    out
}

fn intersect_sorted(a: &[usize], b: &[usize]) -> Vec<usize> {
    let (mut i, mut j) = (0, 0);
    let mut out = Vec::new();
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            core::cmp::Ordering::Less => i += 1,
            core::cmp::Ordering::Greater => j += 1,
            core::cmp::Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out
}

/// Recovered tokens and the `(token, score)` pairs they were chosen from.
type Recovered = (Vec<usize>, Vec<(usize, f32)>);

/// Fills `slots` tokens from outside `selected` by contextual importance.
fn fill_with_context(
    dump: &EncoderDump,
    cfg: &PruneConfig,
    selected: &[usize],
    slots: usize,
) -> Result<Recovered> {
    let m = dump.tokens();
    let mut candidates = Vec::with_capacity(m - selected.len());
    let mut sel = selected.iter().peekable();
    for j in 0..m {
        if sel.peek() == Some(&&j) {
            sel.next();
        } else {
            candidates.push(j);
        }
    }
    if candidates.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    let scores = context_importance(
        &dump.cls_query,
        &dump.keys,
        &dump.values,
        &candidates,
        cfg.context_options(),
    )?;
    let recovered = recover_context_tokens(&scores, slots);
    Ok((recovered, scores.iter().collect()))
}

fn finish(
    cfg: &PruneConfig,
    budget: Budget,
    similarity_part: Vec<usize>,
    context_part: Vec<usize>,
    per_text_candidates: Vec<Vec<usize>>,
    intersection_size: usize,
    snapshot: Option<ScoresSnapshot>,
) -> PruneResult {
    let retained = merge_sorted(&similarity_part, &context_part);
    debug_assert_eq!(retained.len(), budget.effective);
    PruneResult {
        strategy: cfg.strategy,
        budget: cfg.budget,
        retained,
        similarity_part,
        context_part,
        per_text_candidates,
        intersection_size,
        warnings: budget.warnings,
        scores_snapshot: snapshot,
    }
}

/// Adaptive token selection over all texts of the dump.
pub fn prune_adaptive(dump: &EncoderDump, cfg: &PruneConfig) -> Result<PruneResult> {
    if cfg.strategy != Strategy::Adaptive {
        return Err(Error::WrongStrategy(cfg.strategy.name()));
    }
    let budget = effective_budget(cfg, dump.tokens())?;
    if dump.texts() == 0 {
        return Err(Error::NoTexts);
    }
    let b = budget.effective;
    let sim = similarity_for(dump, cfg)?;
    let per_text: Vec<Vec<usize>> = (0..sim.texts())
        .map(|i| select_low_similarity(sim.row(i), b))
        .collect();

    let similarity_part = if per_text.len() == 1 {
        select_low_similarity(sim.row(0), quota(cfg.single_text_ratio, b))
    } else {
        per_text[1..]
            .iter()
            .fold(per_text[0].clone(), |acc, s| intersect_sorted(&acc, s))
    };
    assert!(similarity_part.len() <= b, "intersection cannot exceed the budget");
    let intersection_size = similarity_part.len();

    let (context_part, context_scores) = fill_with_context(dump, cfg, &similarity_part, b - similarity_part.len())?;
    let snapshot = ScoresSnapshot {
        similarity: (0..sim.texts()).map(|i| sim.row(i).to_vec()).collect(),
        context: context_scores,
    };
    Ok(finish(
        cfg,
        budget,
        similarity_part,
        context_part,
        per_text,
        intersection_size,
        Some(snapshot),
    ))
}

/// Fixed split between low-similarity and context tokens, using text 0.
pub fn prune_fixed_ratio(dump: &EncoderDump, cfg: &PruneConfig) -> Result<PruneResult> {
    if cfg.strategy != Strategy::FixedRatio {
        return Err(Error::WrongStrategy(cfg.strategy.name()));
    }
    let mut budget = effective_budget(cfg, dump.tokens())?;
    if dump.texts() == 0 {
        return Err(Error::NoTexts);
    }
    if dump.texts() > 1 {
        budget.warnings.push(PruneWarning::UsedFirstText { texts: dump.texts() });
    }
    let b = budget.effective;
    let sim = similarity_for(dump, cfg)?;
    let row = sim.row(0);
    let similarity_part = select_low_similarity(row, quota(cfg.sim_ratio, b));
    let intersection_size = similarity_part.len();
    let (context_part, context_scores) = fill_with_context(dump, cfg, &similarity_part, b - similarity_part.len())?;
    let snapshot = ScoresSnapshot {
        similarity: vec_of(row),
        context: context_scores,
    };
    Ok(finish(
        cfg,
        budget,
        similarity_part,
        context_part,
        alloc::vec![select_low_similarity(row, b)],
        intersection_size,
        Some(snapshot),
    ))
}

fn vec_of(row: &[f32]) -> Vec<Vec<f32>> {
    alloc::vec![row.to_vec()]
}

/// Comparison baselines: `random`, `cls_topk` and `high_similarity`.
///
/// Baselines that ignore the text report their tokens as `context_part`;
/// `high_similarity` reports them as `similarity_part`.
pub fn prune_baseline(dump: &EncoderDump, cfg: &PruneConfig) -> Result<PruneResult> {
    let budget = effective_budget(cfg, dump.tokens())?;
    let b = budget.effective;
    match cfg.strategy {
        Strategy::Random => {
            let mut picked = CounterRng::new(cfg.seed).partial_shuffle(dump.tokens(), b);
            picked.sort_unstable();
            Ok(finish(cfg, budget, Vec::new(), picked, Vec::new(), 0, None))
        }
        Strategy::ClsTopk => {
            let picked = select_high_similarity(&dump.cls_attention_row, b);
            Ok(finish(cfg, budget, Vec::new(), picked, Vec::new(), 0, None))
        }
        Strategy::HighSimilarity => {
            if dump.texts() == 0 {
                return Err(Error::NoTexts);
            }
            let mut budget = budget;
            if dump.texts() > 1 {
                budget.warnings.push(PruneWarning::UsedFirstText { texts: dump.texts() });
            }
            let sim = similarity_for(dump, cfg)?;
            let picked = select_high_similarity(sim.row(0), b);
            let n = picked.len();
            let snapshot = ScoresSnapshot {
                similarity: vec_of(sim.row(0)),
                context: Vec::new(),
            };
            Ok(finish(
                cfg,
                budget,
                picked.clone(),
                Vec::new(),
                alloc::vec![picked],
                n,
                Some(snapshot),
            ))
        }
        other => Err(Error::WrongStrategy(other.name())),
    }
}

/// Runs whichever strategy `cfg` names.
pub fn prune(dump: &EncoderDump, cfg: &PruneConfig) -> Result<PruneResult> {
    match cfg.strategy {
        Strategy::Adaptive => prune_adaptive(dump, cfg),
        Strategy::FixedRatio => prune_fixed_ratio(dump, cfg),
        Strategy::Random | Strategy::ClsTopk | Strategy::HighSimilarity => prune_baseline(dump, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dump::{blank_dump, DumpManifest};
    use crate::tensor::Matrix;

    fn dump(m: usize, n: usize) -> EncoderDump {
        let man = DumpManifest {
            format_version: 1,
            M: m,
            d_v: None,
            d_p: 2,
            H: 1,
            d_h: 2,
            N: n,
            T_n: alloc::vec![2; n],
            G: 0,
            R: 0,
            encoder_id: "t".into(),
            has_surrogates: false,
        };
        let mut d = blank_dump(man);
        let rows: Vec<[f32; 2]> = (0..m).map(|j| [j as f32, 1.0]).collect();
        d.projected_visual = Matrix::from_rows(&rows).unwrap();
        d.eos_embeddings = Matrix::from_rows(&alloc::vec![[1.0f32, 0.0]; n]).unwrap();
        for j in 0..m {
            d.values.vector_mut(0, j)[0] = (m - j) as f32;
        }
        d
    }

    #[test]
    fn quota_rounds_half_to_even() {
        assert_eq!(quota(0.05, 128), 6);
        assert_eq!(quota(0.5, 64), 32);
        assert_eq!(quota(0.5, 5), 2);
        assert_eq!(quota(0.5, 7), 4);
        assert_eq!(quota(0.0, 9), 0);
        assert_eq!(quota(1.0, 9), 9);
    }

    #[test]
    fn single_text_split() {
        let d = dump(10, 1);
        let r = prune(&d, &PruneConfig::new(Strategy::Adaptive, 4)).unwrap();
        // token scores are j, so the lowest are 0 and 1
        assert_eq!(r.similarity_part, alloc::vec![0, 1]);
        // value norms fall with j, so context prefers 2 and 3
        assert_eq!(r.context_part, alloc::vec![2, 3]);
        assert_eq!(r.retained, alloc::vec![0, 1, 2, 3]);
    }

    #[test]
    fn identical_texts_fill_budget_with_similarity() {
        let d = dump(10, 2);
        let r = prune(&d, &PruneConfig::new(Strategy::Adaptive, 4)).unwrap();
        assert_eq!(r.similarity_part.len(), 4);
        assert!(r.context_part.is_empty());
        assert_eq!(r.intersection_size, 4);
    }

    #[test]
    fn over_budget_keeps_everything() {
        let d = dump(5, 1);
        for s in Strategy::ALL {
            let r = prune(&d, &PruneConfig::new(s, 9)).unwrap();
            assert_eq!(r.retained, alloc::vec![0, 1, 2, 3, 4], "{s}");
            assert!(r
                .warnings
                .contains(&PruneWarning::BudgetExceedsTokens { budget: 9, tokens: 5 }));
        }
    }

    #[test]
    fn invalid_configs() {
        let d = dump(5, 1);
        assert_eq!(
            prune(&d, &PruneConfig::new(Strategy::Adaptive, 0)),
            Err(Error::InvalidBudget)
        );
        let mut cfg = PruneConfig::new(Strategy::FixedRatio, 2);
        cfg.sim_ratio = 1.5;
        assert_eq!(prune(&d, &cfg), Err(Error::InvalidRatio(1.5)));
        let none = dump(5, 0);
        assert_eq!(
            prune(&none, &PruneConfig::new(Strategy::Adaptive, 2)),
            Err(Error::NoTexts)
        );
        assert!(prune(&none, &PruneConfig::new(Strategy::ClsTopk, 2)).is_ok());
        assert_eq!(
            prune_baseline(&d, &PruneConfig::new(Strategy::Adaptive, 2)),
            Err(Error::WrongStrategy("adaptive"))
        );
    }

    #[test]
    fn high_similarity_takes_top() {
        let d = dump(6, 1);
        let r = prune(&d, &PruneConfig::new(Strategy::HighSimilarity, 2)).unwrap();
        assert_eq!(r.retained, alloc::vec![4, 5]);
        assert_eq!(r.similarity_part, r.retained);
    }

    #[test]
    fn random_is_seeded() {
        let d = dump(50, 1);
        let mut cfg = PruneConfig::new(Strategy::Random, 10);
        cfg.seed = 99;
        let a = prune(&d, &cfg).unwrap();
        assert_eq!(a, prune(&d, &cfg).unwrap());
        cfg.seed = 100;
        assert_ne!(a.retained, prune(&d, &cfg).unwrap().retained);
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(Strategy::from_name(s.name()), Some(s));
        }
    }
}
