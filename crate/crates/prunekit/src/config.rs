//! Run configuration. Every setting resolves as command-line flag, then TOML
//! file, then built-in default.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use prunekit_core::analysis::DEFAULT_REF_THRESHOLD;
use prunekit_core::context::{HeadReduce, SoftmaxDomain};
use prunekit_core::efficiency::LmConfig;
use prunekit_core::pruning::{PruneConfig, Strategy};
use serde::{Deserialize, Serialize};

pub const DEFAULT_BINS: usize = 10;
pub const DEFAULT_FLOPS_BUDGETS: [usize; 4] = [576, 192, 128, 64];

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError::Invalid(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
    Svg,
}

/// A strategy name, optionally carrying its own similarity ratio, written
/// `fixed_ratio:0.25`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StrategySpec {
    pub strategy: Strategy,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sim_ratio: Option<f64>,
}

impl StrategySpec {
    pub fn label(&self) -> String {
        self.to_string()
    }

    /// `base` with this strategy and, when given, its ratio.
    pub fn apply(&self, base: &PruneConfig) -> PruneConfig {
        let mut cfg = base.clone();
        cfg.strategy = self.strategy;
        if let Some(r) = self.sim_ratio {
            cfg.sim_ratio = r;
        }
        cfg
    }
}

impl fmt::Display for StrategySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.sim_ratio {
            Some(r) => write!(f, "{}:{}", self.strategy, r),
            None => f.write_str(self.strategy.name()),
        }
    }
}

impl FromStr for StrategySpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (name, ratio) = match s.split_once(':') {
            Some((n, r)) => (n, Some(r)),
            None => (s, None),
        };
        let strategy = Strategy::from_name(name.trim()).ok_or_else(|| {
            let known: Vec<&str> = Strategy::ALL.iter().map(|s| s.name()).collect();
            format!("unknown strategy '{name}' (expected one of {})", known.join(", "))
        })?;
        let sim_ratio = match ratio {
            None => None,
            Some(r) => {
                if strategy != Strategy::FixedRatio {
                    return Err(format!("only fixed_ratio takes a ratio, got '{s}'"));
                }
                let v: f64 = r.trim().parse().map_err(|_| format!("bad ratio in '{s}'"))?;
                if !(0.0..=1.0).contains(&v) {
                    return Err(format!("ratio in '{s}' must lie in [0, 1]"));
                }
                Some(v)
            }
        };
        Ok(Self { strategy, sim_ratio })
    }
}

impl<'de> Deserialize<'de> for StrategySpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// `[lm]` table of the config file.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmFile {
    pub layers: Option<u64>,
    pub hidden: Option<u64>,
    pub ffn: Option<u64>,
    pub text_tokens: Option<u64>,
    pub bytes_per_value: Option<u64>,
}

/// Contents of a `--config` TOML file. Every key is optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub strategy: Option<StrategySpec>,
    pub strategies: Option<Vec<StrategySpec>>,
    pub budget: Option<usize>,
    pub budgets: Option<Vec<usize>>,
    pub sim_ratio: Option<f64>,
    pub single_text_ratio: Option<f64>,
    pub threshold: Option<f64>,
    pub bins: Option<usize>,
    pub seed: Option<u64>,
    pub normalize_similarity: Option<bool>,
    pub softmax_domain: Option<SoftmaxDomain>,
    pub head_reduce: Option<HeadReduce>,
    pub out: Option<PathBuf>,
    pub format: Option<Vec<Format>>,
    pub jobs: Option<usize>,
    pub lm: Option<LmFile>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        toml::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Settings given on the command line; `None` means not given.
#[derive(Debug, Clone, Default)]
pub struct FlagConfig {
    pub strategies: Vec<StrategySpec>,
    pub budget: Option<usize>,
    pub budgets: Vec<usize>,
    pub sim_ratio: Option<f64>,
    pub single_text_ratio: Option<f64>,
    pub threshold: Option<f64>,
    pub bins: Option<usize>,
    pub seed: Option<u64>,
    pub normalize_similarity: Option<bool>,
    pub softmax_domain: Option<SoftmaxDomain>,
    pub head_reduce: Option<HeadReduce>,
    pub out: Option<PathBuf>,
    pub formats: Vec<Format>,
    pub jobs: Option<usize>,
    pub lm: LmFile,
}

/// Fully resolved settings. The serialized form is what reports echo; it
/// leaves out the output directory and worker count, which never change a
/// result.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub prune: PruneConfig,
    pub strategies: Vec<StrategySpec>,
    pub budgets: Vec<usize>,
    pub threshold: f64,
    pub bins: usize,
    pub formats: Vec<Format>,
    pub lm: LmConfig,
    #[serde(skip)]
    pub out: Option<PathBuf>,
    #[serde(skip)]
    pub jobs: usize,
}

impl RunConfig {
    pub fn resolve(flags: FlagConfig, file: FileConfig) -> Result<Self, ConfigError> {
        let defaults = PruneConfig::default();

        let strategies = if !flags.strategies.is_empty() {
            flags.strategies
        } else if let Some(list) = file.strategies {
            list
        } else if let Some(s) = file.strategy {
            vec![s]
        } else {
            vec![StrategySpec {
                strategy: defaults.strategy,
                sim_ratio: None,
            }]
        };

        let budget = flags.budget.or(file.budget).unwrap_or(defaults.budget);
        let budgets = if !flags.budgets.is_empty() {
            flags.budgets
        } else {
            file.budgets.unwrap_or_default()
        };

        let mut prune = PruneConfig {
            budget,
            strategy: strategies[0].strategy,
            sim_ratio: flags.sim_ratio.or(file.sim_ratio).unwrap_or(defaults.sim_ratio),
            single_text_ratio: flags
                .single_text_ratio
                .or(file.single_text_ratio)
                .unwrap_or(defaults.single_text_ratio),
            seed: flags.seed.or(file.seed).unwrap_or(defaults.seed),
            normalize_similarity: flags
                .normalize_similarity
                .or(file.normalize_similarity)
                .unwrap_or(defaults.normalize_similarity),
            softmax_domain: flags.softmax_domain.or(file.softmax_domain).unwrap_or_default(),
            head_reduce: flags.head_reduce.or(file.head_reduce).unwrap_or_default(),
        };
        if let Some(r) = strategies[0].sim_ratio {
            prune.sim_ratio = r;
        }
        if prune.budget == 0 {
            return invalid("budget must be at least 1");
        }
        for (name, r) in [("sim_ratio", prune.sim_ratio), ("single_text_ratio", prune.single_text_ratio)] {
            if !(0.0..=1.0).contains(&r) {
                return invalid(format!("{name} must lie in [0, 1], got {r}"));
            }
        }
        if budgets.contains(&0) {
            return invalid("budgets must all be at least 1");
        }

        let threshold = flags.threshold.or(file.threshold).unwrap_or(DEFAULT_REF_THRESHOLD);
        if !(threshold > 0.0 && threshold <= 1.0) {
            return invalid(format!("threshold must lie in (0, 1], got {threshold}"));
        }
        let bins = flags.bins.or(file.bins).unwrap_or(DEFAULT_BINS);
        if bins == 0 {
            return invalid("bins must be at least 1");
        }

        let mut formats = if !flags.formats.is_empty() {
            flags.formats
        } else {
            file.format.unwrap_or_else(|| vec![Format::Json])
        };
        let mut seen = Vec::new();
        formats.retain(|f| {
            let new = !seen.contains(f);
            seen.push(*f);
            new
        });

        let lm_file = file.lm.unwrap_or_default();
        let base = LmConfig::default();
        let lm = LmConfig {
            layers: flags.lm.layers.or(lm_file.layers).unwrap_or(base.layers),
            hidden: flags.lm.hidden.or(lm_file.hidden).unwrap_or(base.hidden),
            ffn: flags.lm.ffn.or(lm_file.ffn).unwrap_or(base.ffn),
            text_tokens: flags.lm.text_tokens.or(lm_file.text_tokens).unwrap_or(base.text_tokens),
            bytes_per_value: flags
                .lm
                .bytes_per_value
                .or(lm_file.bytes_per_value)
                .unwrap_or(base.bytes_per_value),
        };

        Ok(Self {
            prune,
            strategies,
            budgets,
            threshold,
            bins,
            formats,
            lm,
            out: flags.out.or(file.out),
            jobs: flags.jobs.or(file.jobs).unwrap_or(0),
        })
    }

    pub fn wants(&self, f: Format) -> bool {
        self.formats.contains(&f)
    }
}

/// Parses `a..b` (inclusive), a single index, or a comma list of those.
pub fn parse_index_set(s: &str) -> Result<Vec<usize>, String> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((a, b)) = part.split_once("..") {
            let b = b.strip_prefix('=').unwrap_or(b);
            let lo: usize = a.trim().parse().map_err(|_| format!("bad range start in '{part}'"))?;
            let hi: usize = b.trim().parse().map_err(|_| format!("bad range end in '{part}'"))?;
            if hi < lo {
                return Err(format!("empty range '{part}'"));
            }
            out.extend(lo..=hi);
        } else {
            out.push(part.parse().map_err(|_| format!("bad index '{part}'"))?);
        }
    }
    if out.is_empty() {
        return Err("empty index set".to_string());
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_beat_file_beat_defaults() {
        let file: FileConfig = toml::from_str(
            r#"
            budget = 64
            seed = 9
            softmax_domain = "all"
            format = ["csv"]
            [lm]
            text_tokens = 40
            "#,
        )
        .unwrap();
        let flags = FlagConfig {
            budget: Some(81),
            ..Default::default()
        };
        let cfg = RunConfig::resolve(flags, file).unwrap();
        assert_eq!(cfg.prune.budget, 81);
        assert_eq!(cfg.prune.seed, 9);
        assert_eq!(cfg.prune.softmax_domain, SoftmaxDomain::All);
        assert_eq!(cfg.prune.head_reduce, HeadReduce::Mean);
        assert_eq!(cfg.formats, vec![Format::Csv]);
        assert_eq!(cfg.lm.text_tokens, 40);
        assert_eq!(cfg.lm.layers, 32);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<FileConfig>("budgett = 3").is_err());
    }

    #[test]
    fn zero_budget_is_invalid() {
        let flags = FlagConfig {
            budget: Some(0),
            ..Default::default()
        };
        assert!(RunConfig::resolve(flags, FileConfig::default()).is_err());
    }

    #[test]
    fn strategy_specs() {
        let s: StrategySpec = "fixed_ratio:0.25".parse().unwrap();
        assert_eq!(s.strategy, Strategy::FixedRatio);
        assert_eq!(s.sim_ratio, Some(0.25));
        assert_eq!(s.label(), "fixed_ratio:0.25");
        assert!("adaptive:0.3".parse::<StrategySpec>().is_err());
        assert!("greedy".parse::<StrategySpec>().is_err());
    }

    #[test]
    fn index_sets() {
        assert_eq!(parse_index_set("0..3").unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(parse_index_set("5, 1..=2").unwrap(), vec![1, 2, 5]);
        assert!(parse_index_set("4..2").is_err());
        assert!(parse_index_set("").is_err());
    }
}
