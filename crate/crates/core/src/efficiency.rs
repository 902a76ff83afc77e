//! Dense prefill cost model for the language model that consumes the kept tokens.
//!
//! For a sequence of `n = visual + text` tokens through `L` layers of hidden
//! size `d` and FFN size `m`:
//!
//! ```text
//! flops    = L * (4 n d^2 + 2 n^2 d + 2 n d m)
//! kv_bytes = 2 * L * n * d * bytes_per_value
//! ```
//!
//! Only ratios between token counts are meaningful; vision and mask decoder
//! costs are not modeled.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmConfig {
    pub layers: u64,
    pub hidden: u64,
    pub ffn: u64,
    /// Text tokens in the prompt, added to every visual count.
    pub text_tokens: u64,
    /// Size of one cached key or value element.
    pub bytes_per_value: u64,
}

impl LmConfig {
    /// A 7B LLaMA-family decoder (32 layers, hidden 4096, FFN 11008) with a
    /// 35-token prompt and fp16 cache.
    pub const fn vicuna_7b() -> Self {
        Self {
            layers: 32,
            hidden: 4096,
            ffn: 11008,
            text_tokens: 35,
            bytes_per_value: 2,
        }
    }
}

impl Default for LmConfig {
    fn default() -> Self {
        Self::vicuna_7b()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopsProfile {
    pub visual_tokens: u64,
    /// Sequence length, visual plus text.
    pub token_count: u64,
    pub total_flops: f64,
    pub kv_cache_bytes: f64,
}

pub fn estimate_prefill_flops(cfg: &LmConfig, visual_tokens: u64) -> FlopsProfile {
    let n = (visual_tokens + cfg.text_tokens) as f64;
    let (l, d, m) = (cfg.layers as f64, cfg.hidden as f64, cfg.ffn as f64);
    FlopsProfile {
        visual_tokens,
        token_count: visual_tokens + cfg.text_tokens,
        total_flops: l * (4.0 * n * d * d + 2.0 * n * n * d + 2.0 * n * d * m),
        kv_cache_bytes: 2.0 * l * n * d * cfg.bytes_per_value as f64,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedupReport {
    pub flops_ratio: f64,
    pub kv_ratio: f64,
}

/// Baseline-over-pruned ratios; both are at least one when the pruned profile
/// has no more tokens than the baseline.
pub fn speedup_report(baseline: &FlopsProfile, pruned: &FlopsProfile) -> SpeedupReport {
    let ratio = |a: f64, b: f64| if a == b { 1.0 } else { a / b };
    SpeedupReport {
        flops_ratio: ratio(baseline.total_flops, pruned.total_flops),
        kv_ratio: ratio(baseline.kv_cache_bytes, pruned.kv_cache_bytes),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_sequence_costs_nothing() {
        let cfg = LmConfig {
            text_tokens: 0,
            ..LmConfig::vicuna_7b()
        };
        let p = estimate_prefill_flops(&cfg, 0);
        assert_eq!(p.total_flops, 0.0);
        assert_eq!(speedup_report(&p, &p).flops_ratio, 1.0);
    }

    #[test]
    fn linear_in_layers() {
        let cfg = LmConfig::vicuna_7b();
        let double = LmConfig {
            layers: 64,
            ..cfg
        };
        let a = estimate_prefill_flops(&cfg, 576);
        let b = estimate_prefill_flops(&double, 576);
        assert_eq!(b.total_flops, 2.0 * a.total_flops);
        assert_eq!(b.kv_cache_bytes, 2.0 * a.kv_cache_bytes);
    }

    #[test]
    fn kv_ratio_is_sequence_ratio() {
        let cfg = LmConfig::vicuna_7b();
        let r = speedup_report(&estimate_prefill_flops(&cfg, 576), &estimate_prefill_flops(&cfg, 192));
        assert!((r.kv_ratio - 611.0 / 227.0).abs() < 1e-12);
        let r64 = speedup_report(&estimate_prefill_flops(&cfg, 576), &estimate_prefill_flops(&cfg, 64));
        assert!(r64.flops_ratio > r.flops_ratio);
    }

    #[test]
    fn identical_profiles() {
        let p = estimate_prefill_flops(&LmConfig::vicuna_7b(), 100);
        assert_eq!(speedup_report(&p, &p), SpeedupReport { flops_ratio: 1.0, kv_ratio: 1.0 });
    }
}
