//! Text-guided visual token pruning for pixel-grounding vision-language models.
//!
//! Visual tokens that sit inside the referred object tend to have the *lowest*
//! dot-product similarity to the text encoder's `[EOS]` embedding. The pruning
//! strategies here keep those low-similarity tokens, then fill the rest of the
//! budget with tokens that contribute most to the vision encoder's `[CLS]`
//! token. Alongside the strategies live the comparison baselines, diagnostic
//! analyses over encoder dumps, a prefill cost model and a synthetic dump
//! generator with planted ground truth.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, reports and the
//! command line front end live in the `prunekit` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod analysis;
pub mod context;
pub mod dump;
pub mod efficiency;
pub mod error;
pub mod pruning;
pub mod rng;
pub mod similarity;
pub mod surrogate;
pub mod synth;
pub mod tensor;
mod topk;

pub use dump::{DumpManifest, EncoderDump, TextLabel};
pub use error::{Error, Result, ValidationError};
pub use pruning::{prune, PruneConfig, PruneResult, Strategy};
pub use tensor::{Matrix, Tensor3};
