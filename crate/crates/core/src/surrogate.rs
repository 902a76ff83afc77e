//! Stand-ins for `[CLS]` and `[EOS]` on encoders that have neither.

use alloc::vec;
use alloc::vec::Vec;

use crate::dump::ROW_SUM_TOL;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateGlobals {
    /// Token receiving the highest mean attention from all tokens.
    pub cls_index: usize,
    /// Mean of all text token embeddings.
    pub eos_surrogate: Vec<f32>,
}

/// Picks the `[CLS]` surrogate from a row-stochastic `M × M` attention matrix
/// (ties go to the lower index) and averages text token embeddings into an
/// `[EOS]` surrogate.
pub fn compute_surrogate_globals(attention: &Matrix, text_tokens: &Matrix) -> Result<SurrogateGlobals> {
    if attention.rows() != attention.cols() {
        return Err(Error::DimensionMismatch {
            what: "token attention columns",
            expected: attention.rows(),
            found: attention.cols(),
        });
    }
    if text_tokens.rows() == 0 {
        return Err(Error::EmptyTextSequence);
    }
    let m = attention.rows();
    let mut column_mass = vec![0.0f64; m];
    for row in attention.iter_rows() {
        let sum: f64 = row.iter().map(|&a| f64::from(a)).sum();
        if (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::AttentionNotNormalized { sum });
        }
        for (c, &a) in column_mass.iter_mut().zip(row) {
            *c += f64::from(a);
        }
    }
    let mut cls_index = 0;
    for j in 1..m {
        if column_mass[j] > column_mass[cls_index] {
            cls_index = j;
        }
    }

    let t = text_tokens.rows() as f64;
    let mut mean = vec![0.0f64; text_tokens.cols()];
    for row in text_tokens.iter_rows() {
        for (acc, &x) in mean.iter_mut().zip(row) {
            *acc += f64::from(x);
        }
    }
    Ok(SurrogateGlobals {
        cls_index,
        eos_surrogate: mean.into_iter().map(|x| (x / t) as f32).collect(),
    })
}
