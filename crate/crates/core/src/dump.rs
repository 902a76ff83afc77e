//! In-memory encoder dump for one image or video frame, plus its invariants.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::ValidationError;
use crate::tensor::{Matrix, Tensor3};

pub const FORMAT_VERSION: u32 = 1;

/// Tolerance on text attention rows summing to one, and on the `[CLS]` row
/// summing to at most one.
pub const ROW_SUM_TOL: f64 = 1e-4;

/// Role of a text position, stored as a `u8` code on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum TextLabel {
    Sos = 0,
    User = 1,
    Res = 2,
    Eos = 3,
    Pad = 4,
}

impl TextLabel {
    pub const ALL: [TextLabel; 5] = [Self::Sos, Self::User, Self::Res, Self::Eos, Self::Pad];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(usize::from(code)).copied()
    }
}

/// Declared shapes of a dump. Field names match the `manifest.json` keys.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct DumpManifest {
    pub format_version: u32,
    /// Visual token count.
    pub M: usize,
    /// Raw visual dimension, absent when no raw embeddings were exported.
    pub d_v: Option<usize>,
    /// Projected embedding dimension shared by image and text.
    pub d_p: usize,
    /// Attention heads.
    pub H: usize,
    /// Per-head dimension.
    pub d_h: usize,
    /// Text count.
    pub N: usize,
    /// Token length of each text.
    pub T_n: Vec<usize>,
    /// Mask grid side.
    pub G: usize,
    /// Referent mask count.
    pub R: usize,
    pub encoder_id: String,
    pub has_surrogates: bool,
}

/// Encoder state needed by every pruning strategy and analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderDump {
    pub manifest: DumpManifest,
    /// `M × d_p` projected visual embeddings.
    pub projected_visual: Matrix,
    /// `M × d_v` pre-projection embeddings.
    pub raw_visual: Option<Matrix>,
    /// `H × d_h` `[CLS]` query per head.
    pub cls_query: Matrix,
    /// `H × M × d_h`.
    pub keys: Tensor3,
    /// `H × M × d_h`.
    pub values: Tensor3,
    /// Head-averaged `[CLS]` attention over the `M` tokens. The mass missing
    /// from one is the `[CLS]` self entry.
    pub cls_attention_row: Vec<f32>,
    /// `N × d_p` `[EOS]` embeddings.
    pub eos_embeddings: Matrix,
    /// Final-layer `[EOS]` attention over each text's positions.
    pub eos_attention_rows: Vec<Vec<f32>>,
    pub text_labels: Vec<Vec<TextLabel>>,
    /// `R` grids of `G × G` patch overlap fractions, row-major.
    pub mask_grids: Vec<Matrix>,
}

impl EncoderDump {
    pub fn tokens(&self) -> usize {
        self.manifest.M
    }

    pub fn texts(&self) -> usize {
        self.manifest.N
    }

    /// Checks every structural invariant of the dump.
    pub fn validate(&self) -> Result<(), ValidationError> {
        let man = &self.manifest;
        if man.format_version != FORMAT_VERSION {
            return Err(ValidationError::UnsupportedVersion(man.format_version));
        }
        if man.T_n.len() != man.N {
            return Err(shape("T_n", &[man.N], &[man.T_n.len()]));
        }
        if man.R > 0 && man.G * man.G != man.M {
            return Err(ValidationError::GridMismatch {
                tokens: man.M,
                grid: man.G,
            });
        }

        check_matrix("projected_visual", &self.projected_visual, [man.M, man.d_p])?;
        match (&self.raw_visual, man.d_v) {
            (Some(raw), Some(d_v)) => check_matrix("raw_visual", raw, [man.M, d_v])?,
            (None, None) => {}
            (Some(raw), None) => return Err(shape("raw_visual", &[], &raw.shape())),
            (None, Some(d_v)) => return Err(shape("raw_visual", &[man.M, d_v], &[])),
        }
        check_matrix("cls_query", &self.cls_query, [man.H, man.d_h])?;
        for (name, t) in [("keys", &self.keys), ("values", &self.values)] {
            let expected = [man.H, man.M, man.d_h];
            if t.dims() != expected {
                return Err(shape(name, &expected, &t.dims()));
            }
            check_finite(name, t.as_slice())?;
        }

        let cls = "cls_attention_row";
        if self.cls_attention_row.len() != man.M {
            return Err(shape(cls, &[man.M], &[self.cls_attention_row.len()]));
        }
        check_finite(cls, &self.cls_attention_row)?;
        check_non_negative(cls, &self.cls_attention_row)?;
        let cls_sum = sum_f64(&self.cls_attention_row);
        if cls_sum > 1.0 + ROW_SUM_TOL {
            return Err(ValidationError::RowNotNormalized {
                array: cls.to_string(),
                sum: cls_sum,
            });
        }

        check_matrix("eos_embeddings", &self.eos_embeddings, [man.N, man.d_p])?;
        if self.eos_attention_rows.len() != man.N {
            return Err(shape("eos_attention_row", &[man.N], &[self.eos_attention_rows.len()]));
        }
        if self.text_labels.len() != man.N {
            return Err(shape("text_labels", &[man.N], &[self.text_labels.len()]));
        }
        for (i, (row, labels)) in self.eos_attention_rows.iter().zip(&self.text_labels).enumerate() {
            let name = format!("eos_attention_row_{i}");
            if row.len() != man.T_n[i] {
                return Err(shape(&name, &[man.T_n[i]], &[row.len()]));
            }
            check_finite(&name, row)?;
            check_non_negative(&name, row)?;
            let sum = sum_f64(row);
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(ValidationError::RowNotNormalized { array: name, sum });
            }
            if labels.len() != man.T_n[i] {
                return Err(shape(&format!("text_labels_{i}"), &[man.T_n[i]], &[labels.len()]));
            }
        }

        if self.mask_grids.len() != man.R {
            return Err(shape("mask_grid", &[man.R], &[self.mask_grids.len()]));
        }
        for (r, grid) in self.mask_grids.iter().enumerate() {
            let name = format!("mask_grid_{r}");
            check_matrix(&name, grid, [man.G, man.G])?;
            if let Some(index) = grid.as_slice().iter().position(|&x| !(0.0..=1.0).contains(&x)) {
                return Err(ValidationError::MaskOutOfRange { array: name, index });
            }
        }
        Ok(())
    }
}

fn shape(array: &str, expected: &[usize], found: &[usize]) -> ValidationError {
    ValidationError::ShapeMismatch {
        array: array.to_string(),
        expected: expected.to_vec(),
        found: found.to_vec(),
    }
}

fn check_matrix(name: &str, m: &Matrix, expected: [usize; 2]) -> Result<(), ValidationError> {
    if m.shape() != expected {
        return Err(shape(name, &expected, &m.shape()));
    }
    check_finite(name, m.as_slice())
}

fn check_finite(name: &str, data: &[f32]) -> Result<(), ValidationError> {
    match data.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(ValidationError::NonFiniteValue {
            array: name.to_string(),
            index,
        }),
        None => Ok(()),
    }
}

fn check_non_negative(name: &str, data: &[f32]) -> Result<(), ValidationError> {
    match data.iter().position(|&x| x < 0.0) {
        Some(index) => Err(ValidationError::NegativeAttention {
            array: name.to_string(),
            index,
        }),
        None => Ok(()),
    }
}

fn sum_f64(data: &[f32]) -> f64 {
    data.iter().map(|&x| f64::from(x)).sum()
}

/// An all-zero dump with uniform attention rows, useful as a template.
pub fn blank_dump(manifest: DumpManifest) -> EncoderDump {
    let m = &manifest;
    let rows = m
        .T_n
        .iter()
        .map(|&t| vec![if t == 0 { 0.0 } else { 1.0 / t as f32 }; t])
        .collect();
    let labels = m.T_n.iter().map(|&t| vec![TextLabel::Res; t]).collect();
    EncoderDump {
        projected_visual: Matrix::zeros(m.M, m.d_p),
        raw_visual: m.d_v.map(|d| Matrix::zeros(m.M, d)),
        cls_query: Matrix::zeros(m.H, m.d_h),
        keys: Tensor3::zeros(m.H, m.M, m.d_h),
        values: Tensor3::zeros(m.H, m.M, m.d_h),
        cls_attention_row: vec![0.0; m.M],
        eos_embeddings: Matrix::zeros(m.N, m.d_p),
        eos_attention_rows: rows,
        text_labels: labels,
        mask_grids: vec![Matrix::zeros(m.G, m.G); m.R],
        manifest,
    }
}
