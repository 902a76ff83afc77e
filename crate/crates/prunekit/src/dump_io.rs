//! Directory format for encoder dumps: `manifest.json` plus one NPY v1.0 file
//! per array.
//!
//! ```text
//! manifest.json
//! projected_visual.npy        M × d_p   <f4
//! raw_visual.npy              M × d_v   <f4   (only when d_v is set)
//! cls_query.npy               H × d_h   <f4
//! keys.npy, values.npy        H × M × d_h
//! cls_attention_row.npy       M
//! eos_embeddings.npy          N × d_p
//! eos_attention_row_{i}.npy   T_n[i]
//! text_labels_{i}.npy         T_n[i]    |u1   (0 SOS, 1 USER, 2 RES, 3 EOS, 4 PAD)
//! mask_grid_{r}.npy           G × G
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use prunekit_core::dump::{DumpManifest, EncoderDump, TextLabel, FORMAT_VERSION};
use prunekit_core::error::ValidationError;
use prunekit_core::tensor::{Matrix, Tensor3};

use crate::npy::{self, NpyArray, NpyError};

pub use prunekit_core::surrogate::{compute_surrogate_globals, SurrogateGlobals};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, thiserror::Error)]
pub enum DumpIoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid manifest: {source}")]
    Manifest {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("missing array {0}")]
    MissingArray(String),
    #[error("array {array}: {source}")]
    Npy {
        array: String,
        #[source]
        source: NpyError,
    },
    #[error(transparent)]
    Validation(#[from] ValidationError),
}

impl DumpIoError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, DumpIoError>;

fn npy_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.npy"))
}

fn open_array<T>(dir: &Path, name: &str, read: fn(&Path) -> std::result::Result<NpyArray<T>, NpyError>) -> Result<NpyArray<T>> {
    let path = npy_path(dir, name);
    if !path.is_file() {
        return Err(DumpIoError::MissingArray(name.to_string()));
    }
    read(&path).map_err(|source| DumpIoError::Npy {
        array: name.to_string(),
        source,
    })
}

fn expect_shape<T>(name: &str, arr: &NpyArray<T>, expected: &[usize]) -> Result<()> {
    if arr.shape != expected {
        return Err(ValidationError::ShapeMismatch {
            array: name.to_string(),
            expected: expected.to_vec(),
            found: arr.shape.clone(),
        }
        .into());
    }
    Ok(())
}

fn load_f32(dir: &Path, name: &str, expected: &[usize]) -> Result<Vec<f32>> {
    let arr = open_array(dir, name, npy::read_f32)?;
    expect_shape(name, &arr, expected)?;
    Ok(arr.data)
}

fn load_matrix(dir: &Path, name: &str, rows: usize, cols: usize) -> Result<Matrix> {
    let data = load_f32(dir, name, &[rows, cols])?;
    Ok(Matrix::from_vec(rows, cols, data).expect("shape checked"))
}

fn load_tensor(dir: &Path, name: &str, dims: [usize; 3]) -> Result<Tensor3> {
    let data = load_f32(dir, name, &dims)?;
    Ok(Tensor3::from_vec(dims, data).expect("shape checked"))
}

pub fn load_manifest(dir: &Path) -> Result<DumpManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| DumpIoError::io(&path, e))?;
    // Check the version before the full schema so that a future format is
    // reported as such rather than as a parse failure.
    if let Ok(serde_json::Value::Object(map)) = serde_json::from_str::<serde_json::Value>(&text) {
        if let Some(v) = map.get("format_version").and_then(|v| v.as_u64()) {
            if v != u64::from(FORMAT_VERSION) {
                return Err(ValidationError::UnsupportedVersion(v.min(u64::from(u32::MAX)) as u32).into());
            }
        }
    }
    serde_json::from_str(&text).map_err(|source| DumpIoError::Manifest { path, source })
}

/// Reads and validates the dump stored in `dir`.
pub fn load_dump(dir: &Path) -> Result<EncoderDump> {
    let man = load_manifest(dir)?;
    if man.T_n.len() != man.N {
        return Err(ValidationError::ShapeMismatch {
            array: "T_n".to_string(),
            expected: vec![man.N],
            found: vec![man.T_n.len()],
        }
        .into());
    }

    let projected_visual = load_matrix(dir, "projected_visual", man.M, man.d_p)?;
    let raw_visual = match man.d_v {
        Some(d_v) => Some(load_matrix(dir, "raw_visual", man.M, d_v)?),
        None => None,
    };
    let cls_query = load_matrix(dir, "cls_query", man.H, man.d_h)?;
    let keys = load_tensor(dir, "keys", [man.H, man.M, man.d_h])?;
    let values = load_tensor(dir, "values", [man.H, man.M, man.d_h])?;
    let cls_attention_row = load_f32(dir, "cls_attention_row", &[man.M])?;
    let eos_embeddings = load_matrix(dir, "eos_embeddings", man.N, man.d_p)?;

    let mut eos_attention_rows = Vec::with_capacity(man.N);
    let mut text_labels = Vec::with_capacity(man.N);
    for (i, &t) in man.T_n.iter().enumerate() {
        eos_attention_rows.push(load_f32(dir, &format!("eos_attention_row_{i}"), &[t])?);
        let name = format!("text_labels_{i}");
        let codes = open_array(dir, &name, npy::read_u8)?;
        expect_shape(&name, &codes, &[t])?;
        let labels = codes
            .data
            .iter()
            .map(|&code| {
                TextLabel::from_code(code).ok_or_else(|| ValidationError::InvalidLabel {
                    array: name.clone(),
                    code,
                })
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        text_labels.push(labels);
    }

    let mask_grids = (0..man.R)
        .map(|r| load_matrix(dir, &format!("mask_grid_{r}"), man.G, man.G))
        .collect::<Result<Vec<_>>>()?;

    let dump = EncoderDump {
        manifest: man,
        projected_visual,
        raw_visual,
        cls_query,
        keys,
        values,
        cls_attention_row,
        eos_embeddings,
        eos_attention_rows,
        text_labels,
        mask_grids,
    };
    dump.validate()?;
    Ok(dump)
}

/// Validates `dump` and writes it to `dir`, creating the directory if needed.
/// Nothing is written when validation fails.
pub fn save_dump(dump: &EncoderDump, dir: &Path) -> Result<()> {
    dump.validate()?;
    fs::create_dir_all(dir).map_err(|e| DumpIoError::io(dir, e))?;

    let man = &dump.manifest;
    let manifest_path = dir.join(MANIFEST_FILE);
    let mut json = serde_json::to_string_pretty(man).expect("manifest serializes");
    json.push('\n');
    fs::write(&manifest_path, json).map_err(|e| DumpIoError::io(&manifest_path, e))?;

    let f32_arrays: Vec<(String, Vec<usize>, &[f32])> = {
        let mut v: Vec<(String, Vec<usize>, &[f32])> = vec![(
            "projected_visual".into(),
            vec![man.M, man.d_p],
            dump.projected_visual.as_slice(),
        )];
        if let Some(raw) = &dump.raw_visual {
            v.push(("raw_visual".into(), raw.shape().to_vec(), raw.as_slice()));
        }
        v.push(("cls_query".into(), vec![man.H, man.d_h], dump.cls_query.as_slice()));
        v.push(("keys".into(), dump.keys.dims().to_vec(), dump.keys.as_slice()));
        v.push(("values".into(), dump.values.dims().to_vec(), dump.values.as_slice()));
        v.push(("cls_attention_row".into(), vec![man.M], &dump.cls_attention_row));
        v.push(("eos_embeddings".into(), vec![man.N, man.d_p], dump.eos_embeddings.as_slice()));
        for (i, row) in dump.eos_attention_rows.iter().enumerate() {
            v.push((format!("eos_attention_row_{i}"), vec![row.len()], row));
        }
        for (r, grid) in dump.mask_grids.iter().enumerate() {
            v.push((format!("mask_grid_{r}"), vec![man.G, man.G], grid.as_slice()));
        }
        v
    };
    for (name, shape, data) in f32_arrays {
        let path = npy_path(dir, &name);
        npy::write_f32(&path, &shape, data).map_err(|e| DumpIoError::io(&path, e))?;
    }
    for (i, labels) in dump.text_labels.iter().enumerate() {
        let path = npy_path(dir, &format!("text_labels_{i}"));
        let codes: Vec<u8> = labels.iter().map(|l| l.code()).collect();
        npy::write_u8(&path, &[codes.len()], &codes).map_err(|e| DumpIoError::io(&path, e))?;
    }
    Ok(())
}

/// True when `dir` holds a dump manifest.
pub fn is_dump_dir(dir: &Path) -> bool {
    dir.join(MANIFEST_FILE).is_file()
}
