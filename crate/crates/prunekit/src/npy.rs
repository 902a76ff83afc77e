//! Typed access to the two NPY element types used by dumps: little-endian
//! `float32` (`<f4`) and `uint8` (`|u1`), C order.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use npyz::{DType, NpyFile, Order, WriterBuilder};

pub const F32_DESCR: &str = "<f4";
pub const U8_DESCR: &str = "|u1";

#[derive(Debug, thiserror::Error)]
pub enum NpyError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("dtype {found}, expected {expected}")]
    Dtype { expected: &'static str, found: String },
    #[error("Fortran-ordered arrays are not supported")]
    FortranOrder,
}

/// Array payload plus its on-disk shape.
#[derive(Debug, Clone, PartialEq)]
pub struct NpyArray<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

fn descr_of(dtype: &DType) -> String {
    match dtype {
        DType::Plain(ts) => ts.to_string(),
        other => other.descr(),
    }
}

fn read<T: npyz::Deserialize>(path: &Path, expected: &'static str) -> Result<NpyArray<T>, NpyError> {
    let npy = NpyFile::new(BufReader::new(File::open(path)?))?;
    let found = descr_of(&npy.dtype());
    if found != expected {
        return Err(NpyError::Dtype { expected, found });
    }
    if npy.order() == Order::Fortran {
        return Err(NpyError::FortranOrder);
    }
    let shape = npy.shape().iter().map(|&d| d as usize).collect();
    Ok(NpyArray {
        shape,
        data: npy.into_vec()?,
    })
}

pub fn read_f32(path: &Path) -> Result<NpyArray<f32>, NpyError> {
    read(path, F32_DESCR)
}

pub fn read_u8(path: &Path) -> Result<NpyArray<u8>, NpyError> {
    read(path, U8_DESCR)
}

fn write<T: npyz::AutoSerialize + Copy>(path: &Path, shape: &[usize], data: &[T]) -> std::io::Result<()> {
    let shape: Vec<u64> = shape.iter().map(|&d| d as u64).collect();
    let mut out = BufWriter::new(File::create(path)?);
    let mut writer = npyz::WriteOptions::new()
        .default_dtype()
        .shape(&shape)
        .writer(&mut out)
        .begin_nd()?;
    writer.extend(data.iter().copied())?;
    writer.finish()?;
    std::io::Write::flush(&mut out)
}

pub fn write_f32(path: &Path, shape: &[usize], data: &[f32]) -> std::io::Result<()> {
    write(path, shape, data)
}

pub fn write_u8(path: &Path, shape: &[usize], data: &[u8]) -> std::io::Result<()> {
    write(path, shape, data)
}
