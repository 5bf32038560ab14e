//! Dense row-major matrices and the on-disk tensor format.
//!
//! Kernels are generic over [`Real`] (`f32` or `f64`); [`TensorF`] is the
//! dtype-tagged carrier used at I/O boundaries.
//!
//! # File format
//!
//! A tensor named `x` is stored as a sidecar pair:
//!
//! ```text
//! x.json  {"rows": 4, "cols": 2, "dtype": "f32", "layout": "row_major"}
//! x.bin   rows*cols little-endian IEEE-754 values, row-major, no header
//! ```

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::path::{Path, PathBuf};

use num_traits::{Float, NumAssign};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SlaError};

/// Element type of a tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    #[default]
    F64,
}

impl DType {
    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }
}

impl std::str::FromStr for DType {
    type Err = SlaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            other => Err(SlaError::Config(format!("unknown dtype {other:?}"))),
        }
    }
}

/// Scalar types the kernels run on.
pub trait Real:
    Float + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    const DTYPE: DType;

    /// Large-negative logsumexp sentinel for rows with no contributing block.
    const EMPTY_LSE: Self;

    fn lit(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const DTYPE: DType = DType::F32;
    const EMPTY_LSE: Self = -f32::MAX;

    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte chunk"))
    }
}

impl Real for f64 {
    const DTYPE: DType = DType::F64;
    const EMPTY_LSE: Self = -f64::MAX;

    #[inline]
    fn lit(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte chunk"))
    }
}

/// Dense row-major matrix.
///
/// Constructors reject NaN/Inf unless the caller opts into
/// [`Tensor::from_vec_allow_nonfinite`] (masked score matrices).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        let t = Self::from_vec_allow_nonfinite(rows, cols, data)?;
        if let Some(pos) = t.data.iter().position(|x| !x.is_finite()) {
            return Err(SlaError::NonFiniteInput {
                row: pos / cols.max(1),
                col: pos % cols.max(1),
                value: t.data[pos].as_f64(),
            });
        }
        Ok(t)
    }

    /// Length-checked constructor that admits non-finite entries.
    pub fn from_vec_allow_nonfinite(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(SlaError::Shape(format!(
                "data length {} != {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[T]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(SlaError::Shape("ragged rows".into()));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Tensor { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { T::one() } else { T::zero() })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }
    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
    pub fn dtype(&self) -> DType {
        T::DTYPE
    }
    pub fn data(&self) -> &[T] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }
    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }
    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Contiguous rows `[start, start + len)` as a slice.
    pub fn rows_slice(&self, start: usize, len: usize) -> &[T] {
        &self.data[start * self.cols..(start + len) * self.cols]
    }

    /// Copy of rows `[start, start + len)`.
    pub fn row_block(&self, start: usize, len: usize) -> Tensor<T> {
        Tensor {
            rows: len,
            cols: self.cols,
            data: self.rows_slice(start, len).to_vec(),
        }
    }

    pub fn transpose(&self) -> Tensor<T> {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    fn check_same_shape(&self, other: &Tensor<T>, op: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(SlaError::Shape(format!(
                "{op}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.cols != other.rows {
            return Err(SlaError::Shape(format!(
                "matmul: {:?} x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = Tensor::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let out_row = &mut out.data[r * other.cols..(r + 1) * other.cols];
            for (k, &a) in self.row(r).iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.cols != other.cols {
            return Err(SlaError::Shape(format!(
                "matmul_t: {:?} x {:?}ᵀ",
                self.shape(),
                other.shape()
            )));
        }
        Ok(Self::from_fn(self.rows, other.rows, |r, c| {
            dot(self.row(r), other.row(c))
        }))
    }

    /// `selfᵀ · other`.
    pub fn t_matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.rows != other.rows {
            return Err(SlaError::Shape(format!(
                "t_matmul: {:?}ᵀ x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = Tensor::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let b_row = other.row(k);
            for (r, &a) in self.row(k).iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                let out_row = &mut out.data[r * other.cols..(r + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_same_shape(other, "add")?;
        Ok(self.zip_map(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_same_shape(other, "sub")?;
        Ok(self.zip_map(other, |a, b| a - b))
    }

    pub fn hadamard(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_same_shape(other, "hadamard")?;
        Ok(self.zip_map(other, |a, b| a * b))
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        self.check_same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sub_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        self.check_same_shape(other, "sub_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a -= b;
        }
        Ok(())
    }

    pub fn scale(&self, s: T) -> Tensor<T> {
        self.map(|x| x * s)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    fn zip_map(&self, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| U::lit(x.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, x| m.max(x.abs()))
    }

    /// Squared Frobenius norm, accumulated in f64.
    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|x| x.as_f64() * x.as_f64()).sum()
    }

    /// `Σ self ⊙ other`, accumulated in f64.
    pub fn dot(&self, other: &Tensor<T>) -> Result<f64> {
        self.check_same_shape(other, "dot")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.as_f64() * b.as_f64())
            .sum())
    }
}

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Norm-wise relative error `max|a - b| / max|b|`, computed in f64.
///
/// When `expected` is identically zero the absolute error is returned.
pub fn max_rel_error<A: Real, B: Real>(actual: &Tensor<A>, expected: &Tensor<B>) -> f64 {
    assert_eq!(actual.shape(), expected.shape(), "max_rel_error shape");
    let mut diff = 0.0f64;
    let mut scale = 0.0f64;
    for (a, b) in actual.data().iter().zip(expected.data()) {
        let (a, b) = (a.as_f64(), b.as_f64());
        diff = diff.max((a - b).abs());
        scale = scale.max(b.abs());
    }
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Dtype-tagged tensor, the unit of file I/O.
#[derive(Clone, Debug, PartialEq)]
pub enum TensorF {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl TensorF {
    pub fn dtype(&self) -> DType {
        match self {
            TensorF::F32(_) => DType::F32,
            TensorF::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            TensorF::F32(t) => t.shape(),
            TensorF::F64(t) => t.shape(),
        }
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        match self {
            TensorF::F32(t) => t.cast(),
            TensorF::F64(t) => t.clone(),
        }
    }

    pub fn to_dtype<T: Real>(&self) -> Tensor<T> {
        match self {
            TensorF::F32(t) => t.cast(),
            TensorF::F64(t) => t.cast(),
        }
    }
}

impl From<Tensor<f32>> for TensorF {
    fn from(t: Tensor<f32>) -> Self {
        TensorF::F32(t)
    }
}

impl From<Tensor<f64>> for TensorF {
    fn from(t: Tensor<f64>) -> Self {
        TensorF::F64(t)
    }
}

/// JSON sidecar describing a `.bin` payload.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub rows: usize,
    pub cols: usize,
    pub dtype: DType,
    pub layout: String,
}

const ROW_MAJOR: &str = "row_major";

fn sidecar_paths(stem: &Path) -> (PathBuf, PathBuf) {
    let name = stem
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    (
        stem.with_file_name(format!("{name}.json")),
        stem.with_file_name(format!("{name}.bin")),
    )
}

fn encode<T: Real>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.data().len() * T::DTYPE.size_of());
    for &x in t.data() {
        x.write_le(&mut out);
    }
    out
}

fn decode<T: Real>(rows: usize, cols: usize, bytes: &[u8]) -> Vec<T> {
    debug_assert_eq!(bytes.len(), rows * cols * T::DTYPE.size_of());
    bytes
        .chunks_exact(T::DTYPE.size_of())
        .map(T::read_le)
        .collect()
}

/// Writes `<stem>.json` and `<stem>.bin`.
pub fn save_tensor(stem: impl AsRef<Path>, tensor: &TensorF) -> Result<()> {
    let (json_path, bin_path) = sidecar_paths(stem.as_ref());
    let (rows, cols) = tensor.shape();
    let header = TensorHeader {
        rows,
        cols,
        dtype: tensor.dtype(),
        layout: ROW_MAJOR.into(),
    };
    let bytes = match tensor {
        TensorF::F32(t) => encode(t),
        TensorF::F64(t) => encode(t),
    };
    std::fs::write(&json_path, serde_json::to_vec(&header)?)?;
    std::fs::write(&bin_path, bytes)?;
    Ok(())
}

/// Reads a sidecar pair written by [`save_tensor`] (or any conforming writer).
pub fn load_tensor(stem: impl AsRef<Path>) -> Result<TensorF> {
    let (json_path, bin_path) = sidecar_paths(stem.as_ref());
    let header: TensorHeader = serde_json::from_slice(&std::fs::read(&json_path)?)?;
    if header.layout != ROW_MAJOR {
        return Err(SlaError::TensorFile {
            path: json_path,
            message: format!("unsupported layout {:?}", header.layout),
        });
    }
    let bytes = std::fs::read(&bin_path)?;
    let expected = header.rows * header.cols * header.dtype.size_of();
    if bytes.len() != expected {
        return Err(SlaError::TensorFile {
            path: bin_path,
            message: format!("expected {expected} bytes, found {}", bytes.len()),
        });
    }
    let (r, c) = (header.rows, header.cols);
    Ok(match header.dtype {
        DType::F32 => TensorF::F32(Tensor::from_vec(r, c, decode(r, c, &bytes))?),
        DType::F64 => TensorF::F64(Tensor::from_vec(r, c, decode(r, c, &bytes))?),
    })
}
