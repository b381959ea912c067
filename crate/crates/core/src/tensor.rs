//! Dense row-major tensors and their binary file format.
//!
//! File layout (all little-endian): magic `CRAT`, version `u32`, rank `u32`,
//! one `u32` per dimension, then the elements as `f32`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::element::Element;
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"CRAT";
pub const TENSOR_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Element = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

fn validate_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::InvalidShape("tensor must have at least one dimension".into()));
    }
    if let Some(d) = shape.iter().position(|&d| d == 0) {
        return Err(Error::InvalidShape(format!("dimension {d} of {shape:?} is zero")));
    }
    Ok(shape.iter().product())
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let numel = validate_shape(&shape)?;
        if numel != data.len() {
            return Err(Error::SizeMismatch(format!(
                "shape {shape:?} holds {numel} elements but {} values were given",
                data.len()
            )));
        }
        Ok(Self { shape, data, grad: None })
    }

    pub fn from_slice(shape: impl Into<Vec<usize>>, values: &[T]) -> Result<Self> {
        Self::new(shape, values.to_vec())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Result<Self> {
        let shape = shape.into();
        let numel = validate_shape(&shape)?;
        Ok(Self { shape, data: vec![value; numel], grad: None })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Result<Self> {
        let shape = shape.into();
        let numel = validate_shape(&shape)?;
        Ok(Self { shape, data: (0..numel).map(&mut f).collect(), grad: None })
    }

    /// Builds a tensor from parts already known to be consistent.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        debug_assert!(!shape.is_empty() && shape.iter().all(|&d| d > 0));
        Self { shape, data, grad: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// In-place access for parameter updates between forward passes.
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<T>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::SizeMismatch(format!(
                "gradient of length {} for tensor of {} elements",
                grad.len(),
                self.data.len()
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Row-major element lookup.
    pub fn get(&self, index: &[usize]) -> Option<T> {
        if index.len() != self.shape.len() {
            return None;
        }
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            if i >= d {
                return None;
            }
            flat = flat * d + i;
        }
        Some(self.data[flat])
    }

    /// Returns a copy with a new shape holding the same elements. The gradient is not carried.
    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect()),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Serializes shape and data (not the gradient). Elements are stored as `f32`.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(TENSOR_MAGIC)?;
        w.write_all(&TENSOR_FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            let d = u32::try_from(d)
                .map_err(|_| Error::InvalidShape(format!("dimension {d} does not fit in u32")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut word = [0u8; 4];
        r.read_exact(&mut word)
            .map_err(|e| Error::CorruptTensorFile(format!("missing header: {e}")))?;
        if &word != TENSOR_MAGIC {
            return Err(Error::CorruptTensorFile(format!("bad magic {word:?}")));
        }
        let mut read_u32 = |what: &str| -> Result<u32> {
            r.read_exact(&mut word)
                .map_err(|e| Error::CorruptTensorFile(format!("truncated {what}: {e}")))?;
            Ok(u32::from_le_bytes(word))
        };
        let version = read_u32("version")?;
        if version != TENSOR_FORMAT_VERSION {
            return Err(Error::CorruptTensorFile(format!("unsupported version {version}")));
        }
        let rank = read_u32("rank")? as usize;
        if rank == 0 || rank > 16 {
            return Err(Error::CorruptTensorFile(format!("implausible rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| read_u32("dimension").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = validate_shape(&shape)?;
        let mut bytes = vec![0u8; numel * 4];
        r.read_exact(&mut bytes)
            .map_err(|e| Error::CorruptTensorFile(format!("expected {numel} elements: {e}")))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| T::from_f64_lossy(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        Ok(Self::from_parts(shape, data))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}
