//! Dense tensor type: the sole numerical currency of the crate.
//!
//! Training and inference run in `f32`; an `f64` instantiation exists for
//! gradient checking only.

use std::io::{Read, Write};

use num_traits::Float;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Scalar element of a [`Tensor`]. Implemented for `f32` and `f64`.
pub trait Element:
    Float + Default + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    /// One draw from the standard normal distribution.
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;
}

impl Element for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(StandardNormal)
    }
}

impl Element for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(StandardNormal)
    }
}

/// Dense row-major tensor with an optional gradient buffer.
///
/// The gradient buffer is present exactly when the tensor participates in
/// optimization (`requires_grad`).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E: Element = f32> {
    shape: Vec<usize>,
    data: Vec<E>,
    grad: Option<Vec<E>>,
}

impl<E: Element> Tensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Shape(format!("zero-sized dimension in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {numel} elements, data has {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![E::zero(); numel],
            grad: None,
        }
    }

    pub fn full(shape: Vec<usize>, value: E) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
            grad: None,
        }
    }

    /// Scalar (shape `[1]`) tensor.
    pub fn scalar(value: E) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.grad.is_some()
    }

    /// Allocate (or keep) a zeroed gradient buffer.
    pub fn enable_grad(&mut self) {
        if self.grad.is_none() {
            self.grad = Some(vec![E::zero(); self.data.len()]);
        }
    }

    pub fn grad(&self) -> Option<&[E]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [E]> {
        self.grad.as_deref_mut()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = E::zero());
        }
    }

    /// Accumulate into the gradient buffer; the tensor must require grad.
    pub fn add_to_grad(&mut self, delta: &[E]) {
        let g = self
            .grad
            .as_mut()
            .expect("add_to_grad on tensor without gradient buffer");
        assert_eq!(g.len(), delta.len(), "gradient length mismatch");
        for (gi, &di) in g.iter_mut().zip(delta) {
            *gi = *gi + di;
        }
    }

    /// Element-wise cast, used to lift `f32` networks into the `f64`
    /// gradient-checking mode.
    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| F::from_f64(v.as_f64())).collect(),
            grad: None,
        }
    }

    /// Index of the first non-finite element, if any.
    pub fn find_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }
}

/// Errors with the offending index unless every element of `data` is finite.
pub fn check_finite<E: Element>(data: &[E], context: &str) -> Result<()> {
    // A plain f64 sum is non-finite iff some element is (inf - inf => NaN).
    let sum: f64 = data.iter().map(|v| v.as_f64()).sum();
    if sum.is_finite() {
        return Ok(());
    }
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite {
            context: context.to_string(),
            index,
        }),
        // the fast-path sum itself overflowed on finite data
        None => Ok(()),
    }
}

// --- binary tensor records -------------------------------------------------
//
// Record layout (all integers little-endian):
//   u32 name length, name bytes (UTF-8),
//   u32 rank, u32 dims[rank],
//   f32 data (little-endian), dims product entries.

const MAX_RECORD_ELEMENTS: u64 = 1 << 30;

pub fn write_record<W: Write>(w: &mut W, name: &str, tensor: &Tensor<f32>) -> Result<()> {
    let name_bytes = name.as_bytes();
    w.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
    w.write_all(name_bytes)?;
    w.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
    for &d in tensor.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in tensor.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_record<R: Read>(r: &mut R) -> Result<(String, Tensor<f32>)> {
    let name_len = read_u32(r)? as usize;
    if name_len > 1 << 16 {
        return Err(Error::Format(format!("tensor name length {name_len}")));
    }
    let mut name_bytes = vec![0u8; name_len];
    r.read_exact(&mut name_bytes)
        .map_err(|_| Error::Format("truncated tensor record (name)".into()))?;
    let name = String::from_utf8(name_bytes)
        .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;

    let rank = read_u32(r)? as usize;
    if rank > 8 {
        return Err(Error::Format(format!("tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut numel: u64 = 1;
    for _ in 0..rank {
        let d = read_u32(r)? as u64;
        numel = numel.saturating_mul(d.max(1)).max(d);
        shape.push(d as usize);
    }
    if shape.contains(&0) || numel > MAX_RECORD_ELEMENTS {
        return Err(Error::Format(format!("bad tensor dims {shape:?}")));
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    let mut buf = [0u8; 4];
    for _ in 0..numel {
        r.read_exact(&mut buf)
            .map_err(|_| Error::Format("truncated tensor record (data)".into()))?;
        data.push(f32::from_le_bytes(buf));
    }
    Ok((name, Tensor::new(shape, data)?))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format("truncated tensor record".into()))?;
    Ok(u32::from_le_bytes(buf))
}
