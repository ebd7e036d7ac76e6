//! Dense tensors and a reverse-mode autodiff tape.
//!
//! Tensors are row-major `Vec`-backed arrays of `f32` (training) or
//! `f64` (verification; finite differences are unreliable in `f32`).
//! A [`Graph`] records every operation eagerly and can replay them in
//! reverse to accumulate gradients, or forwards again after leaf values
//! change — which is what [`grad_check`] exploits.
//!
//! Activations are laid out `[batch, channel, depth, height, width]`;
//! convolution kernels `[out_ch, in_ch, kd, kh, kw]`; scalars are
//! rank-0 tensors.

mod gradcheck;
mod graph;
mod kernels;
pub mod opcheck;

pub use gradcheck::{grad_check, GradCheckEntry, GradCheckReport};
pub use graph::{Graph, NodeId, Op};

use std::fmt;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch at {node}: {detail}")]
    Shape { node: String, detail: String },
    #[error("non-finite value produced at {node}")]
    NonFinite { node: String },
    #[error("{node}: output is not scalar (shape {shape:?})")]
    NotScalar { node: String, shape: Vec<usize> },
    #[error("gradient flows into non-differentiable input of {node}")]
    NonDifferentiable { node: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("tensor data length {got} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DType::F32 => write!(f, "f32"),
            DType::F64 => write!(f, "f64"),
        }
    }
}

/// Scalar element of a tensor. Implemented for `f32` and `f64` only.
pub trait Element:
    Copy
    + Send
    + Sync
    + PartialOrd
    + fmt::Debug
    + fmt::Display
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + 'static
{
    const DTYPE: DType;
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
    fn mul_add(self, a: Self, b: Self) -> Self;
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn ln(self) -> Self {
        f32::ln(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn mul_add(self, a: Self, b: Self) -> Self {
        self * a + b
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn mul_add(self, a: Self, b: Self) -> Self {
        self * a + b
    }
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E: Element> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Element> Tensor<E> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<E>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::DataLength {
                shape,
                got: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![E::ZERO; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: E) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: E) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
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

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> Option<E> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn map<F: Fn(E) -> E>(&self, f: F) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Elementwise cast between precisions through `f64`.
    pub fn cast<T: Element>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| T::from_f64(x.to_f64())).collect(),
        }
    }

    pub fn from_f64_slice(shape: &[usize], values: &[f64]) -> Result<Self, TensorError> {
        Self::from_vec(
            shape.to_vec(),
            values.iter().map(|&v| E::from_f64(v)).collect(),
        )
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor<E>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }
}

/// Shape of a `[batch, channel, depth, height, width]` activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims5 {
    pub n: usize,
    pub c: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims5 {
    pub fn from_shape(shape: &[usize]) -> Option<Self> {
        if shape.len() != 5 {
            return None;
        }
        Some(Dims5 {
            n: shape[0],
            c: shape[1],
            d: shape[2],
            h: shape[3],
            w: shape[4],
        })
    }

    pub fn shape(&self) -> Vec<usize> {
        vec![self.n, self.c, self.d, self.h, self.w]
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.d, self.h, self.w]
    }

    pub fn spatial_len(&self) -> usize {
        self.d * self.h * self.w
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.spatial_len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_validates_length() {
        assert!(Tensor::<f64>::from_vec(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::<f64>::from_vec(vec![2, 3], vec![0.0; 5]),
            Err(TensorError::DataLength { .. })
        ));
    }

    #[test]
    fn scalar_is_rank_zero() {
        let t = Tensor::<f32>::scalar(2.5);
        assert_eq!(t.shape(), &[] as &[usize]);
        assert_eq!(t.numel(), 1);
        assert_eq!(t.item(), Some(2.5));
    }

    #[test]
    fn cast_round_trips_f32_values() {
        let t = Tensor::<f32>::from_vec(vec![3], vec![1.5, -2.25, 0.125]).unwrap();
        let d: Tensor<f64> = t.cast();
        let back: Tensor<f32> = d.cast();
        assert_eq!(back, t);
    }
}
