//! Dense row-major tensors generic over `f32`/`f64`, plus the deterministic
//! reduction helpers the rest of the engine builds on.

use std::cmp::Ordering;
use std::fmt;

use num_traits::Float;

use crate::error::{shape_err, Result};

/// Element type tag, used by checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size_bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(Dtype::F32),
            2 => Some(Dtype::F64),
            _ => None,
        }
    }
}

/// Scalar element: the whole engine is generic over this so tests and gradient
/// oracles run in double precision while training defaults to single, through
/// one code path.
pub trait Scalar:
    Float + Send + Sync + fmt::Debug + fmt::Display + Default + 'static
{
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    /// Total order (IEEE totalOrder-style); used by the order-insensitive sums.
    fn total_order(&self, other: &Self) -> Ordering;
    fn to_le_bytes_vec(self) -> Vec<u8>;
    fn from_le_slice(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }

    fn total_order(&self, other: &Self) -> Ordering {
        self.total_cmp(other)
    }

    fn to_le_bytes_vec(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }

    fn from_le_slice(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }

    fn total_order(&self, other: &Self) -> Ordering {
        self.total_cmp(other)
    }

    fn to_le_bytes_vec(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }

    fn from_le_slice(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Sum whose result depends only on the multiset of addends, not their order:
/// sorts by total order, then adds left to right. Used wherever a reduction
/// ranges over clip frames, so frame-permutation invariance holds bitwise.
pub fn ordered_sum<T: Scalar>(buf: &mut [T]) -> T {
    buf.sort_unstable_by(|a, b| a.total_order(b));
    let mut acc = T::zero();
    for v in buf.iter() {
        acc = acc + *v;
    }
    acc
}

/// Dense row-major tensor. Gradient bookkeeping lives on graph nodes, not here.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return shape_err(format!(
                "tensor shape {:?} wants {} elements, got {}",
                shape,
                numel,
                data.len()
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::zero(); numel],
        }
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_f64_slice(shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        Tensor::new(shape, values.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Reinterpret with a new shape of identical element count.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return shape_err(format!(
                "cannot reshape {} elements to {:?}",
                self.data.len(),
                shape
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn fill(&mut self, value: T) {
        for v in &mut self.data {
            *v = value;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Convert elementwise to another scalar type (f64 <-> f32 via f64).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64(Scalar::to_f64(v)))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_mismatched_len() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn reshape_preserves_data() {
        let t = Tensor::<f32>::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let r = t.clone().reshaped(vec![4]).unwrap();
        assert_eq!(r.data(), t.data());
        assert!(t.reshaped(vec![3]).is_err());
    }

    #[test]
    fn ordered_sum_is_permutation_independent() {
        let mut a = vec![1.0e16f64, 1.0, -1.0e16, 0.1, -0.30000000000001];
        let mut b: Vec<f64> = vec![0.1, -1.0e16, -0.30000000000001, 1.0e16, 1.0];
        let sa = ordered_sum(&mut a);
        let sb = ordered_sum(&mut b);
        assert_eq!(sa.to_bits(), sb.to_bits());
    }

    #[test]
    fn cast_roundtrip_f32() {
        let t = Tensor::<f32>::new(vec![3], vec![0.5, -1.25, 3.0]).unwrap();
        let d: Tensor<f64> = t.cast();
        let back: Tensor<f32> = d.cast();
        assert_eq!(t.data(), back.data());
    }
}
