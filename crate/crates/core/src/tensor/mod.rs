//! Dense row-major tensors and a define-by-run reverse-mode tape.

mod broadcast;
mod tape;

pub use broadcast::Broadcast;
pub use tape::{Tape, Var};

use thiserror::Error;

use crate::real::Real;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid axis {axis} for tensor of rank {rank}")]
    Axis { axis: usize, rank: usize },
    #[error("shape {shape:?} holds {expected} elements but {len} were given")]
    ShapeData {
        shape: Vec<usize>,
        expected: usize,
        len: usize,
    },
    #[error("domain error in {op}")]
    Domain { op: &'static str },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("index {index} out of range for extent {extent}")]
    Index { index: usize, extent: usize },
}

pub type TensorResult<T> = Result<T, TensorError>;

/// Dense tensor: a shape and its row-major data.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> TensorResult<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeData {
                shape: shape.to_vec(),
                expected,
                len: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Builds an `n×d` matrix from rows of equal width.
    pub fn from_rows<const D: usize>(rows: &[[T; D]]) -> Self {
        Self {
            shape: vec![rows.len(), D],
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Single value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, (&ix, &ext)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < ext, "index {ix} out of range on axis {i}");
            flat = flat * ext + ix;
        }
        self.data[flat]
    }

    pub fn reshape(mut self, shape: &[usize]) -> TensorResult<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(TensorError::Dimension {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Row `i` of a tensor viewed as `shape[0] × rest`.
    pub fn row(&self, i: usize) -> &[T] {
        let w = self.data.len() / self.shape[0].max(1);
        &self.data[i * w..(i + 1) * w]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Element-count-weighted sum of all entries.
    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|&x| x * x).sum::<T>().sqrt()
    }

    /// Converts to another scalar type.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::lit(x.as_f64())).collect(),
        }
    }

    /// Rounds every element through `f32`.
    pub fn round_to_f32(&mut self) {
        for x in &mut self.data {
            *x = T::lit(x.as_f64() as f32 as f64);
        }
    }

    /// Plain matrix product without tape participation.
    pub fn matmul(&self, other: &Self) -> TensorResult<Self> {
        let (m, k, n) = matmul_dims(self.shape(), other.shape(), false)?;
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, &self.data, false, &other.data, false, &mut out, false);
        Tensor::new(&[m, n], out)
    }

    pub fn transpose(&self) -> TensorResult<Self> {
        if self.rank() != 2 {
            return Err(TensorError::Axis {
                axis: 1,
                rank: self.rank(),
            });
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        Ok(Self::from_fn(&[c, r], |i| self.data[(i % r) * c + i / r]))
    }
}

/// Extents `(m, k, n)` of `a · b` (or `a · bᵀ` when `trans_b`).
pub(crate) fn matmul_dims(a: &[usize], b: &[usize], trans_b: bool) -> TensorResult<(usize, usize, usize)> {
    let err = || TensorError::Dimension {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() != 2 || b.len() != 2 {
        return Err(err());
    }
    let (bk, bn) = if trans_b { (b[1], b[0]) } else { (b[0], b[1]) };
    if a[1] != bk {
        return Err(err());
    }
    Ok((a[0], a[1], bn))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks_length() {
        assert!(Tensor::<f64>::new(&[2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::<f64>::new(&[2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.len(), 6);
    }

    #[test]
    fn matmul_identity_and_orthogonal() {
        let i2 = Tensor::<f64>::eye(2);
        let m = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(i2.matmul(&m).unwrap(), m);
        let a = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
        let b = Tensor::new(&[2, 1], vec![0.0, 1.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[0.0]);
        assert!(matches!(a.matmul(&a), Err(TensorError::Dimension { .. })));
    }

    #[test]
    fn transpose_roundtrip() {
        let m = Tensor::<f64>::from_fn(&[2, 3], |i| i as f64);
        let t = m.transpose().unwrap();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.at(&[2, 1]), m.at(&[1, 2]));
        assert_eq!(t.transpose().unwrap(), m);
    }
}
