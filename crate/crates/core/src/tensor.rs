//! Dense row-major tensors of rank 1–4 and the numeric kernels built on them.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use rayon::prelude::*;

pub const MAX_RANK: usize = 4;

/// Below this many output elements a parallel matmul is not worth the
/// scheduling overhead.
const PAR_MATMUL_MIN: usize = 16 * 1024;

/// Dense row-major tensor with up to four dimensions.
///
/// Shape and data length are kept consistent by every constructor; all
/// kernels produce bit-identical results regardless of thread count because
/// each output element is reduced in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor from a flat row-major buffer.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_shape("from_vec", shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidShape {
                op: "from_vec",
                shape: shape.to_vec(),
                reason: "data length does not match product of extents",
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        check_shape("zeros", shape).expect("invalid tensor shape");
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        check_shape("full", shape).expect("invalid tensor shape");
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn ones_like(&self) -> Self {
        Self::ones(&self.shape)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.shape)
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        check_shape("reshape", shape)?;
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::InvalidShape {
                op: "reshape",
                shape: shape.to_vec(),
                reason: "element count differs from source tensor",
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Element-by-element copy into a different scalar type.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// out[i] = self[i] + rhs[i]
    pub fn add(&self, rhs: &Self) -> Result<Self> {
        self.zip("add", rhs, |a, b| a + b)
    }

    /// out[i] = self[i] - rhs[i]
    pub fn sub(&self, rhs: &Self) -> Result<Self> {
        self.zip("sub", rhs, |a, b| a - b)
    }

    /// out[i] = self[i] * rhs[i]
    pub fn mul(&self, rhs: &Self) -> Result<Self> {
        self.zip("mul", rhs, |a, b| a * b)
    }

    /// out[i] = self[i] * s
    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// self[i] += rhs[i] * s
    pub fn axpy(&mut self, s: T, rhs: &Self) -> Result<()> {
        if self.shape != rhs.shape {
            return Err(Error::ShapeMismatch {
                op: "axpy",
                left: self.shape.clone(),
                right: rhs.shape.clone(),
            });
        }
        for (a, &b) in self.data.iter_mut().zip(rhs.data.iter()) {
            *a += b * s;
        }
        Ok(())
    }

    fn zip(&self, op: &'static str, rhs: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != rhs.shape {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: rhs.shape.clone(),
            });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(rhs.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Sum of all elements, accumulated in 64-bit.
    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64()).sum()
    }

    /// Euclidean norm, accumulated in 64-bit.
    pub fn norm_l2(&self) -> f64 {
        self.data
            .iter()
            .map(|v| {
                let x = v.to_f64();
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Matrix product `self [M,K] x rhs [K,N]`, accumulated in 64-bit and
    /// rounded to the storage type once per output element.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if self.rank() != 2 || rhs.rank() != 2 {
            return Err(Error::InvalidShape {
                op: "matmul",
                shape: if self.rank() != 2 {
                    self.shape.clone()
                } else {
                    rhs.shape.clone()
                },
                reason: "matmul operates on rank-2 tensors",
            });
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (rhs.shape[0], rhs.shape[1]);
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: rhs.shape.clone(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(&self.data, &rhs.data, m, k, n, &mut out);
        Tensor::from_vec(&[m, n], out)
    }

    /// Rank-2 transpose (copying).
    pub fn transpose2(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::InvalidShape {
                op: "transpose2",
                shape: self.shape.clone(),
                reason: "transpose2 operates on rank-2 tensors",
            });
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::from_vec(&[n, m], out)
    }

    /// Copies row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> Result<Vec<T>> {
        if self.rank() != 2 {
            return Err(Error::InvalidShape {
                op: "row",
                shape: self.shape.clone(),
                reason: "row operates on rank-2 tensors",
            });
        }
        let n = self.shape[1];
        if i >= self.shape[0] {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: self.shape[0],
            });
        }
        Ok(self.data[i * n..(i + 1) * n].to_vec())
    }

    /// Gathers rows of a rank-2 tensor into a new tensor, in index order.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::InvalidShape {
                op: "gather_rows",
                shape: self.shape.clone(),
                reason: "gather_rows operates on rank-2 tensors",
            });
        }
        let n = self.shape[1];
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= self.shape[0] {
                return Err(Error::IndexOutOfRange {
                    index: i,
                    len: self.shape[0],
                });
            }
            data.extend_from_slice(&self.data[i * n..(i + 1) * n]);
        }
        Tensor::from_vec(&[indices.len(), n], data)
    }

    /// Gathers whole images `[C,H,W]` from a rank-4 stack into a new batch.
    pub fn gather_batch(&self, indices: &[usize]) -> Result<Self> {
        if self.rank() != 4 {
            return Err(Error::InvalidShape {
                op: "gather_batch",
                shape: self.shape.clone(),
                reason: "gather_batch operates on rank-4 tensors",
            });
        }
        let per = self.shape[1] * self.shape[2] * self.shape[3];
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            if i >= self.shape[0] {
                return Err(Error::IndexOutOfRange {
                    index: i,
                    len: self.shape[0],
                });
            }
            data.extend_from_slice(&self.data[i * per..(i + 1) * per]);
        }
        Tensor::from_vec(&[indices.len(), self.shape[1], self.shape[2], self.shape[3]], data)
    }
}

fn check_shape(op: &'static str, shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(Error::InvalidShape {
            op,
            shape: shape.to_vec(),
            reason: "rank must be between 1 and 4",
        });
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::InvalidShape {
            op,
            shape: shape.to_vec(),
            reason: "extents must be positive",
        });
    }
    let mut n: usize = 1;
    for &d in shape {
        n = n.checked_mul(d).ok_or(Error::InvalidShape {
            op,
            shape: shape.to_vec(),
            reason: "element count overflows",
        })?;
    }
    Ok(())
}

/// `out = A·B` for row-major slices, each output element accumulated in f64.
///
/// Rows are distributed across threads; every element keeps a fixed
/// reduction order, so results are identical for any thread count.
pub(crate) fn matmul_into<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let row = |a_row: &[T], out_row: &mut [T], acc: &mut [f64]| {
        acc.fill(0.0);
        for (kk, &a_ik) in a_row.iter().enumerate() {
            let av = a_ik.to_f64();
            if av == 0.0 {
                continue;
            }
            let b_row = &b[kk * n..(kk + 1) * n];
            for (j, &bv) in b_row.iter().enumerate() {
                acc[j] += av * bv.to_f64();
            }
        }
        for (o, &v) in out_row.iter_mut().zip(acc.iter()) {
            *o = T::from_f64(v);
        }
    };
    if m * n >= PAR_MATMUL_MIN && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, out_row)| {
            let mut acc = vec![0.0f64; n];
            row(&a[i * k..(i + 1) * k], out_row, &mut acc);
        });
    } else {
        let mut acc = vec![0.0f64; n];
        for (i, out_row) in out.chunks_mut(n).enumerate() {
            row(&a[i * k..(i + 1) * k], out_row, &mut acc);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_pointwise() {
        let a = Tensor::from_vec(&[2], vec![1.0f32, 2.0]).unwrap();
        let b = Tensor::from_vec(&[2], vec![3.0f32, 4.0]).unwrap();
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn scale_by_zero() {
        let a = Tensor::from_vec(&[2], vec![1.0f32, -1.0]).unwrap();
        assert_eq!(a.scale(0.0).data(), &[0.0, 0.0]);
    }

    #[test]
    fn mul_by_ones_is_identity() {
        let a = Tensor::from_vec(&[4], vec![0.25f32, -3.5, 7.125, 0.1]).unwrap();
        assert_eq!(a.mul(&a.ones_like()).unwrap(), a);
    }

    #[test]
    fn add_shape_mismatch_names_both_shapes() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[3, 2]);
        match a.add(&b) {
            Err(Error::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![3, 2]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn matmul_identity() {
        let eye = Tensor::from_vec(&[2, 2], vec![1.0f32, 0.0, 0.0, 1.0]).unwrap();
        let m = Tensor::from_vec(&[2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(eye.matmul(&m).unwrap(), m);
    }

    #[test]
    fn matmul_row_times_column() {
        let a = Tensor::from_vec(&[1, 2], vec![1.0f32, 2.0]).unwrap();
        let b = Tensor::from_vec(&[2, 1], vec![3.0f32, 4.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_inner_mismatch() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Tensor::from_vec(&[2, 2], vec![1.0f32]).is_err());
    }

    #[test]
    fn rank_above_four_rejected() {
        assert!(Tensor::from_vec(&[1, 1, 1, 1, 1], vec![1.0f32]).is_err());
    }

    #[test]
    fn transpose_round_trip() {
        let a = Tensor::from_vec(&[2, 3], vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let t = a.transpose2().unwrap();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.transpose2().unwrap(), a);
    }
}
