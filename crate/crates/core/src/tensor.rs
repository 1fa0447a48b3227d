//! Dense row-major `f64` tensors.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::ShapeMismatch {
                    expected: a.to_vec(),
                    actual: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::invalid(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// Panicking constructor for internal use where the size is known to match.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len(), "shape {shape:?}");
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    /// Unit Gaussian samples.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn randn_scaled<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let mut t = Self::randn(shape, rng);
        t.data.iter_mut().for_each(|x| *x *= std);
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.numel() {
            return Err(Error::ShapeMismatch {
                expected: shape.to_vec(),
                actual: self.shape.clone(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64 + Sync + Send) -> Self {
        Self {
            shape: self.shape.clone(),
            data: par::map_slice(&self.data, |&x| f(x)),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64 + Sync + Send) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Self {
            shape: self.shape.clone(),
            data: par::zip_map(&self.data, &other.data, |&a, &b| f(a, b)),
        }
    }

    pub fn add(&self, other: &Tensor) -> Self {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Self {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|x| x * s)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        self.data
            .iter_mut()
            .zip(other.data.iter())
            .for_each(|(a, b)| *a += b);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.numel().max(1) as f64
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Repeats size-1 (or missing leading) axes to reach `shape`.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Self> {
        if self.shape == shape {
            return Ok(self.clone());
        }
        let full = broadcast_shapes(&self.shape, shape)?;
        if full != shape {
            return Err(Error::ShapeMismatch {
                expected: shape.to_vec(),
                actual: self.shape.clone(),
            });
        }
        let n = shape.len();
        let offset = n - self.shape.len();
        let src_strides = strides(&self.shape);
        // Stride 0 on broadcast axes.
        let mut eff = vec![0usize; n];
        for i in 0..self.shape.len() {
            if self.shape[i] != 1 {
                eff[i + offset] = src_strides[i];
            }
        }
        let out_strides = strides(shape);
        let total = numel(shape);
        let data = par::map_range(total, |flat| {
            let mut rem = flat;
            let mut src = 0;
            for ax in 0..n {
                let idx = rem / out_strides[ax];
                rem %= out_strides[ax];
                src += idx * eff[ax];
            }
            self.data[src]
        });
        Ok(Self::from_parts(shape.to_vec(), data))
    }

    /// Sums over axes so the result has `shape` (the adjoint of `broadcast_to`).
    pub fn sum_to(&self, shape: &[usize]) -> Result<Self> {
        if self.shape == shape {
            return Ok(self.clone());
        }
        let full = broadcast_shapes(shape, &self.shape)?;
        if full != self.shape {
            return Err(Error::ShapeMismatch {
                expected: shape.to_vec(),
                actual: self.shape.clone(),
            });
        }
        let n = self.shape.len();
        let offset = n - shape.len();
        let dst_strides = strides(shape);
        let mut eff = vec![0usize; n];
        for i in 0..shape.len() {
            if shape[i] != 1 {
                eff[i + offset] = dst_strides[i];
            }
        }
        let src_strides = strides(&self.shape);
        let mut out = vec![0.0; numel(shape)];
        for (flat, &v) in self.data.iter().enumerate() {
            let mut rem = flat;
            let mut dst = 0;
            for ax in 0..n {
                let idx = rem / src_strides[ax];
                rem %= src_strides[ax];
                dst += idx * eff[ax];
            }
            out[dst] += v;
        }
        Ok(Self::from_parts(shape.to_vec(), out))
    }

    fn outer_inner(&self, axis: usize) -> (usize, usize) {
        let outer = numel(&self.shape[..axis]);
        let inner = numel(&self.shape[axis + 1..]);
        (outer, inner)
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.ndim() || start + len > self.shape[axis] {
            return Err(Error::invalid(format!(
                "narrow({axis}, {start}, {len}) out of range for {:?}",
                self.shape
            )));
        }
        let (outer, inner) = self.outer_inner(axis);
        let dim = self.shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Self::from_parts(shape, data))
    }

    /// Embeds `self` into zeros of extent `full` along `axis` at `start`.
    pub fn pad_axis(&self, axis: usize, start: usize, full: usize) -> Result<Self> {
        let len = self.shape[axis];
        if start + len > full {
            return Err(Error::invalid("pad_axis range"));
        }
        let (outer, inner) = self.outer_inner(axis);
        let mut shape = self.shape.clone();
        shape[axis] = full;
        let mut data = vec![0.0; numel(&shape)];
        for o in 0..outer {
            let dst = o * full * inner + start * inner;
            let src = o * len * inner;
            data[dst..dst + len * inner].copy_from_slice(&self.data[src..src + len * inner]);
        }
        Ok(Self::from_parts(shape, data))
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let mut shape = first.shape.clone();
        let mut total = 0;
        for p in parts {
            if p.ndim() != shape.len()
                || p.shape
                    .iter()
                    .enumerate()
                    .any(|(i, &d)| i != axis && d != shape[i])
            {
                return Err(Error::ShapeMismatch {
                    expected: first.shape.clone(),
                    actual: p.shape.clone(),
                });
            }
            total += p.shape[axis];
        }
        shape[axis] = total;
        let (outer, inner) = first.outer_inner(axis);
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for p in parts {
                let len = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * len..(o + 1) * len]);
            }
        }
        Ok(Self::from_parts(shape, data))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose2(&self) -> Self {
        assert_eq!(self.ndim(), 2);
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Self::from_parts(vec![c, r], data)
    }

    /// 2-D matrix product.
    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        if self.ndim() != 2 || other.ndim() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::ShapeMismatch {
                expected: self.shape.clone(),
                actual: other.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data, false, &other.data, false, &mut out, 0.0);
        Ok(Self::from_parts(vec![m, n], out))
    }
}

/// `c = a·b + beta·c` for row-major slices; `ta`/`tb` transpose the inputs.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: strides describe exactly the m×k, k×n and m×n buffers checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn broadcast_then_sum_is_scaled_identity() {
        let t = Tensor::new(vec![1, 3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let b = t.broadcast_to(&[2, 3, 4]).unwrap();
        assert_eq!(b.shape(), &[2, 3, 4]);
        assert_eq!(b.data()[4], 2.0);
        let s = b.sum_to(&[1, 3, 1]).unwrap();
        assert_eq!(s.data(), &[8.0, 16.0, 24.0]);
    }

    #[test]
    fn narrow_pad_concat() {
        let t = Tensor::new(vec![2, 3], vec![0., 1., 2., 3., 4., 5.]).unwrap();
        let n = t.narrow(1, 1, 2).unwrap();
        assert_eq!(n.data(), &[1., 2., 4., 5.]);
        let p = n.pad_axis(1, 1, 3).unwrap();
        assert_eq!(p.data(), &[0., 1., 2., 0., 4., 5.]);
        let a = t.narrow(1, 0, 1).unwrap();
        let c = Tensor::concat(&[&a, &n], 1).unwrap();
        assert_eq!(c, t);
    }

    #[test]
    fn matmul_matches_naive() {
        let a = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::new(vec![3, 2], vec![7., 8., 9., 10., 11., 12.]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[58., 64., 139., 154.]);
        let mut out2 = vec![0.0; 4];
        gemm(2, 3, 2, &a.transpose2().data, true, &b.transpose2().data, true, &mut out2, 0.0);
        assert_eq!(out2, c.data());
    }

    #[test]
    fn bad_shapes_rejected() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(broadcast_shapes(&[2, 3], &[4, 3]).is_err());
        assert_eq!(broadcast_shapes(&[3], &[2, 1]).unwrap(), vec![2, 3]);
    }

    proptest! {
        #[test]
        fn sum_to_is_adjoint_of_broadcast(vals in proptest::collection::vec(-3.0f64..3.0, 6),
                                          g in proptest::collection::vec(-3.0f64..3.0, 24)) {
            let x = Tensor::new(vec![1, 6, 1], vals).unwrap();
            let gy = Tensor::new(vec![2, 6, 2], g).unwrap();
            let lhs: f64 = x.broadcast_to(&[2, 6, 2]).unwrap().data().iter()
                .zip(gy.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data().iter()
                .zip(gy.sum_to(&[1, 6, 1]).unwrap().data()).map(|(a, b)| a * b).sum();
            prop_assert!((lhs - rhs).abs() < 1e-9);
        }
    }
}
