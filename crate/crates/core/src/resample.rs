//! Separable linear resampling along tensor axes.
//!
//! Trilinear/bilinear interpolation and area averaging are both products of
//! 1-D linear maps, one per axis. A map and its transpose form a closed pair
//! under differentiation.

use std::rc::Rc;

use crate::autograd::Var;
use crate::tensor::Tensor;

/// Sparse `n_out × n_in` matrix stored row by row.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearMap1d {
    pub n_in: usize,
    pub n_out: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl LinearMap1d {
    /// Linear interpolation on cell centres (half-pixel aligned), clamped at the ends.
    pub fn interpolate(n_in: usize, n_out: usize) -> Self {
        assert!(n_in >= 1 && n_out >= 1);
        let scale = n_in as f64 / n_out as f64;
        let rows = (0..n_out)
            .map(|i| {
                if n_in == 1 {
                    return vec![(0, 1.0)];
                }
                let u = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = (u.floor() as usize).min(n_in - 2);
                let f = u - i0 as f64;
                let mut row = Vec::with_capacity(2);
                if f < 1.0 {
                    row.push((i0, 1.0 - f));
                }
                if f > 0.0 {
                    row.push((i0 + 1, f));
                }
                row
            })
            .collect();
        Self { n_in, n_out, rows }
    }

    /// Box-filter averaging with fractional overlaps.
    pub fn area(n_in: usize, n_out: usize) -> Self {
        assert!(n_in >= 1 && n_out >= 1);
        let width = n_in as f64 / n_out as f64;
        let rows = (0..n_out)
            .map(|j| {
                let lo = j as f64 * width;
                let hi = (j + 1) as f64 * width;
                let first = lo.floor() as usize;
                let last = (hi.ceil() as usize).min(n_in);
                (first..last)
                    .filter_map(|i| {
                        let ov = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                        (ov > 0.0).then_some((i, ov / width))
                    })
                    .collect()
            })
            .collect();
        Self { n_in, n_out, rows }
    }

    pub fn rows(&self) -> &[Vec<(usize, f64)>] {
        &self.rows
    }
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis + 1..].iter().product(),
    )
}

/// Applies `map` along `axis`.
pub fn apply_axis(x: &Tensor, axis: usize, map: &LinearMap1d) -> Tensor {
    let shape = x.shape();
    assert_eq!(shape[axis], map.n_in, "resample axis {axis} of {shape:?}");
    let (outer, inner) = outer_inner(shape, axis);
    let mut out_shape = shape.to_vec();
    out_shape[axis] = map.n_out;
    let mut out = vec![0.0; outer * map.n_out * inner];
    let src = x.data();
    crate::par::for_each_chunk_mut(&mut out, map.n_out * inner, |o, dst| {
        let base = o * map.n_in * inner;
        for (j, row) in map.rows.iter().enumerate() {
            let d = &mut dst[j * inner..(j + 1) * inner];
            for &(i, wgt) in row {
                let s = &src[base + i * inner..base + (i + 1) * inner];
                d.iter_mut().zip(s).for_each(|(a, b)| *a += wgt * b);
            }
        }
    });
    Tensor::from_parts(out_shape, out)
}

/// Applies the transpose of `map` along `axis`.
pub fn apply_axis_transpose(x: &Tensor, axis: usize, map: &LinearMap1d) -> Tensor {
    let shape = x.shape();
    assert_eq!(shape[axis], map.n_out);
    let (outer, inner) = outer_inner(shape, axis);
    let mut out_shape = shape.to_vec();
    out_shape[axis] = map.n_in;
    let mut out = vec![0.0; outer * map.n_in * inner];
    let src = x.data();
    crate::par::for_each_chunk_mut(&mut out, map.n_in * inner, |o, dst| {
        let base = o * map.n_out * inner;
        for (j, row) in map.rows.iter().enumerate() {
            let s = &src[base + j * inner..base + (j + 1) * inner];
            for &(i, wgt) in row {
                let d = &mut dst[i * inner..(i + 1) * inner];
                d.iter_mut().zip(s).for_each(|(a, b)| *a += wgt * b);
            }
        }
    });
    Tensor::from_parts(out_shape, out)
}

pub fn resample_axis(x: &Var, axis: usize, map: Rc<LinearMap1d>) -> Var {
    let value = apply_axis(x.value(), axis, &map);
    Var::from_op(value, vec![x.clone()], move |_, g, _| {
        vec![Some(resample_axis_transpose(g, axis, map.clone()))]
    })
}

pub fn resample_axis_transpose(x: &Var, axis: usize, map: Rc<LinearMap1d>) -> Var {
    let value = apply_axis_transpose(x.value(), axis, &map);
    Var::from_op(value, vec![x.clone()], move |_, g, _| {
        vec![Some(resample_axis(g, axis, map.clone()))]
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Filter {
    Linear,
    Area,
}

fn make_map(filter: Filter, n_in: usize, n_out: usize) -> LinearMap1d {
    match filter {
        Filter::Linear => LinearMap1d::interpolate(n_in, n_out),
        Filter::Area => LinearMap1d::area(n_in, n_out),
    }
}

/// Resizes the trailing `sizes.len()` axes of a tensor.
pub fn resize_trailing(x: &Tensor, sizes: &[usize], filter: Filter) -> Tensor {
    let n = x.ndim();
    let first = n - sizes.len();
    let mut cur = x.clone();
    for (k, &s) in sizes.iter().enumerate() {
        let axis = first + k;
        if cur.shape()[axis] != s {
            cur = apply_axis(&cur, axis, &make_map(filter, cur.shape()[axis], s));
        }
    }
    cur
}

/// Differentiable version of [`resize_trailing`].
pub fn resize_trailing_var(x: &Var, sizes: &[usize], filter: Filter) -> Var {
    let n = x.shape().len();
    let first = n - sizes.len();
    let mut cur = x.clone();
    for (k, &s) in sizes.iter().enumerate() {
        let axis = first + k;
        let n_in = cur.shape()[axis];
        if n_in != s {
            cur = resample_axis(&cur, axis, Rc::new(make_map(filter, n_in, s)));
        }
    }
    cur
}
