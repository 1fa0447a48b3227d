//! Differentiable elementwise, reduction and shape ops.

use std::rc::Rc;

use crate::autograd::Var;
use crate::tensor::{broadcast_shapes, Tensor};

fn broadcast_pair(a: &Var, b: &Var) -> (Var, Var) {
    if a.shape() == b.shape() {
        return (a.clone(), b.clone());
    }
    let shape = broadcast_shapes(a.shape(), b.shape())
        .unwrap_or_else(|e| panic!("cannot broadcast: {e}"));
    (broadcast_to(a, &shape), broadcast_to(b, &shape))
}

pub fn broadcast_to(x: &Var, shape: &[usize]) -> Var {
    if x.shape() == shape {
        return x.clone();
    }
    let value = x
        .value()
        .broadcast_to(shape)
        .unwrap_or_else(|e| panic!("broadcast_to: {e}"));
    let src = x.shape().to_vec();
    Var::from_op(value, vec![x.clone()], move |_, g, _| {
        vec![Some(sum_to(g, &src))]
    })
}

pub fn sum_to(x: &Var, shape: &[usize]) -> Var {
    if x.shape() == shape {
        return x.clone();
    }
    let value = x
        .value()
        .sum_to(shape)
        .unwrap_or_else(|e| panic!("sum_to: {e}"));
    let src = x.shape().to_vec();
    Var::from_op(value, vec![x.clone()], move |_, g, _| {
        vec![Some(broadcast_to(g, &src))]
    })
}

pub fn add(a: &Var, b: &Var) -> Var {
    let (a, b) = broadcast_pair(a, b);
    let value = a.value().add(b.value());
    Var::from_op(value, vec![a, b], |_, g, _| vec![Some(g.clone()), Some(g.clone())])
}

pub fn sub(a: &Var, b: &Var) -> Var {
    let (a, b) = broadcast_pair(a, b);
    let value = a.value().sub(b.value());
    Var::from_op(value, vec![a, b], |_, g, _| vec![Some(g.clone()), Some(neg(g))])
}

pub fn mul(a: &Var, b: &Var) -> Var {
    let (a, b) = broadcast_pair(a, b);
    let value = a.value().zip_map(b.value(), |x, y| x * y);
    Var::from_op(value, vec![a, b], |_, g, p| {
        vec![Some(mul(g, &p[1])), Some(mul(g, &p[0]))]
    })
}

pub fn div(a: &Var, b: &Var) -> Var {
    let (a, b) = broadcast_pair(a, b);
    let value = a.value().zip_map(b.value(), |x, y| x / y);
    Var::from_op(value, vec![a, b], |out, g, p| {
        let ga = div(g, &p[1]);
        let gb = neg(&div(&mul(g, out), &p[1]));
        vec![Some(ga), Some(gb)]
    })
}

pub fn neg(x: &Var) -> Var {
    scale(x, -1.0)
}

pub fn scale(x: &Var, s: f64) -> Var {
    let value = x.value().scale(s);
    Var::from_op(value, vec![x.clone()], move |_, g, _| vec![Some(scale(g, s))])
}

pub fn add_scalar(x: &Var, s: f64) -> Var {
    let value = x.value().map(|v| v + s);
    Var::from_op(value, vec![x.clone()], |_, g, _| vec![Some(g.clone())])
}

/// Multiplies by a constant tensor of the same shape.
pub fn mul_const(x: &Var, c: &Tensor) -> Var {
    mul(x, &Var::constant(c.clone()))
}

pub fn exp(x: &Var) -> Var {
    let value = x.value().map(f64::exp);
    Var::from_op(value, vec![x.clone()], |out, g, _| vec![Some(mul(g, out))])
}

pub fn ln(x: &Var) -> Var {
    let value = x.value().map(f64::ln);
    Var::from_op(value, vec![x.clone()], |_, g, p| vec![Some(div(g, &p[0]))])
}

pub fn powf(x: &Var, e: f64) -> Var {
    let value = x.value().map(|v| v.powf(e));
    Var::from_op(value, vec![x.clone()], move |_, g, p| {
        vec![Some(mul(g, &scale(&powf(&p[0], e - 1.0), e)))]
    })
}

pub fn square(x: &Var) -> Var {
    mul(x, x)
}

/// `1/x`, with 0 mapped to 0.
pub fn safe_recip(x: &Var) -> Var {
    let value = x.value().map(|v| if v == 0.0 { 0.0 } else { 1.0 / v });
    Var::from_op(value, vec![x.clone()], |out, g, _| {
        vec![Some(neg(&mul(g, &square(out))))]
    })
}

/// Square root whose derivative at 0 is taken as 0.
pub fn sqrt(x: &Var) -> Var {
    let value = x.value().map(f64::sqrt);
    Var::from_op(value, vec![x.clone()], |out, g, _| {
        vec![Some(mul(g, &scale(&safe_recip(out), 0.5)))]
    })
}

pub(crate) fn sigmoid_f(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus_f(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else if v < -30.0 {
        v.exp()
    } else {
        v.exp().ln_1p()
    }
}

pub fn sigmoid(x: &Var) -> Var {
    let value = x.value().map(sigmoid_f);
    Var::from_op(value, vec![x.clone()], |out, g, _| {
        let one_minus = add_scalar(&neg(out), 1.0);
        vec![Some(mul(g, &mul(out, &one_minus)))]
    })
}

pub fn softplus(x: &Var) -> Var {
    let value = x.value().map(softplus_f);
    Var::from_op(value, vec![x.clone()], |_, g, p| vec![Some(mul(g, &sigmoid(&p[0])))])
}

pub fn leaky_relu(x: &Var, slope: f64) -> Var {
    let value = x.value().map(|v| if v > 0.0 { v } else { slope * v });
    Var::from_op(value, vec![x.clone()], move |_, g, p| {
        let mask = p[0].value().map(|v| if v > 0.0 { 1.0 } else { slope });
        vec![Some(mul_const(g, &mask))]
    })
}

pub fn relu(x: &Var) -> Var {
    leaky_relu(x, 0.0)
}

pub fn sum(x: &Var) -> Var {
    let value = Tensor::scalar(x.value().sum());
    let shape = x.shape().to_vec();
    Var::from_op(value, vec![x.clone()], move |_, g, _| {
        vec![Some(broadcast_to(g, &shape))]
    })
}

pub fn mean(x: &Var) -> Var {
    let n = x.value().numel().max(1) as f64;
    scale(&sum(x), 1.0 / n)
}

/// Sum keeping dims, reducing every axis where `keep[i]` is false.
pub fn sum_axes_keep(x: &Var, keep: &[bool]) -> Var {
    let shape: Vec<usize> = x
        .shape()
        .iter()
        .zip(keep)
        .map(|(&d, &k)| if k { d } else { 1 })
        .collect();
    sum_to(x, &shape)
}

pub fn reshape(x: &Var, shape: &[usize]) -> Var {
    if x.shape() == shape {
        return x.clone();
    }
    let value = x
        .value()
        .reshape(shape)
        .unwrap_or_else(|e| panic!("reshape: {e}"));
    let src = x.shape().to_vec();
    Var::from_op(value, vec![x.clone()], move |_, g, _| vec![Some(reshape(g, &src))])
}

pub fn narrow(x: &Var, axis: usize, start: usize, len: usize) -> Var {
    if start == 0 && len == x.shape()[axis] {
        return x.clone();
    }
    let value = x
        .value()
        .narrow(axis, start, len)
        .unwrap_or_else(|e| panic!("narrow: {e}"));
    let full = x.shape()[axis];
    Var::from_op(value, vec![x.clone()], move |_, g, _| {
        vec![Some(pad_axis(g, axis, start, full))]
    })
}

pub fn pad_axis(x: &Var, axis: usize, start: usize, full: usize) -> Var {
    let value = x
        .value()
        .pad_axis(axis, start, full)
        .unwrap_or_else(|e| panic!("pad_axis: {e}"));
    let len = x.shape()[axis];
    Var::from_op(value, vec![x.clone()], move |_, g, _| {
        vec![Some(narrow(g, axis, start, len))]
    })
}

pub fn concat(parts: &[Var], axis: usize) -> Var {
    if parts.len() == 1 {
        return parts[0].clone();
    }
    let values: Vec<&Tensor> = parts.iter().map(Var::value).collect();
    let value = Tensor::concat(&values, axis).unwrap_or_else(|e| panic!("concat: {e}"));
    let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
    Var::from_op(value, parts.to_vec(), move |_, g, _| {
        let mut start = 0;
        lens.iter()
            .map(|&len| {
                let piece = narrow(g, axis, start, len);
                start += len;
                Some(piece)
            })
            .collect()
    })
}

pub fn transpose2(x: &Var) -> Var {
    let value = x.value().transpose2();
    Var::from_op(value, vec![x.clone()], |_, g, _| vec![Some(transpose2(g))])
}

pub fn matmul(a: &Var, b: &Var) -> Var {
    let value = a
        .value()
        .matmul(b.value())
        .unwrap_or_else(|e| panic!("matmul: {e}"));
    Var::from_op(value, vec![a.clone(), b.clone()], |_, g, p| {
        vec![
            Some(matmul(g, &transpose2(&p[1]))),
            Some(matmul(&transpose2(&p[0]), g)),
        ]
    })
}

/// `out[i] = x.flat[index[i]]`, reshaped to `shape`.
pub fn gather(x: &Var, index: Rc<Vec<usize>>, shape: &[usize]) -> Var {
    let src = x.value().data();
    let data: Vec<f64> = index.iter().map(|&i| src[i]).collect();
    let value = Tensor::new(shape.to_vec(), data).unwrap_or_else(|e| panic!("gather: {e}"));
    let src_shape = x.shape().to_vec();
    Var::from_op(value, vec![x.clone()], move |_, g, _| {
        vec![Some(scatter_add(g, index.clone(), &src_shape))]
    })
}

/// Adjoint of [`gather`]: accumulates `x.flat[i]` into `out.flat[index[i]]`.
pub fn scatter_add(x: &Var, index: Rc<Vec<usize>>, shape: &[usize]) -> Var {
    let mut out = Tensor::zeros(shape);
    {
        let o = out.data_mut();
        for (&i, &v) in index.iter().zip(x.value().data()) {
            o[i] += v;
        }
    }
    let src_shape = x.shape().to_vec();
    Var::from_op(out, vec![x.clone()], move |_, g, _| {
        vec![Some(gather(g, index.clone(), &src_shape))]
    })
}

/// Max pooling over the last two axes of a `[.., H, W]` tensor, no padding.
pub fn max_pool2d(x: &Var, kernel: usize, stride: usize) -> Var {
    let shape = x.shape();
    let n = shape.len();
    assert!(n >= 2, "max_pool2d needs at least 2 dims");
    let (h, w) = (shape[n - 2], shape[n - 1]);
    assert!(h >= kernel && w >= kernel, "max_pool2d: input smaller than kernel");
    let ho = (h - kernel) / stride + 1;
    let wo = (w - kernel) / stride + 1;
    let planes = x.value().numel() / (h * w);
    let data = x.value().data();
    let mut index = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let i = base + (oy * stride + ky) * w + ox * stride + kx;
                        if data[i] > data[best] {
                            best = i;
                        }
                    }
                }
                index.push(best);
            }
        }
    }
    let mut out_shape = shape.to_vec();
    out_shape[n - 2] = ho;
    out_shape[n - 1] = wo;
    gather(x, Rc::new(index), &out_shape)
}
