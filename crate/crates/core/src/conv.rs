//! 3-D convolution (2-D as the depth-1 special case) via im2col + gemm.
//!
//! Three bilinear ops close under differentiation:
//! `conv(x, w)`, its input adjoint `conv_input_grad(g, w)` and its weight
//! adjoint `conv_weight_grad(x, g)`. Each one's backward is written with the
//! other two, so arbitrarily high derivative orders are available.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::par;
use crate::tensor::{gemm, Tensor};

/// Kernel, stride and zero padding per spatial axis (depth, height, width).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeom {
    pub fn cube(k: usize, pad: usize) -> Self {
        Self {
            kernel: [k; 3],
            stride: [1; 3],
            pad: [pad; 3],
        }
    }

    /// A 2-D `k×k` kernel on depth-1 volumes.
    pub fn square(k: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel: [1, k, k],
            stride: [1, stride, stride],
            pad: [0, pad, pad],
        }
    }

    pub fn out_dims(&self, input: [usize; 3]) -> [usize; 3] {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.pad[a];
            assert!(
                padded >= self.kernel[a],
                "input extent {} (padded {}) smaller than kernel {}",
                input[a],
                padded,
                self.kernel[a]
            );
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        out
    }

    fn kvol(&self) -> usize {
        self.kernel.iter().product()
    }
}

fn dims5(shape: &[usize]) -> (usize, usize, [usize; 3]) {
    assert_eq!(shape.len(), 5, "conv expects [B, C, D, H, W], got {shape:?}");
    (shape[0], shape[1], [shape[2], shape[3], shape[4]])
}

const CHUNK_BUDGET: usize = 1 << 22;

/// Output-depth slabs so one im2col buffer stays under the budget.
fn depth_chunks(k_rows: usize, out: [usize; 3]) -> Vec<(usize, usize)> {
    let plane = out[1] * out[2];
    let per = (CHUNK_BUDGET / (k_rows * plane).max(1)).max(1);
    (0..out[0])
        .step_by(per)
        .map(|s| (s, (s + per).min(out[0])))
        .collect()
}

/// Unfolds one batch element into `[C·kvol, P]` columns for output depths `od0..od1`.
fn im2col(
    x: &[f64],
    channels: usize,
    input: [usize; 3],
    geom: &ConvGeom,
    out: [usize; 3],
    (od0, od1): (usize, usize),
) -> Vec<f64> {
    let [kd, kh, kw] = geom.kernel;
    let p = (od1 - od0) * out[1] * out[2];
    let rows = channels * kd * kh * kw;
    let mut col = vec![0.0; rows * p];
    let in_plane = input[1] * input[2];
    let in_vol = input[0] * in_plane;
    par::for_each_chunk_mut(&mut col, p.max(1), |row, dst| {
        let c = row / (kd * kh * kw);
        let r = row % (kd * kh * kw);
        let (a, b, e) = (r / (kh * kw), (r / kw) % kh, r % kw);
        let src = &x[c * in_vol..(c + 1) * in_vol];
        let mut j = 0;
        for od in od0..od1 {
            let id = (od * geom.stride[0] + a) as isize - geom.pad[0] as isize;
            for oh in 0..out[1] {
                let ih = (oh * geom.stride[1] + b) as isize - geom.pad[1] as isize;
                for ow in 0..out[2] {
                    let iw = (ow * geom.stride[2] + e) as isize - geom.pad[2] as isize;
                    dst[j] = if id >= 0
                        && ih >= 0
                        && iw >= 0
                        && (id as usize) < input[0]
                        && (ih as usize) < input[1]
                        && (iw as usize) < input[2]
                    {
                        src[id as usize * in_plane + ih as usize * input[2] + iw as usize]
                    } else {
                        0.0
                    };
                    j += 1;
                }
            }
        }
    });
    col
}

/// Folds columns back, accumulating into `dx` (one batch element).
fn col2im(
    col: &[f64],
    dx: &mut [f64],
    channels: usize,
    input: [usize; 3],
    geom: &ConvGeom,
    out: [usize; 3],
    (od0, od1): (usize, usize),
) {
    let [kd, kh, kw] = geom.kernel;
    let kvol = kd * kh * kw;
    let p = (od1 - od0) * out[1] * out[2];
    let in_plane = input[1] * input[2];
    let in_vol = input[0] * in_plane;
    debug_assert_eq!(dx.len(), channels * in_vol);
    par::for_each_chunk_mut(dx, in_vol, |c, dst| {
        for r in 0..kvol {
            let (a, b, e) = (r / (kh * kw), (r / kw) % kh, r % kw);
            let src = &col[(c * kvol + r) * p..(c * kvol + r + 1) * p];
            let mut j = 0;
            for od in od0..od1 {
                let id = (od * geom.stride[0] + a) as isize - geom.pad[0] as isize;
                for oh in 0..out[1] {
                    let ih = (oh * geom.stride[1] + b) as isize - geom.pad[1] as isize;
                    for ow in 0..out[2] {
                        let iw = (ow * geom.stride[2] + e) as isize - geom.pad[2] as isize;
                        if id >= 0
                            && ih >= 0
                            && iw >= 0
                            && (id as usize) < input[0]
                            && (ih as usize) < input[1]
                            && (iw as usize) < input[2]
                        {
                            dst[id as usize * in_plane + ih as usize * input[2] + iw as usize] +=
                                src[j];
                        }
                        j += 1;
                    }
                }
            }
        }
    });
}

/// Columns `[c0·plane, c1·plane)` of every row of a `[rows, total]` matrix.
fn take_cols(m: &[f64], rows: usize, total: usize, c0: usize, c1: usize) -> Vec<f64> {
    let w = c1 - c0;
    let mut out = Vec::with_capacity(rows * w);
    for r in 0..rows {
        out.extend_from_slice(&m[r * total + c0..r * total + c1]);
    }
    out
}

pub fn conv_forward(x: &Tensor, w: &Tensor, geom: &ConvGeom) -> Tensor {
    let (b, ci, input) = dims5(x.shape());
    let (co, wci, _) = dims5(w.shape());
    assert_eq!(ci, wci, "conv channel mismatch: input {ci}, weight {wci}");
    let out = geom.out_dims(input);
    let k = ci * geom.kvol();
    let p_total = out.iter().product::<usize>();
    let in_len = ci * input.iter().product::<usize>();
    let plane = out[1] * out[2];
    let chunks = depth_chunks(k, out);
    let per_batch = par::map_range(b, |bi| {
        let xb = &x.data()[bi * in_len..(bi + 1) * in_len];
        let mut yb = vec![0.0; co * p_total];
        for &(od0, od1) in &chunks {
            let col = im2col(xb, ci, input, geom, out, (od0, od1));
            let pc = (od1 - od0) * plane;
            if chunks.len() == 1 {
                gemm(co, k, pc, w.data(), false, &col, false, &mut yb, 0.0);
            } else {
                let mut tmp = vec![0.0; co * pc];
                gemm(co, k, pc, w.data(), false, &col, false, &mut tmp, 0.0);
                for r in 0..co {
                    yb[r * p_total + od0 * plane..r * p_total + od1 * plane]
                        .copy_from_slice(&tmp[r * pc..(r + 1) * pc]);
                }
            }
        }
        yb
    });
    Tensor::from_parts(vec![b, co, out[0], out[1], out[2]], per_batch.concat())
}

pub fn conv_input_grad_t(g: &Tensor, w: &Tensor, x_shape: &[usize], geom: &ConvGeom) -> Tensor {
    let (b, ci, input) = dims5(x_shape);
    let (co, _, _) = dims5(w.shape());
    let out = geom.out_dims(input);
    assert_eq!(
        g.shape(),
        &[b, co, out[0], out[1], out[2]],
        "conv_input_grad: gradient shape"
    );
    let k = ci * geom.kvol();
    let p_total = out.iter().product::<usize>();
    let in_len = ci * input.iter().product::<usize>();
    let plane = out[1] * out[2];
    let chunks = depth_chunks(k, out);
    let per_batch = par::map_range(b, |bi| {
        let gb = &g.data()[bi * co * p_total..(bi + 1) * co * p_total];
        let mut dx = vec![0.0; in_len];
        for &(od0, od1) in &chunks {
            let pc = (od1 - od0) * plane;
            let gc;
            let gslice = if chunks.len() == 1 {
                gb
            } else {
                gc = take_cols(gb, co, p_total, od0 * plane, od1 * plane);
                &gc[..]
            };
            let mut col = vec![0.0; k * pc];
            gemm(k, co, pc, w.data(), true, gslice, false, &mut col, 0.0);
            col2im(&col, &mut dx, ci, input, geom, out, (od0, od1));
        }
        dx
    });
    Tensor::from_parts(x_shape.to_vec(), per_batch.concat())
}

pub fn conv_weight_grad_t(x: &Tensor, g: &Tensor, w_shape: &[usize], geom: &ConvGeom) -> Tensor {
    let (b, ci, input) = dims5(x.shape());
    let (co, _, _) = dims5(w_shape);
    let out = geom.out_dims(input);
    assert_eq!(g.shape(), &[b, co, out[0], out[1], out[2]], "conv_weight_grad: gradient shape");
    let k = ci * geom.kvol();
    let p_total = out.iter().product::<usize>();
    let in_len = ci * input.iter().product::<usize>();
    let plane = out[1] * out[2];
    let chunks = depth_chunks(k, out);
    let partial = par::map_range(b, |bi| {
        let xb = &x.data()[bi * in_len..(bi + 1) * in_len];
        let gb = &g.data()[bi * co * p_total..(bi + 1) * co * p_total];
        let mut dw = vec![0.0; co * k];
        for &(od0, od1) in &chunks {
            let pc = (od1 - od0) * plane;
            let col = im2col(xb, ci, input, geom, out, (od0, od1));
            let gc;
            let gslice = if chunks.len() == 1 {
                gb
            } else {
                gc = take_cols(gb, co, p_total, od0 * plane, od1 * plane);
                &gc[..]
            };
            gemm(co, pc, k, gslice, false, &col, true, &mut dw, 1.0);
        }
        dw
    });
    let mut dw = vec![0.0; co * k];
    for p in partial {
        dw.iter_mut().zip(p).for_each(|(a, b)| *a += b);
    }
    Tensor::from_parts(w_shape.to_vec(), dw)
}

/// Differentiable convolution without bias.
pub fn conv(x: &Var, w: &Var, geom: ConvGeom) -> Var {
    let value = conv_forward(x.value(), w.value(), &geom);
    let x_shape = x.shape().to_vec();
    let w_shape = w.shape().to_vec();
    Var::from_op(value, vec![x.clone(), w.clone()], move |_, g, p| {
        let dx = p[0]
            .requires_grad()
            .then(|| conv_input_grad(g, &p[1], &x_shape, geom));
        let dw = p[1]
            .requires_grad()
            .then(|| conv_weight_grad(&p[0], g, &w_shape, geom));
        vec![dx, dw]
    })
}

pub fn conv_input_grad(g: &Var, w: &Var, x_shape: &[usize], geom: ConvGeom) -> Var {
    let value = conv_input_grad_t(g.value(), w.value(), x_shape, &geom);
    let w_shape = w.shape().to_vec();
    Var::from_op(value, vec![g.clone(), w.clone()], move |_, gbar, p| {
        let dg = p[0].requires_grad().then(|| conv(gbar, &p[1], geom));
        let dw = p[1]
            .requires_grad()
            .then(|| conv_weight_grad(gbar, &p[0], &w_shape, geom));
        vec![dg, dw]
    })
}

pub fn conv_weight_grad(x: &Var, g: &Var, w_shape: &[usize], geom: ConvGeom) -> Var {
    let value = conv_weight_grad_t(x.value(), g.value(), w_shape, &geom);
    let x_shape = x.shape().to_vec();
    Var::from_op(value, vec![x.clone(), g.clone()], move |_, wbar, p| {
        let dx = p[0]
            .requires_grad()
            .then(|| conv_input_grad(&p[1], wbar, &x_shape, geom));
        let dg = p[1].requires_grad().then(|| conv(&p[0], wbar, geom));
        vec![dx, dg]
    })
}

/// Convolution of a `[B, C, H, W]` image through the depth-1 path.
pub fn conv2d(x: &Var, w: &Var, geom: ConvGeom) -> Var {
    use crate::ops::reshape;
    let s = x.shape().to_vec();
    assert_eq!(s.len(), 4, "conv2d expects [B, C, H, W]");
    let ws = w.shape().to_vec();
    let x5 = reshape(x, &[s[0], s[1], 1, s[2], s[3]]);
    let w5 = reshape(w, &[ws[0], ws[1], 1, ws[2], ws[3]]);
    let y = conv(&x5, &w5, geom);
    let ys = y.shape().to_vec();
    reshape(&y, &[ys[0], ys[1], ys[3], ys[4]])
}
