//! Differentiable emission-absorption ray marching.
//!
//! Samples sit at interval midpoints between the near and far bound. Density
//! goes through softplus and colour through sigmoid. Samples outside the volume
//! box are empty. Residual transmittance contributes black colour and the far
//! bound as depth.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::camera::{generate_rays, Camera, Ray};
use crate::error::{Error, Result};
use crate::ops::{sigmoid_f, softplus_f};
use crate::tensor::Tensor;
use crate::volume::{locate, Aabb, RadianceVolume};

/// Uniform sampling with `samples` points per ray.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RaySampleSpec {
    pub samples: usize,
}

impl RaySampleSpec {
    pub fn new(samples: usize) -> Result<Self> {
        if samples == 0 {
            return Err(Error::invalid("samples per ray must be >= 1"));
        }
        Ok(Self { samples })
    }

    /// Sample positions along a ray and the shared spacing.
    pub fn positions(&self, near: f64, far: f64) -> (Vec<f64>, f64) {
        let delta = (far - near) / self.samples as f64;
        let t = (0..self.samples)
            .map(|i| near + (i as f64 + 0.5) * delta)
            .collect();
        (t, delta)
    }
}

/// Per-scale sample count, a rounded linear ramp from 64 to 128.
pub fn samples_for_scale(scale: usize, num_scales: usize) -> usize {
    if num_scales <= 1 {
        return 128;
    }
    let f = (scale.saturating_sub(1)) as f64 / (num_scales - 1) as f64;
    (64.0 + 64.0 * f.clamp(0.0, 1.0)).round() as usize
}

/// Colour `[3,H,W]`, depth `[1,H,W]` and opacity `[1,H,W]` images.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub color: Tensor,
    pub depth: Tensor,
    pub opacity: Tensor,
}

impl RenderOutput {
    fn from_packed(packed: &Tensor, width: usize, height: usize) -> Self {
        let p = packed.reshape(&[5, height, width]).expect("packed render shape");
        Self {
            color: p.narrow(0, 0, 3).unwrap(),
            depth: p.narrow(0, 3, 1).unwrap(),
            opacity: p.narrow(0, 4, 1).unwrap(),
        }
    }
}

/// A channel-first `[4,W,H,U]` volume borrowed for sampling.
#[derive(Clone, Copy)]
struct Field<'a> {
    data: &'a [f64],
    dims: [usize; 3],
    bounds: &'a Aabb,
}

impl Field<'_> {
    fn voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    fn corners(&self, p: [f64; 3]) -> [(usize, f64); 8] {
        let cell = locate(p, self.dims, self.bounds);
        let [_, h, u] = self.dims;
        cell.corners().map(|(i, w)| ((i[0] * h + i[1]) * u + i[2], w))
    }

    fn sample(&self, corners: &[(usize, f64); 8]) -> [f64; 4] {
        let n = self.voxels();
        let mut out = [0.0; 4];
        for &(v, w) in corners {
            for (c, o) in out.iter_mut().enumerate() {
                *o += w * self.data[c * n + v];
            }
        }
        out
    }
}

fn point(ray: &Ray, t: f64) -> [f64; 3] {
    [
        ray.origin[0] + t * ray.dir[0],
        ray.origin[1] + t * ray.dir[1],
        ray.origin[2] + t * ray.dir[2],
    ]
}

/// Marches one ray. With `grad = Some((g, buf))` also accumulates
/// `gᵀ · ∂out/∂volume` into `buf` (same layout as the volume).
fn march(
    field: Field<'_>,
    ray: &Ray,
    spec: RaySampleSpec,
    grad: Option<(&[f64; 5], &mut [f64])>,
) -> [f64; 5] {
    let (ts, delta) = spec.positions(ray.near, ray.far);
    let m = ts.len();
    let mut sig = vec![0.0; m];
    let mut col = vec![[0.0; 3]; m];
    let mut raw = vec![[0.0; 4]; m];
    let mut inside = vec![false; m];
    let mut corners = vec![[(0usize, 0.0f64); 8]; m];
    for i in 0..m {
        let p = point(ray, ts[i]);
        if !field.bounds.contains(p) {
            continue;
        }
        inside[i] = true;
        corners[i] = field.corners(p);
        let r = field.sample(&corners[i]);
        raw[i] = r;
        sig[i] = softplus_f(r[3]);
        col[i] = [sigmoid_f(r[0]), sigmoid_f(r[1]), sigmoid_f(r[2])];
    }

    // Forward compositing, keeping T_i and w_i for the backward sweep.
    let mut trans = vec![0.0; m + 1];
    let mut w = vec![0.0; m];
    trans[0] = 1.0;
    let mut acc = 0.0;
    let mut out = [0.0; 5];
    for i in 0..m {
        let alpha = 1.0 - (-sig[i] * delta).exp();
        w[i] = trans[i] * alpha;
        for c in 0..3 {
            out[c] += w[i] * col[i][c];
        }
        out[3] += w[i] * ts[i];
        acc += sig[i] * delta;
        trans[i + 1] = (-acc).exp();
    }
    let t_end = trans[m];
    out[3] += t_end * ray.far;
    out[4] = 1.0 - t_end;

    let Some((g, buf)) = grad else {
        return out;
    };
    let n = field.voxels();
    // suffix = Σ_{k>i} w_k (g·c_k + g_d t_k) + g_d T_{M+1} t_f
    let mut suffix = g[3] * t_end * ray.far;
    for i in (0..m).rev() {
        let gc = g[0] * col[i][0] + g[1] * col[i][1] + g[2] * col[i][2];
        let own = gc + g[3] * ts[i];
        if inside[i] {
            let d_sigma = delta * (trans[i + 1] * own - suffix) + g[4] * delta * t_end;
            let mut d_raw = [0.0; 4];
            for c in 0..3 {
                d_raw[c] = g[c] * w[i] * col[i][c] * (1.0 - col[i][c]);
            }
            d_raw[3] = d_sigma * sigmoid_f(raw[i][3]);
            for &(v, cw) in &corners[i] {
                if cw == 0.0 {
                    continue;
                }
                for c in 0..4 {
                    buf[c * n + v] += cw * d_raw[c];
                }
            }
        }
        suffix += w[i] * own;
    }
    out
}

fn unpack_dims(shape: &[usize]) -> Result<[usize; 3]> {
    match shape {
        [4, w, h, u] | [1, 4, w, h, u] => Ok([*w, *h, *u]),
        other => Err(Error::invalid(format!(
            "render expects a [4, W, H, U] volume, got {other:?}"
        ))),
    }
}

/// Packed `[5, R]` output: RGB, depth, opacity per ray.
pub fn render_rays_tensor(
    volume: &Tensor,
    bounds: &Aabb,
    rays: &[Ray],
    spec: RaySampleSpec,
) -> Result<Tensor> {
    let dims = unpack_dims(volume.shape())?;
    let field = Field {
        data: volume.data(),
        dims,
        bounds,
    };
    let per_ray = crate::par::map_range(rays.len(), |i| march(field, &rays[i], spec, None));
    let n = rays.len();
    let mut data = vec![0.0; 5 * n];
    for (r, o) in per_ray.iter().enumerate() {
        for c in 0..5 {
            data[c * n + r] = o[c];
        }
    }
    Ok(Tensor::from_parts(vec![5, n], data))
}

/// Upper bound on scratch memory (in f64s) for backward accumulation buffers.
const GRAD_SCRATCH: usize = 1 << 24;

/// Vector-Jacobian product of [`render_rays_tensor`] with `grad_out` (`[5, R]`).
pub fn render_rays_vjp(
    volume: &Tensor,
    bounds: &Aabb,
    rays: &[Ray],
    spec: RaySampleSpec,
    grad_out: &Tensor,
) -> Result<Tensor> {
    let dims = unpack_dims(volume.shape())?;
    let n_rays = rays.len();
    if grad_out.shape() != [5, n_rays] {
        return Err(Error::ShapeMismatch {
            expected: vec![5, n_rays],
            actual: grad_out.shape().to_vec(),
        });
    }
    let field = Field {
        data: volume.data(),
        dims,
        bounds,
    };
    let size = volume.numel();
    // Chunk count depends only on sizes, so the summation order is fixed.
    let chunks = (GRAD_SCRATCH / size.max(1)).clamp(1, 8).min(n_rays.max(1));
    let per = n_rays.div_ceil(chunks).max(1);
    let g = grad_out.data();
    let partials = crate::par::map_range(chunks, |k| {
        let mut buf = vec![0.0; size];
        let lo = (k * per).min(n_rays);
        let hi = ((k + 1) * per).min(n_rays);
        for r in lo..hi {
            let gr = [
                g[r],
                g[n_rays + r],
                g[2 * n_rays + r],
                g[3 * n_rays + r],
                g[4 * n_rays + r],
            ];
            if gr.iter().all(|v| *v == 0.0) {
                continue;
            }
            march(field, &rays[r], spec, Some((&gr, &mut buf)));
        }
        buf
    });
    let mut total = vec![0.0; size];
    for p in partials {
        total.iter_mut().zip(p).for_each(|(a, b)| *a += b);
    }
    Ok(Tensor::from_parts(volume.shape().to_vec(), total))
}

/// Differentiable render of `rays` through a `[4,W,H,U]` volume variable.
///
/// The returned gradient is first-order only.
pub fn render_rays(
    volume: &Var,
    bounds: Aabb,
    rays: Rc<Vec<Ray>>,
    spec: RaySampleSpec,
) -> Result<Var> {
    let value = render_rays_tensor(volume.value(), &bounds, &rays, spec)?;
    Ok(Var::from_op(value, vec![volume.clone()], move |_, g, parents| {
        let vjp = render_rays_vjp(parents[0].value(), &bounds, &rays, spec, g.value())
            .expect("render backward shapes are checked in forward");
        vec![Some(Var::constant(vjp))]
    }))
}

/// Renders a full image from a volume.
pub fn render(volume: &RadianceVolume, camera: &Camera, spec: RaySampleSpec) -> Result<RenderOutput> {
    let rays = generate_rays(camera)?;
    let packed = render_rays_tensor(&volume.to_tensor(), &volume.bounds(), &rays, spec)?;
    Ok(RenderOutput::from_packed(&packed, camera.width, camera.height))
}

/// Differentiable full-image render; returns `[5,H,W]` packed channels.
pub fn render_var(
    volume: &Var,
    bounds: Aabb,
    camera: &Camera,
    spec: RaySampleSpec,
) -> Result<Var> {
    let rays = generate_rays(camera)?;
    let packed = render_rays(volume, bounds, Rc::new(rays), spec)?;
    Ok(crate::ops::reshape(&packed, &[5, camera.height, camera.width]))
}

/// Observed depth of a dataset view at `w × h`.
pub fn render_depth_real(view: &crate::dataio::CameraView, w: usize, h: usize) -> Result<Tensor> {
    view.depth_at(w, h)
}
