//! Scene animation, voxel editing, harmonisation and mesh export.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use mcubes::{MarchingCubes, MeshSide};
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::io::{encode_rgb_png, write_atomic, write_json};
use crate::ops::{sigmoid_f, softplus_f};
use crate::pyramid::{rng_for, GeneratorStack, NoiseStack};
use crate::tensor::Tensor;
use crate::volume::{Aabb, RadianceVolume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnimationConfig {
    pub alpha: f64,
    pub xi: f64,
    pub steps: usize,
    pub start_scale: usize,
    pub seed: u64,
}

impl Default for AnimationConfig {
    fn default() -> Self {
        Self {
            alpha: 0.58,
            xi: 0.45,
            steps: 10,
            start_scale: 3,
            seed: 0,
        }
    }
}

impl AnimationConfig {
    pub fn validate(&self, num_scales: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) || !(0.0..=1.0).contains(&self.xi) {
            return Err(Error::invalid("alpha and xi must lie in [0, 1]"));
        }
        if self.steps == 0 {
            return Err(Error::invalid("animation needs at least one step"));
        }
        if self.start_scale == 0 || self.start_scale >= num_scales {
            return Err(Error::invalid(format!(
                "start_scale must lie in 1..={}",
                num_scales - 1
            )));
        }
        Ok(())
    }
}

/// Noise walk with caller-supplied innovations `mus[t][k]` for step `t+2`
/// and the `k`-th animated scale (ascending from `start_scale`).
pub fn animate_noise_with_innovations(
    base: &NoiseStack,
    config: &AnimationConfig,
    mus: &[Vec<Tensor>],
) -> Result<Vec<NoiseStack>> {
    let first = config.start_scale - 1;
    let animated = base.volumes.len().saturating_sub(first);
    if mus.len() + 1 < config.steps || mus.iter().any(|m| m.len() != animated) {
        return Err(Error::invalid("innovation list does not cover every step and scale"));
    }
    let (a, xi) = (config.alpha, config.xi);
    let mut frames = vec![base.clone()];
    let mut prev = base.clone();
    for t in 1..config.steps {
        let cur = frames[t - 1].clone();
        let mut next = cur.clone();
        for (k, i) in (first..base.volumes.len()).enumerate() {
            let (z1, zt, zp) = (base.volumes[i].data(), cur.volumes[i].data(), prev.volumes[i].data());
            let mu = mus[t - 1][k].data();
            for (j, out) in next.volumes[i].data_mut().iter_mut().enumerate() {
                let delta = xi * (zt[j] - zp[j]) + (1.0 - xi) * mu[j];
                *out = a * z1[j] + (1.0 - a) * (zt[j] + delta);
            }
        }
        prev = cur;
        frames.push(next);
    }
    Ok(frames)
}

/// `T` noise stacks; the first is `base`, later ones follow the momentum walk.
pub fn animate_noise(base: &NoiseStack, config: &AnimationConfig) -> Result<Vec<NoiseStack>> {
    let num_scales = base.volumes.len() + 1;
    config.validate(num_scales)?;
    let mut rng = rng_for(config.seed, 0x414e_494d);
    let mus: Vec<Vec<Tensor>> = (1..config.steps)
        .map(|_| {
            base.volumes[config.start_scale - 1..]
                .iter()
                .map(|z| Tensor::randn(z.shape(), &mut rng))
                .collect()
        })
        .collect();
    animate_noise_with_innovations(base, config, &mus)
}

/// Final-resolution frames `[3,S,S]`, one per noise stack of the walk.
pub fn animate(
    stack: &GeneratorStack,
    base: &NoiseStack,
    config: &AnimationConfig,
    camera: &Camera,
) -> Result<Vec<Tensor>> {
    config.validate(stack.num_scales())?;
    animate_noise(base, config)?
        .iter()
        .map(|noise| stack.render_final(&stack.sample_volume(noise)?, camera))
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FrameIndex {
    pub count: usize,
    pub width: usize,
    pub height: usize,
    pub frames: Vec<String>,
}

/// Writes `frame_0000.png…` plus `index.json` into `dir`.
pub fn write_frames(dir: &Path, frames: &[Tensor]) -> Result<PathBuf> {
    let mut names = Vec::with_capacity(frames.len());
    for (i, f) in frames.iter().enumerate() {
        let name = format!("frame_{i:04}.png");
        write_atomic(&dir.join(&name), &encode_rgb_png(f)?)?;
        names.push(name);
    }
    let (height, width) = frames.first().map_or((0, 0), |f| (f.shape()[1], f.shape()[2]));
    let path = dir.join("index.json");
    write_json(
        &path,
        &FrameIndex {
            count: frames.len(),
            width,
            height,
            frames: names,
        },
    )?;
    Ok(path)
}

/// Axis-aligned box in scene coordinates; a voxel belongs to it when its
/// centre lies in `[min, max)` on every axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditMask {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl EditMask {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Self {
        Self { min, max }
    }

    pub fn validate(&self, bounds: &Aabb) -> Result<()> {
        const TOL: f64 = 1e-9;
        for a in 0..3 {
            if !(self.min[a].is_finite() && self.max[a].is_finite()) || self.min[a] > self.max[a] {
                return Err(Error::invalid(format!("mask axis {a}: min must not exceed max")));
            }
            if self.min[a] < bounds.min[a] - TOL || self.max[a] > bounds.max[a] + TOL {
                return Err(Error::invalid(format!(
                    "mask [{:?}, {:?}] leaves the scene bounds",
                    self.min, self.max
                )));
            }
        }
        Ok(())
    }

    /// Voxel index ranges `[start, end)` per axis.
    pub fn voxel_ranges(&self, volume: &RadianceVolume) -> Result<[std::ops::Range<usize>; 3]> {
        self.validate(&volume.bounds())?;
        let dims = volume.dims();
        let range = |a: usize| {
            let inside: Vec<usize> = (0..dims[a])
                .filter(|&i| {
                    let mut idx = [0; 3];
                    idx[a] = i;
                    let c = volume.voxel_center(idx[0], idx[1], idx[2])[a];
                    c >= self.min[a] && c < self.max[a]
                })
                .collect();
            match (inside.first(), inside.last()) {
                (Some(&s), Some(&e)) => s..e + 1,
                _ => 0..0,
            }
        };
        Ok([range(0), range(1), range(2)])
    }
}

/// Raw colour and density written into removed voxels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmptySample {
    pub color_raw: [f32; 3],
    pub sigma_raw: f32,
}

impl Default for EmptySample {
    fn default() -> Self {
        Self {
            color_raw: [0.0; 3],
            sigma_raw: -20.0,
        }
    }
}

impl EmptySample {
    /// Interpolated raw values at a point the user marked as empty.
    pub fn at(volume: &RadianceVolume, p: [f64; 3]) -> Self {
        let v = volume.sample(p);
        Self {
            color_raw: [v[0] as f32, v[1] as f32, v[2] as f32],
            sigma_raw: v[3] as f32,
        }
    }

    fn voxel(&self) -> [f32; 4] {
        [self.color_raw[0], self.color_raw[1], self.color_raw[2], self.sigma_raw]
    }
}

pub fn edit_remove(volume: &RadianceVolume, mask: &EditMask, empty: EmptySample) -> Result<RadianceVolume> {
    let [rx, ry, rz] = mask.voxel_ranges(volume)?;
    let mut out = volume.clone();
    let e = empty.voxel();
    for x in rx {
        for y in ry.clone() {
            for z in rz.clone() {
                out.set_voxel(x, y, z, e);
            }
        }
    }
    Ok(out)
}

fn extents(r: &[std::ops::Range<usize>; 3]) -> [usize; 3] {
    [r[0].len(), r[1].len(), r[2].len()]
}

fn copy_region(
    src: &RadianceVolume,
    src_mask: &EditMask,
    dst: &mut RadianceVolume,
    dst_mask: &EditMask,
) -> Result<()> {
    let s = src_mask.voxel_ranges(src)?;
    let d = dst_mask.voxel_ranges(dst)?;
    if extents(&s) != extents(&d) {
        return Err(Error::invalid(format!(
            "source region spans {:?} voxels but destination spans {:?}",
            extents(&s),
            extents(&d)
        )));
    }
    for (i, x) in s[0].clone().enumerate() {
        for (j, y) in s[1].clone().enumerate() {
            for (k, z) in s[2].clone().enumerate() {
                dst.set_voxel(d[0].start + i, d[1].start + j, d[2].start + k, src.voxel(x, y, z));
            }
        }
    }
    Ok(())
}

/// Copies the source region onto the congruent destination region.
pub fn edit_duplicate(volume: &RadianceVolume, src: &EditMask, dst: &EditMask) -> Result<RadianceVolume> {
    let mut out = volume.clone();
    copy_region(volume, src, &mut out, dst)?;
    Ok(out)
}

/// Duplicate to `dst`, then remove `src`.
pub fn edit_move(
    volume: &RadianceVolume,
    src: &EditMask,
    dst: &EditMask,
    empty: EmptySample,
) -> Result<RadianceVolume> {
    edit_remove(&edit_duplicate(volume, src, dst)?, src, empty)
}

/// Pastes each source region into `target` at its destination; later entries win on overlap.
pub fn compose(
    sources: &[(&RadianceVolume, EditMask)],
    target: &RadianceVolume,
    destinations: &[EditMask],
) -> Result<RadianceVolume> {
    if sources.len() != destinations.len() {
        return Err(Error::invalid(format!(
            "{} sources but {} destinations",
            sources.len(),
            destinations.len()
        )));
    }
    let mut out = target.clone();
    for ((src, mask), dst) in sources.iter().zip(destinations) {
        copy_region(src, mask, &mut out, dst)?;
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HarmonizeOptions {
    /// Also run the scale-3 generator on the downscaled volume.
    pub include_scale3: bool,
    /// Fresh noise from this seed instead of zero noise.
    pub noise_seed: Option<u64>,
}

/// Downscales an edited finest volume to scale-3 dims and refines it back up.
pub fn harmonize(
    stack: &GeneratorStack,
    volume: &RadianceVolume,
    options: &HarmonizeOptions,
) -> Result<RadianceVolume> {
    let n = stack.num_scales();
    if n < 4 {
        return Err(Error::Unsupported(format!(
            "harmonization needs at least 4 scales, this pyramid has {n}"
        )));
    }
    let small = volume.resample(stack.schedule.volume_dims(3))?;
    let mut t = small.to_tensor();
    let mut shape = vec![1];
    shape.extend_from_slice(t.shape());
    t = t.reshape(&shape)?;
    let noise = match options.noise_seed {
        Some(seed) => NoiseStack::sample(&stack.schedule, seed),
        None => NoiseStack::zeros(&stack.schedule),
    };
    let from = if options.include_scale3 { 2 } else { 3 };
    let out = stack.refine_from(&t, from, &noise)?;
    RadianceVolume::from_tensor(&out, stack.bounds())
}

/// Triangle soup with per-vertex colours in `[0,1]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<[f32; 3]>,
    pub colors: Vec<[f32; 3]>,
    pub triangles: Vec<[u32; 3]>,
}

pub const DEFAULT_DENSITY_THRESHOLD: f64 = 0.5;

/// Isosurface of `softplus(σ)·voxel_size` at `threshold`.
pub fn export_mesh(volume: &RadianceVolume, threshold: f64) -> Result<Mesh> {
    if !(threshold > 0.0) {
        return Err(Error::invalid("density threshold must be > 0"));
    }
    let [nx, ny, nz] = volume.dims();
    let vs = volume.voxel_size();
    let step = vs.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut field = Vec::with_capacity(nx * ny * nz);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let sigma = softplus_f(volume.voxel(x, y, z)[3] as f64) * step;
                field.push(-sigma as f32);
            }
        }
    }
    let b = volume.bounds();
    let offset = lin_alg::f32::Vec3::new(
        (b.min[0] + 0.5 * vs[0]) as f32,
        (b.min[1] + 0.5 * vs[1]) as f32,
        (b.min[2] + 0.5 * vs[2]) as f32,
    );
    let mc = MarchingCubes::new(
        (nx, ny, nz),
        (vs[0] as f32, vs[1] as f32, vs[2] as f32),
        (1.0, 1.0, 1.0),
        offset,
        field,
        -threshold as f32,
    )
    .map_err(|e| Error::invalid(e.to_string()))?;
    let raw = mc.generate(MeshSide::OutsideOnly);
    let mut mesh = Mesh::default();
    for v in &raw.vertices {
        let p = [v.posit.x, v.posit.y, v.posit.z];
        let s = volume.sample([p[0] as f64, p[1] as f64, p[2] as f64]);
        mesh.vertices.push(p);
        mesh.colors
            .push([sigmoid_f(s[0]) as f32, sigmoid_f(s[1]) as f32, sigmoid_f(s[2]) as f32]);
    }
    for t in raw.indices.chunks_exact(3) {
        mesh.triangles.push([t[0] as u32, t[1] as u32, t[2] as u32]);
    }
    Ok(mesh)
}

fn face_normal(m: &Mesh, t: &[u32; 3]) -> [f32; 3] {
    let [a, b, c] = t.map(|i| m.vertices[i as usize]);
    let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
    let n = [u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]];
    let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
    if len > 0.0 {
        n.map(|x| x / len)
    } else {
        [0.0; 3]
    }
}

/// Binary STL.
pub fn stl_bytes(mesh: &Mesh) -> Vec<u8> {
    let mut out = Vec::with_capacity(84 + 50 * mesh.triangles.len());
    let mut header = [0u8; 80];
    header[..12].copy_from_slice(b"singrav mesh");
    out.extend_from_slice(&header);
    out.extend_from_slice(&(mesh.triangles.len() as u32).to_le_bytes());
    for t in &mesh.triangles {
        for x in face_normal(mesh, t) {
            out.extend_from_slice(&x.to_le_bytes());
        }
        for &i in t {
            for x in mesh.vertices[i as usize] {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out.extend_from_slice(&0u16.to_le_bytes());
    }
    out
}

/// Wavefront OBJ with `v x y z r g b` vertex colours.
pub fn obj_string(mesh: &Mesh) -> String {
    let mut out = Vec::new();
    writeln!(out, "# singrav mesh").unwrap();
    for (p, c) in mesh.vertices.iter().zip(&mesh.colors) {
        writeln!(out, "v {} {} {} {} {} {}", p[0], p[1], p[2], c[0], c[1], c[2]).unwrap();
    }
    for t in &mesh.triangles {
        writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1).unwrap();
    }
    String::from_utf8(out).expect("ascii output")
}
