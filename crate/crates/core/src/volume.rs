//! Discrete radiance volumes and the normalized coordinate grid.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::resample::{resize_trailing, Filter};
use crate::tensor::Tensor;

/// Axis-aligned box in world units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Default for Aabb {
    fn default() -> Self {
        Self {
            min: [-1.0; 3],
            max: [1.0; 3],
        }
    }
}

impl Aabb {
    pub fn extent(&self) -> [f64; 3] {
        [
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        ]
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    pub fn half_diagonal(&self) -> f64 {
        let e = self.extent();
        0.5 * (e[0] * e[0] + e[1] * e[1] + e[2] * e[2]).sqrt()
    }
}

/// Number of channels per voxel: raw colour triple plus raw density.
pub const CHANNELS: usize = 4;

/// A `W×H×U` grid of raw (pre-activation) colour and density values.
///
/// Storage is xyz-major with channels last, in `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct RadianceVolume {
    dims: [usize; 3],
    values: Vec<f32>,
    bounds: Aabb,
}

/// Cell index and fractional offset of a point along each axis.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Cell {
    pub base: [usize; 3],
    pub frac: [f64; 3],
}

/// Locates `p` among voxel centres; points outside the box clamp to the faces.
pub(crate) fn locate(p: [f64; 3], dims: [usize; 3], bounds: &Aabb) -> Cell {
    let ext = bounds.extent();
    let mut base = [0; 3];
    let mut frac = [0.0; 3];
    for a in 0..3 {
        let n = dims[a];
        let u = ((p[a] - bounds.min[a]) / ext[a] * n as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = (u.floor() as usize).min(n.saturating_sub(2));
        base[a] = i0;
        frac[a] = u - i0 as f64;
    }
    Cell { base, frac }
}

impl Cell {
    /// The eight `(x, y, z)` corners with their trilinear weights.
    pub(crate) fn corners(&self) -> [([usize; 3], f64); 8] {
        let mut out = [([0; 3], 0.0); 8];
        for (k, slot) in out.iter_mut().enumerate() {
            let mut idx = [0; 3];
            let mut w = 1.0;
            for a in 0..3 {
                let bit = (k >> (2 - a)) & 1;
                idx[a] = self.base[a] + bit;
                w *= if bit == 1 { self.frac[a] } else { 1.0 - self.frac[a] };
            }
            *slot = (idx, w);
        }
        out
    }
}

impl RadianceVolume {
    pub fn new(dims: [usize; 3], values: Vec<f32>, bounds: Aabb) -> Result<Self> {
        if dims.iter().any(|&d| d < 2) {
            return Err(Error::invalid(format!("volume dims must be >= 2, got {dims:?}")));
        }
        let n = dims.iter().product::<usize>() * CHANNELS;
        if values.len() != n {
            return Err(Error::invalid(format!(
                "volume {dims:?} needs {n} values, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("volume contains non-finite values"));
        }
        if (0..3).any(|a| bounds.max[a] <= bounds.min[a]) {
            return Err(Error::invalid("degenerate volume bounds"));
        }
        Ok(Self {
            dims,
            values,
            bounds,
        })
    }

    pub fn filled(dims: [usize; 3], voxel: [f32; 4]) -> Result<Self> {
        let n = dims.iter().product::<usize>();
        let values = (0..n).flat_map(|_| voxel).collect();
        Self::new(dims, values, Aabb::default())
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn bounds(&self) -> Aabb {
        self.bounds
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn voxel_count(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        ((x * self.dims[1] + y) * self.dims[2] + z) * CHANNELS
    }

    pub fn voxel(&self, x: usize, y: usize, z: usize) -> [f32; 4] {
        let i = self.index(x, y, z);
        [
            self.values[i],
            self.values[i + 1],
            self.values[i + 2],
            self.values[i + 3],
        ]
    }

    pub fn set_voxel(&mut self, x: usize, y: usize, z: usize, v: [f32; 4]) {
        let i = self.index(x, y, z);
        self.values[i..i + 4].copy_from_slice(&v);
    }

    pub fn voxel_size(&self) -> [f64; 3] {
        let e = self.bounds.extent();
        [
            e[0] / self.dims[0] as f64,
            e[1] / self.dims[1] as f64,
            e[2] / self.dims[2] as f64,
        ]
    }

    pub fn voxel_center(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        let s = self.voxel_size();
        let i = [x, y, z];
        [0, 1, 2].map(|a| self.bounds.min[a] + (i[a] as f64 + 0.5) * s[a])
    }

    /// Trilinear blend of the eight voxels around `p`.
    pub fn sample(&self, p: [f64; 3]) -> [f64; 4] {
        let cell = locate(p, self.dims, &self.bounds);
        let mut out = [0.0; 4];
        for (idx, w) in cell.corners() {
            if w == 0.0 {
                continue;
            }
            let v = self.voxel(idx[0], idx[1], idx[2]);
            for c in 0..4 {
                out[c] += w * v[c] as f64;
            }
        }
        out
    }

    pub fn sample_trilinear(&self, points: &[[f64; 3]]) -> Vec<[f64; 4]> {
        crate::par::map_slice(points, |&p| self.sample(p))
    }

    /// Channel-first `[4, W, H, U]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let n = self.voxel_count();
        let mut data = vec![0.0; CHANNELS * n];
        for v in 0..n {
            for c in 0..CHANNELS {
                data[c * n + v] = self.values[v * CHANNELS + c] as f64;
            }
        }
        Tensor::from_parts(vec![CHANNELS, self.dims[0], self.dims[1], self.dims[2]], data)
    }

    /// Inverse of [`to_tensor`](Self::to_tensor); accepts `[4,W,H,U]` or `[1,4,W,H,U]`.
    pub fn from_tensor(t: &Tensor, bounds: Aabb) -> Result<Self> {
        let s = match t.shape() {
            [1, c, w, h, u] => [*c, *w, *h, *u],
            [c, w, h, u] => [*c, *w, *h, *u],
            other => {
                return Err(Error::invalid(format!(
                    "expected a [4, W, H, U] tensor, got {other:?}"
                )))
            }
        };
        if s[0] != CHANNELS {
            return Err(Error::invalid(format!("expected 4 channels, got {}", s[0])));
        }
        let dims = [s[1], s[2], s[3]];
        let n = dims.iter().product::<usize>();
        let d = t.data();
        let mut values = vec![0f32; n * CHANNELS];
        for v in 0..n {
            for c in 0..CHANNELS {
                values[v * CHANNELS + c] = d[c * n + v] as f32;
            }
        }
        Self::new(dims, values, bounds)
    }

    /// Trilinear resampling to `dims`, bounds unchanged.
    pub fn resample(&self, dims: [usize; 3]) -> Result<Self> {
        if dims == self.dims {
            return Ok(self.clone());
        }
        let t = resize_trailing(&self.to_tensor(), &dims, Filter::Linear);
        Self::from_tensor(&t, self.bounds)
    }

    /// Content hash over dims, bounds and raw values.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for d in self.dims {
            h.update((d as u64).to_le_bytes());
        }
        for v in self.bounds.min.iter().chain(self.bounds.max.iter()) {
            h.update(v.to_le_bytes());
        }
        for v in &self.values {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Round half away from zero, used for every resolution computation.
pub fn round_res(x: f64) -> usize {
    x.round().max(0.0) as usize
}

/// `round(dims · factor)` trilinear upsampling.
pub fn upsample_volume(volume: &RadianceVolume, factor: f64) -> Result<RadianceVolume> {
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(Error::invalid(format!("upsample factor must be > 0, got {factor}")));
    }
    let dims = volume.dims().map(|d| round_res(d as f64 * factor));
    volume.resample(dims)
}

/// Normalized per-voxel coordinates in `[-1, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CsgGrid {
    dims: [usize; 3],
}

impl CsgGrid {
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    /// Coordinate triple at voxel index `(x, y, z)`.
    pub fn at(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        let [w, h, u] = self.dims;
        let c = |i: usize, n: usize| (2.0 * i as f64 - n as f64) / n as f64;
        [c(x, w), c(y, h), c(z, u)]
    }

    /// Channel-first `[3, W, H, U]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let [w, h, u] = self.dims;
        let n = w * h * u;
        let mut data = vec![0.0; 3 * n];
        for x in 0..w {
            for y in 0..h {
                for z in 0..u {
                    let v = (x * h + y) * u + z;
                    let c = self.at(x, y, z);
                    for k in 0..3 {
                        data[k * n + v] = c[k];
                    }
                }
            }
        }
        Tensor::from_parts(vec![3, w, h, u], data)
    }
}

pub fn make_csg_grid(dims: [usize; 3]) -> Result<CsgGrid> {
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::invalid(format!("grid dims must be >= 1, got {dims:?}")));
    }
    Ok(CsgGrid { dims })
}

pub const SGRV_MAGIC: &str = "SGRV1";

#[derive(Debug, Serialize, Deserialize)]
struct SgrvHeader {
    magic: String,
    dims: [usize; 3],
    channels: usize,
    bounds: [[f64; 3]; 2],
    dtype: String,
    order: String,
}

/// Writes the SGRV1 container: `u32` LE header length, JSON header, `f32` LE payload.
pub fn write_sgrv<W: Write>(volume: &RadianceVolume, mut w: W) -> Result<()> {
    let header = SgrvHeader {
        magic: SGRV_MAGIC.into(),
        dims: volume.dims,
        channels: CHANNELS,
        bounds: [volume.bounds.min, volume.bounds.max],
        dtype: "f32le".into(),
        order: "xyz-major, channel-last".into(),
    };
    let json = serde_json::to_vec(&header)?;
    let io = |e| Error::io("<sgrv stream>", e);
    w.write_all(&(json.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    let mut payload = Vec::with_capacity(volume.values.len() * 4);
    for v in &volume.values {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&payload).map_err(io)?;
    Ok(())
}

pub fn read_sgrv<R: Read>(mut r: R) -> Result<RadianceVolume> {
    let io = |e| Error::io("<sgrv stream>", e);
    let mut len = [0u8; 4];
    r.read_exact(&mut len).map_err(io)?;
    let len = u32::from_le_bytes(len) as usize;
    if len > 1 << 20 {
        return Err(Error::Format(format!("SGRV1 header length {len} too large")));
    }
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(io)?;
    let header: SgrvHeader = serde_json::from_slice(&json)?;
    if header.magic != SGRV_MAGIC || header.channels != CHANNELS || header.dtype != "f32le" {
        return Err(Error::Format(format!(
            "unsupported volume header: magic {}, channels {}, dtype {}",
            header.magic, header.channels, header.dtype
        )));
    }
    let n = header.dims.iter().product::<usize>() * CHANNELS;
    let mut payload = vec![0u8; n * 4];
    r.read_exact(&mut payload).map_err(io)?;
    let values = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    RadianceVolume::new(
        header.dims,
        values,
        Aabb {
            min: header.bounds[0],
            max: header.bounds[1],
        },
    )
}

pub fn sgrv_bytes(volume: &RadianceVolume) -> Vec<u8> {
    let mut buf = Vec::new();
    write_sgrv(volume, &mut buf).expect("writing to a Vec cannot fail");
    buf
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    pub(crate) fn random_volume(dims: [usize; 3], seed: u64) -> RadianceVolume {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = dims.iter().product::<usize>() * 4;
        let values = (0..n).map(|_| rng.random_range(-3.0f32..3.0)).collect();
        RadianceVolume::new(dims, values, Aabb::default()).unwrap()
    }

    #[test]
    fn csg_examples() {
        assert_eq!(make_csg_grid([2, 2, 2]).unwrap().at(0, 0, 0), [-1.0, -1.0, -1.0]);
        assert_eq!(make_csg_grid([4, 4, 4]).unwrap().at(2, 2, 2), [0.0, 0.0, 0.0]);
        let g = make_csg_grid([5, 4, 2]).unwrap().at(3, 1, 0);
        assert!((g[0] - 0.2).abs() < 1e-15);
        assert_eq!(g[1], -0.5);
        assert_eq!(g[2], -1.0);
        assert!(make_csg_grid([0, 2, 2]).is_err());
    }

    #[test]
    fn csg_tensor_layout() {
        let g = make_csg_grid([3, 2, 4]).unwrap();
        let t = g.to_tensor();
        let n = 24;
        for x in 0..3 {
            for y in 0..2 {
                for z in 0..4 {
                    let v = (x * 2 + y) * 4 + z;
                    let c = g.at(x, y, z);
                    for k in 0..3 {
                        assert_eq!(t.data()[k * n + v], c[k]);
                    }
                }
            }
        }
    }

    #[test]
    fn sampling_at_centres_and_midpoints() {
        let v = random_volume([4, 4, 4], 1);
        let c = v.voxel_center(1, 2, 3);
        let s = v.sample(c);
        let raw = v.voxel(1, 2, 3);
        for k in 0..4 {
            assert!((s[k] - raw[k] as f64).abs() < 1e-12);
        }
        let a = v.voxel_center(1, 2, 2);
        let b = v.voxel_center(2, 2, 2);
        let mid = [(a[0] + b[0]) / 2.0, a[1], a[2]];
        let s = v.sample(mid);
        let (va, vb) = (v.voxel(1, 2, 2), v.voxel(2, 2, 2));
        for k in 0..4 {
            assert!((s[k] - (va[k] as f64 + vb[k] as f64) / 2.0).abs() < 1e-12);
        }
        assert!(v.sample_trilinear(&[]).is_empty());
    }

    #[test]
    fn outside_points_clamp_to_faces() {
        let v = random_volume([3, 3, 3], 2);
        let s = v.sample([5.0, -5.0, 0.0]);
        let inside = v.sample([v.voxel_center(2, 0, 0)[0], v.voxel_center(2, 0, 0)[1], 0.0]);
        assert_eq!(s, inside);
    }

    #[test]
    fn upsample_examples() {
        let v = random_volume([4, 3, 5], 3);
        assert_eq!(upsample_volume(&v, 1.0).unwrap(), v);
        let big = RadianceVolume::filled([40, 40, 40], [0.0; 4]).unwrap();
        assert_eq!(upsample_volume(&big, 4.0 / 3.0).unwrap().dims(), [53, 53, 53]);
        let c = RadianceVolume::filled([5, 6, 7], [0.3, -1.25, 2.0, 7.5]).unwrap();
        let u = upsample_volume(&c, 1.7).unwrap();
        assert!(u.values().chunks(4).all(|v| v == [0.3, -1.25, 2.0, 7.5]));
        assert!(upsample_volume(&c, 0.0).is_err());
        assert!(upsample_volume(&c, -1.0).is_err());
    }

    #[test]
    fn tensor_round_trip() {
        let v = random_volume([3, 4, 5], 4);
        let t = v.to_tensor();
        assert_eq!(RadianceVolume::from_tensor(&t, v.bounds()).unwrap(), v);
    }

    #[test]
    fn invalid_volumes() {
        assert!(RadianceVolume::new([1, 2, 2], vec![0.0; 16], Aabb::default()).is_err());
        assert!(RadianceVolume::new([2, 2, 2], vec![0.0; 31], Aabb::default()).is_err());
        let mut vals = vec![0.0; 32];
        vals[3] = f32::NAN;
        assert!(RadianceVolume::new([2, 2, 2], vals, Aabb::default()).is_err());
    }

    #[test]
    fn sgrv_rejects_bad_magic() {
        let v = random_volume([2, 2, 2], 5);
        let mut bytes = sgrv_bytes(&v);
        let pos = bytes.windows(5).position(|w| w == b"SGRV1").unwrap();
        bytes[pos + 4] = b'9';
        assert!(read_sgrv(&bytes[..]).is_err());
    }

    proptest! {
        #[test]
        fn sgrv_round_trip_is_bit_exact(seed in 0u64..1000, w in 2usize..5, h in 2usize..5, u in 2usize..5) {
            let v = random_volume([w, h, u], seed);
            let back = read_sgrv(&sgrv_bytes(&v)[..]).unwrap();
            prop_assert_eq!(back, v);
        }

        #[test]
        fn trilinear_within_neighbour_range(seed in 0u64..200, px in -1.0f64..1.0, py in -1.0f64..1.0, pz in -1.0f64..1.0) {
            let v = random_volume([4, 4, 4], seed);
            let cell = locate([px, py, pz], v.dims(), &v.bounds());
            let s = v.sample([px, py, pz]);
            for c in 0..4 {
                let vals: Vec<f64> = cell.corners().iter().map(|(i, _)| v.voxel(i[0], i[1], i[2])[c] as f64).collect();
                let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(s[c] >= lo - 1e-9 && s[c] <= hi + 1e-9);
            }
        }
    }
}
