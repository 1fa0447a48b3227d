//! Multi-view RGB-D datasets: manifest IO, per-scale pyramids, camera rigs
//! and procedural scenes.

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use fs2::FileExt;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::io::{
    decode_depth_png, decode_rgb_png, encode_depth_png, encode_rgb_png, quantize_depth,
    quantize_rgb, write_atomic, write_json,
};
use crate::pyramid::{rng_for, Schedule};
use crate::render::{render, RaySampleSpec};
use crate::resample::{resize_trailing, Filter};
use crate::tensor::Tensor;
use crate::volume::{Aabb, RadianceVolume};

pub const DEFAULT_DEPTH_SCALE: f64 = 1e-4;
pub const MANIFEST_VERSION: u32 = 1;

/// One observation: camera, colour `[3,H,W]` and optional depth `[1,H,W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraView {
    pub camera: Camera,
    pub rgb: Tensor,
    pub depth: Option<Tensor>,
    pub depth_scale: f64,
    pub index: usize,
}

impl CameraView {
    pub fn width(&self) -> usize {
        self.rgb.shape()[2]
    }

    pub fn height(&self) -> usize {
        self.rgb.shape()[1]
    }

    pub fn rgb_at(&self, width: usize, height: usize) -> Tensor {
        resize_trailing(&self.rgb, &[height, width], Filter::Area)
    }

    /// Stored depth area-averaged to `width × height`.
    pub fn depth_at(&self, width: usize, height: usize) -> Result<Tensor> {
        let d = self
            .depth
            .as_ref()
            .ok_or(Error::AbsentDepth { view: self.index })?;
        Ok(resize_trailing(d, &[height, width], Filter::Area))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiViewDataset {
    pub bounds: Aabb,
    pub views: Vec<CameraView>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestView {
    pub rgb: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<String>,
    #[serde(default = "default_depth_scale")]
    pub depth_scale: f64,
    pub camera: Camera,
}

fn default_depth_scale() -> f64 {
    DEFAULT_DEPTH_SCALE
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    #[serde(default)]
    pub bounds: Aabb,
    pub views: Vec<ManifestView>,
}

impl MultiViewDataset {
    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn has_depth(&self) -> bool {
        self.views.iter().all(|v| v.depth.is_some())
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.views.is_empty() {
            errs.push("dataset has no views".to_string());
        }
        for (i, v) in self.views.iter().enumerate() {
            if let Err(e) = v.camera.validate() {
                errs.push(format!("view {i}: {e}"));
            }
            if v.rgb.shape() != [3, v.camera.height, v.camera.width] {
                errs.push(format!(
                    "view {i}: image {:?} does not match camera {}x{}",
                    v.rgb.shape(),
                    v.camera.width,
                    v.camera.height
                ));
            }
            if !v.rgb.is_finite() {
                errs.push(format!("view {i}: non-finite colour"));
            }
            if let Some(d) = &v.depth {
                if d.shape() != [1, v.camera.height, v.camera.width] {
                    errs.push(format!("view {i}: depth {:?} does not match camera", d.shape()));
                }
                if d.data().iter().any(|x| !x.is_finite() || *x < 0.0) {
                    errs.push(format!("view {i}: depth must be finite and non-negative"));
                }
            }
            if !(v.depth_scale > 0.0) {
                errs.push(format!("view {i}: depth_scale must be > 0"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Dataset(errs))
        }
    }

    /// Writes a manifest plus PNG images into `dir`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut views = Vec::new();
        for (i, v) in self.views.iter().enumerate() {
            let rgb = format!("view_{i:04}.png");
            write_atomic(&dir.join(&rgb), &encode_rgb_png(&v.rgb)?)?;
            let depth = match &v.depth {
                Some(d) => {
                    let name = format!("view_{i:04}_depth.png");
                    write_atomic(&dir.join(&name), &encode_depth_png(d, v.depth_scale)?)?;
                    Some(name)
                }
                None => None,
            };
            views.push(ManifestView {
                rgb,
                depth,
                depth_scale: v.depth_scale,
                camera: v.camera.clone(),
            });
        }
        let path = dir.join("manifest.json");
        write_json(
            &path,
            &Manifest {
                version: MANIFEST_VERSION,
                bounds: self.bounds,
                views,
            },
        )?;
        Ok(path)
    }

    /// Hex SHA-256 over the dataset contents.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for b in self.bounds.min.iter().chain(&self.bounds.max) {
            h.update(b.to_le_bytes());
        }
        for v in &self.views {
            h.update(serde_json::to_vec(&v.camera).unwrap_or_default());
            h.update(v.depth_scale.to_le_bytes());
            for x in v.rgb.data() {
                h.update(x.to_le_bytes());
            }
            if let Some(d) = &v.depth {
                for x in d.data() {
                    h.update(x.to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }
}

pub fn load_dataset(manifest_path: &Path) -> Result<MultiViewDataset> {
    let bytes = std::fs::read(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Dataset(vec![format!("{}: {e}", manifest_path.display())]))?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let mut errs = Vec::new();
    if manifest.version != MANIFEST_VERSION {
        errs.push(format!("unsupported manifest version {}", manifest.version));
    }
    let mut views = Vec::new();
    for (i, mv) in manifest.views.iter().enumerate() {
        match load_view(dir, i, mv) {
            Ok(v) => views.push(v),
            Err(e) => errs.push(format!("view {i}: {e}")),
        }
    }
    if !errs.is_empty() {
        return Err(Error::Dataset(errs));
    }
    let ds = MultiViewDataset {
        bounds: manifest.bounds,
        views,
    };
    ds.validate()?;
    Ok(ds)
}

fn load_view(dir: &Path, index: usize, mv: &ManifestView) -> Result<CameraView> {
    if !(mv.depth_scale > 0.0) {
        return Err(Error::invalid(format!("depth_scale must be > 0, got {}", mv.depth_scale)));
    }
    mv.camera.validate()?;
    let rp = dir.join(&mv.rgb);
    let rgb = decode_rgb_png(&std::fs::read(&rp).map_err(|e| Error::io(&rp, e))?)?;
    let depth = match &mv.depth {
        Some(d) => {
            let dp = dir.join(d);
            Some(decode_depth_png(
                &std::fs::read(&dp).map_err(|e| Error::io(&dp, e))?,
                mv.depth_scale,
            )?)
        }
        None => None,
    };
    if rgb.shape() != [3, mv.camera.height, mv.camera.width] {
        return Err(Error::invalid(format!(
            "image is {}x{}, camera says {}x{}",
            rgb.shape()[2],
            rgb.shape()[1],
            mv.camera.width,
            mv.camera.height
        )));
    }
    Ok(CameraView {
        camera: mv.camera.clone(),
        rgb,
        depth,
        depth_scale: mv.depth_scale,
        index,
    })
}

/// Resized colour and depth for one scale.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleImages {
    pub side: usize,
    pub color: Vec<Tensor>,
    pub depth: Vec<Option<Tensor>>,
}

/// Observations for scales `1..=N`.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetPyramid {
    pub scales: Vec<ScaleImages>,
}

impl DatasetPyramid {
    pub fn scale(&self, n: usize) -> &ScaleImages {
        &self.scales[n - 1]
    }
}

/// Area-averaged images at every scale, quantized to their storage precision.
pub fn build_pyramid(dataset: &MultiViewDataset, schedule: &Schedule) -> DatasetPyramid {
    let scales = (1..=schedule.num_scales())
        .map(|n| {
            let side = schedule.image_side(n);
            let color = crate::par::map_slice(&dataset.views, |v| quantize_rgb(&v.rgb_at(side, side)));
            let depth = dataset
                .views
                .iter()
                .map(|v| {
                    v.depth_at(side, side)
                        .ok()
                        .map(|d| quantize_depth(&d, v.depth_scale))
                })
                .collect();
            ScaleImages { side, color, depth }
        })
        .collect();
    DatasetPyramid { scales }
}

/// [`build_pyramid`] backed by `root/<sha256>/scale_<n>/view_<i>.{png,dpng}`.
pub fn cached_pyramid(
    dataset: &MultiViewDataset,
    schedule: &Schedule,
    root: &Path,
) -> Result<DatasetPyramid> {
    let mut h = Sha256::new();
    h.update(dataset.content_hash());
    h.update(serde_json::to_vec(schedule)?);
    let key = hex::encode(h.finalize());
    let dir = root.join(&key);
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let lock_path = root.join(format!("{key}.lock"));
    let lock = OpenOptions::new()
        .create(true)
        .truncate(false)
        .write(true)
        .open(&lock_path)
        .map_err(|e| Error::io(&lock_path, e))?;
    lock.lock_exclusive().map_err(|e| Error::io(&lock_path, e))?;
    let result = (|| {
        let done = dir.join("complete");
        if done.exists() {
            return read_cached(dataset, schedule, &dir);
        }
        let pyr = build_pyramid(dataset, schedule);
        for (si, s) in pyr.scales.iter().enumerate() {
            let sdir = dir.join(format!("scale_{}", si + 1));
            for (i, c) in s.color.iter().enumerate() {
                write_atomic(&sdir.join(format!("view_{i}.png")), &encode_rgb_png(c)?)?;
                if let Some(d) = &s.depth[i] {
                    let scale = dataset.views[i].depth_scale;
                    write_atomic(&sdir.join(format!("view_{i}.dpng")), &encode_depth_png(d, scale)?)?;
                }
            }
        }
        write_atomic(&done, key.as_bytes())?;
        Ok(pyr)
    })();
    let _ = FileExt::unlock(&lock);
    result
}

fn read_cached(dataset: &MultiViewDataset, schedule: &Schedule, dir: &Path) -> Result<DatasetPyramid> {
    let mut scales = Vec::new();
    for n in 1..=schedule.num_scales() {
        let sdir = dir.join(format!("scale_{n}"));
        let mut color = Vec::new();
        let mut depth = Vec::new();
        for (i, v) in dataset.views.iter().enumerate() {
            let p = sdir.join(format!("view_{i}.png"));
            color.push(decode_rgb_png(&std::fs::read(&p).map_err(|e| Error::io(&p, e))?)?);
            let dp = sdir.join(format!("view_{i}.dpng"));
            depth.push(if dp.exists() {
                Some(decode_depth_png(
                    &std::fs::read(&dp).map_err(|e| Error::io(&dp, e))?,
                    v.depth_scale,
                )?)
            } else {
                None
            });
        }
        scales.push(ScaleImages {
            side: schedule.image_side(n),
            color,
            depth,
        });
    }
    Ok(DatasetPyramid { scales })
}

/// Cache root: `$SINGRAV_CACHE` or `./cache`.
pub fn cache_root() -> PathBuf {
    std::env::var_os("SINGRAV_CACHE")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("cache"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RigConfig {
    pub count: usize,
    pub radius: f64,
    pub fov_deg: f64,
    pub width: usize,
    pub height: usize,
    pub jitter_std: f64,
    /// Half-extent of the near/far window around the orbit radius.
    pub depth_margin: f64,
}

impl Default for RigConfig {
    fn default() -> Self {
        Self {
            count: 200,
            radius: 3.5,
            fov_deg: 33.40,
            width: 64,
            height: 64,
            jitter_std: 0.0,
            depth_margin: 1.75,
        }
    }
}

/// Cameras uniform on the upper hemisphere, looking at the origin.
pub fn hemisphere_rig(cfg: &RigConfig, seed: u64) -> Result<Vec<Camera>> {
    if cfg.count == 0 || !(cfg.radius > 0.0) {
        return Err(Error::invalid("rig needs count >= 1 and radius > 0"));
    }
    let mut rng = rng_for(seed, 0x5249_47);
    let jitter = Normal::new(0.0, cfg.jitter_std.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;
    (0..cfg.count)
        .map(|_| {
            let z: f64 = rng.random_range(0.0..1.0);
            let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let s = (1.0 - z * z).sqrt();
            let mut p = [cfg.radius * s * phi.cos(), cfg.radius * s * phi.sin(), cfg.radius * z];
            if cfg.jitter_std > 0.0 {
                for c in p.iter_mut() {
                    *c += jitter.sample(&mut rng);
                }
            }
            let dist = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            let near = (dist - cfg.depth_margin).max(1e-3);
            let far = dist + cfg.depth_margin;
            Camera::look_at(p, [0.0; 3], cfg.fov_deg, cfg.width, cfg.height, near, far)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SceneKind {
    Empty,
    Sphere,
    Spheres,
    Boxes,
    TerrainNoise,
}

impl std::str::FromStr for SceneKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "empty" => Self::Empty,
            "sphere" => Self::Sphere,
            "spheres" => Self::Spheres,
            "boxes" => Self::Boxes,
            "terrain-noise" | "terrain" => Self::TerrainNoise,
            other => return Err(Error::invalid(format!("unknown scene kind {other}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub kind: SceneKind,
    pub volume_res: usize,
    pub samples: usize,
    pub seed: u64,
    pub rig: RigConfig,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            kind: SceneKind::Spheres,
            volume_res: 32,
            samples: 96,
            seed: 0,
            rig: RigConfig::default(),
        }
    }
}

pub const EMPTY_SIGMA_RAW: f32 = -20.0;
pub const SOLID_SIGMA_RAW: f32 = 20.0;

fn logit(c: f64) -> f32 {
    let c = c.clamp(1e-3, 1.0 - 1e-3);
    (c / (1.0 - c)).ln() as f32
}

struct Solid {
    /// Signed distance (negative inside).
    sdf: Box<dyn Fn([f64; 3]) -> f64>,
    color: [f64; 3],
}

fn sphere(c: [f64; 3], r: f64, color: [f64; 3]) -> Solid {
    Solid {
        sdf: Box::new(move |p| {
            ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2)).sqrt() - r
        }),
        color,
    }
}

fn aabox(c: [f64; 3], h: [f64; 3], color: [f64; 3]) -> Solid {
    Solid {
        sdf: Box::new(move |p| {
            let q: Vec<f64> = (0..3).map(|a| (p[a] - c[a]).abs() - h[a]).collect();
            let outside = q.iter().map(|v| v.max(0.0).powi(2)).sum::<f64>().sqrt();
            outside + q.iter().cloned().fold(f64::NEG_INFINITY, f64::max).min(0.0)
        }),
        color,
    }
}

fn scene_solids(kind: SceneKind, seed: u64) -> Vec<Solid> {
    let mut rng = rng_for(seed, 0x5343);
    let color = |rng: &mut rand_chacha::ChaCha8Rng| {
        [
            rng.random_range(0.15..0.95),
            rng.random_range(0.15..0.95),
            rng.random_range(0.15..0.95),
        ]
    };
    match kind {
        SceneKind::Empty => vec![],
        SceneKind::Sphere => vec![sphere([0.0; 3], 0.5, [0.9, 0.4, 0.2])],
        SceneKind::Spheres => (0..6)
            .map(|_| {
                let r = rng.random_range(0.15..0.3);
                let c = [
                    rng.random_range(-0.65..0.65),
                    rng.random_range(-0.65..0.65),
                    rng.random_range(-0.75..(-0.75 + 2.0 * r)),
                ];
                sphere(c, r, color(&mut rng))
            })
            .collect(),
        SceneKind::Boxes => (0..5)
            .map(|_| {
                let h = [
                    rng.random_range(0.1..0.25),
                    rng.random_range(0.1..0.25),
                    rng.random_range(0.1..0.35),
                ];
                let c = [
                    rng.random_range(-0.6..0.6),
                    rng.random_range(-0.6..0.6),
                    -0.9 + h[2],
                ];
                aabox(c, h, color(&mut rng))
            })
            .collect(),
        SceneKind::TerrainNoise => {
            let waves: Vec<([f64; 2], f64, f64)> = (0..6)
                .map(|_| {
                    (
                        [rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0)],
                        rng.random_range(0.0..std::f64::consts::TAU),
                        rng.random_range(0.03..0.12),
                    )
                })
                .collect();
            let base = color(&mut rng);
            vec![Solid {
                sdf: Box::new(move |p| {
                    let h: f64 = -0.5
                        + waves
                            .iter()
                            .map(|(k, ph, a)| a * (k[0] * p[0] + k[1] * p[1] + ph).sin())
                            .sum::<f64>();
                    p[2] - h
                }),
                color: base,
            }]
        }
    }
}

/// Builds a ground-truth volume for a procedural scene.
pub fn synthetic_volume(kind: SceneKind, res: usize, seed: u64) -> Result<RadianceVolume> {
    let solids = scene_solids(kind, seed);
    let mut vol = RadianceVolume::filled([res; 3], [0.0, 0.0, 0.0, EMPTY_SIGMA_RAW])?;
    for x in 0..res {
        for y in 0..res {
            for z in 0..res {
                let p = vol.voxel_center(x, y, z);
                let sharpness = 2.0 * SOLID_SIGMA_RAW as f64 / vol.voxel_size()[0];
                let best = solids
                    .iter()
                    .map(|s| ((s.sdf)(p), s.color))
                    .min_by(|a, b| a.0.total_cmp(&b.0));
                if let Some((d, c)) = best {
                    let sig = (-sharpness * d).clamp(EMPTY_SIGMA_RAW as f64, SOLID_SIGMA_RAW as f64);
                    vol.set_voxel(x, y, z, [logit(c[0]), logit(c[1]), logit(c[2]), sig as f32]);
                }
            }
        }
    }
    Ok(vol)
}

/// Renders a procedural scene from a hemisphere rig into a dataset.
pub fn make_synthetic_scene(cfg: &SyntheticConfig) -> Result<(RadianceVolume, MultiViewDataset)> {
    let volume = synthetic_volume(cfg.kind, cfg.volume_res, cfg.seed)?;
    let cams = hemisphere_rig(&cfg.rig, cfg.seed)?;
    let spec = RaySampleSpec::new(cfg.samples)?;
    let views = cams
        .into_iter()
        .enumerate()
        .map(|(index, camera)| {
            let out = render(&volume, &camera, spec)?;
            let depth_scale = DEFAULT_DEPTH_SCALE;
            Ok(CameraView {
                rgb: quantize_rgb(&out.color),
                depth: Some(quantize_depth(&out.depth, depth_scale)),
                depth_scale,
                camera,
                index,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((
        volume.clone(),
        MultiViewDataset {
            bounds: volume.bounds(),
            views,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pyramid::{scale_schedule, PyramidConfig};

    fn small(kind: SceneKind, views: usize) -> SyntheticConfig {
        SyntheticConfig {
            kind,
            volume_res: 16,
            samples: 48,
            seed: 3,
            rig: RigConfig {
                count: views,
                width: 12,
                height: 12,
                ..Default::default()
            },
        }
    }

    #[test]
    fn rig_geometry() {
        let cams = hemisphere_rig(&RigConfig { count: 1000, ..Default::default() }, 1).unwrap();
        for c in &cams {
            let p = c.position();
            let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            assert!((r - 3.5).abs() < 1e-9);
            assert!(p[2] >= -1e-9);
            let f = c.forward();
            assert!(((f[0] * f[0] + f[1] * f[1] + f[2] * f[2]).sqrt() - 1.0).abs() < 1e-9);
        }
        let a = hemisphere_rig(&RigConfig { count: 1, ..Default::default() }, 7).unwrap();
        let b = hemisphere_rig(&RigConfig { count: 1, ..Default::default() }, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(RigConfig::default().fov_deg, 33.40);
        assert_eq!(RigConfig::default().radius, 3.5);
    }

    #[test]
    fn sphere_center_depth() {
        let mut cfg = small(SceneKind::Sphere, 4);
        cfg.volume_res = 32;
        cfg.samples = 64;
        cfg.rig.width = 9;
        cfg.rig.height = 9;
        let (_, ds) = make_synthetic_scene(&cfg).unwrap();
        let tol = 2.0 * 3.5 / 64.0;
        for v in &ds.views {
            let d = v.depth.as_ref().unwrap().data()[4 * 9 + 4];
            assert!((d - (3.5 - 0.5)).abs() < tol, "depth {d}");
        }
    }

    #[test]
    fn empty_scene_is_black_and_far() {
        let (_, ds) = make_synthetic_scene(&small(SceneKind::Empty, 2)).unwrap();
        for v in &ds.views {
            assert!(v.rgb.data().iter().all(|c| *c == 0.0));
            let far = v.camera.far;
            assert!(v.depth.as_ref().unwrap().data().iter().all(|d| (d - far).abs() <= 1e-4));
        }
    }

    #[test]
    fn deterministic_and_round_trips() {
        let (_, a) = make_synthetic_scene(&small(SceneKind::Spheres, 3)).unwrap();
        let (_, b) = make_synthetic_scene(&small(SceneKind::Spheres, 3)).unwrap();
        assert_eq!(a, b);
        let dir = tempfile::tempdir().unwrap();
        let path = a.save(dir.path()).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn manifest_errors() {
        let (_, a) = make_synthetic_scene(&small(SceneKind::Boxes, 1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = a.save(dir.path()).unwrap();
        assert_eq!(load_dataset(&path).unwrap().len(), 1);
        let mut m: Manifest = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
        m.views[0].depth_scale = 0.0;
        std::fs::write(&path, serde_json::to_vec(&m).unwrap()).unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Dataset(_))));
        m.views[0].depth_scale = 1e-4;
        m.views[0].camera.width = 5;
        std::fs::write(&path, serde_json::to_vec(&m).unwrap()).unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Dataset(_))));
        m.views[0].camera.width = 12;
        m.views[0].rgb = "missing.png".into();
        std::fs::write(&path, serde_json::to_vec(&m).unwrap()).unwrap();
        let Err(Error::Dataset(errs)) = load_dataset(&path) else { panic!() };
        assert!(errs[0].starts_with("view 0"));
    }

    #[test]
    fn pyramid_and_cache() {
        let (_, ds) = make_synthetic_scene(&small(SceneKind::Spheres, 2)).unwrap();
        let cfg = PyramidConfig {
            num_scales: 3,
            base_image_res: 4,
            mu_r: 1.5,
            mu_s: 2.0,
            base_volume_res: 4,
            ..PyramidConfig::toy()
        };
        let sched = scale_schedule(&cfg).unwrap();
        assert_eq!(sched.final_image_res, 12);
        let pyr = build_pyramid(&ds, &sched);
        for (n, s) in pyr.scales.iter().enumerate() {
            assert_eq!(s.side, sched.image_side(n + 1));
            assert_eq!(s.color[0].shape(), &[3, s.side, s.side]);
        }
        assert_eq!(pyr.scale(3).color[0], ds.views[0].rgb);
        let dir = tempfile::tempdir().unwrap();
        let first = cached_pyramid(&ds, &sched, dir.path()).unwrap();
        let second = cached_pyramid(&ds, &sched, dir.path()).unwrap();
        assert_eq!(first, pyr);
        assert_eq!(second, pyr);
        let key_dir = std::fs::read_dir(dir.path()).unwrap().filter_map(|e| e.ok()).find(|e| e.path().is_dir()).unwrap();
        assert!(key_dir.path().join("scale_1/view_0.png").exists());
        assert!(key_dir.path().join("scale_1/view_0.dpng").exists());
    }

    #[test]
    fn constant_image_stays_constant() {
        let cam = Camera::look_at([0.0, -3.0, 1.0], [0.0; 3], 40.0, 8, 8, 1.0, 5.0).unwrap();
        let v = CameraView {
            camera: cam,
            rgb: Tensor::full(&[3, 8, 8], 0.4),
            depth: Some(Tensor::full(&[1, 8, 8], 2.5)),
            depth_scale: 1e-4,
            index: 0,
        };
        assert!(v.rgb_at(3, 3).data().iter().all(|x| (x - 0.4).abs() < 1e-12));
        assert!(v.depth_at(5, 5).unwrap().data().iter().all(|x| (x - 2.5).abs() < 1e-12));
        assert_eq!(v.depth_at(8, 8).unwrap(), Tensor::full(&[1, 8, 8], 2.5));
        let nd = CameraView { depth: None, ..v };
        assert!(matches!(nd.depth_at(4, 4), Err(Error::AbsentDepth { view: 0 })));
    }
}
