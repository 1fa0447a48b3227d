//! Scale schedule, generator and discriminator stacks, noise and checkpoints.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{no_grad, Var};
use crate::camera::Camera;
use crate::conv::ConvGeom;
use crate::error::{Error, Result};
use crate::io::{read_json, write_json};
use crate::nn::{ConvSpec, ConvStack, Ctx, Norm, ParamStore};
use crate::ops;
use crate::render::{render, samples_for_scale, RaySampleSpec};
use crate::resample::{resize_trailing_var, Filter};
use crate::tensor::Tensor;
use crate::volume::{make_csg_grid, round_res, Aabb, RadianceVolume};

/// Independent RNG stream `stream` for a run seed.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PyramidConfig {
    /// Number of scales `N`; the last one is the 2-D super-resolver.
    pub num_scales: usize,
    pub theta: f64,
    pub mu_r: f64,
    pub mu_s: f64,
    pub base_volume_res: usize,
    pub base_image_res: usize,
    /// Conv layers per network (`L`).
    pub layers: usize,
    pub hidden_channels: usize,
    /// Widths of the super-resolver convs after upsampling.
    pub sr_channels: Vec<usize>,
    pub norm_3d: Norm,
    pub depth_conditioning: bool,
    pub init_std: f64,
    pub bounds: Aabb,
    pub volume_res: Option<Vec<usize>>,
    pub image_res: Option<Vec<usize>>,
    pub final_image_res: Option<usize>,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self {
            num_scales: 6,
            theta: 4.0 / 3.0,
            mu_r: 1.5,
            mu_s: 2.0,
            base_volume_res: 40,
            base_image_res: 32,
            layers: 5,
            hidden_channels: 32,
            sr_channels: vec![32, 16, 8, 8],
            norm_3d: Norm::Batch,
            depth_conditioning: true,
            init_std: 0.02,
            bounds: Aabb::default(),
            volume_res: None,
            image_res: None,
            final_image_res: None,
        }
    }
}

/// Pre-super-resolution image side used by the reference configuration.
const REFERENCE_LAST_IMAGE: usize = 160;

impl PyramidConfig {
    /// Small three-scale configuration for tests and demos.
    pub fn toy() -> Self {
        Self {
            num_scales: 3,
            base_volume_res: 8,
            base_image_res: 16,
            hidden_channels: 16,
            sr_channels: vec![16, 16, 8, 8],
            norm_3d: Norm::Instance,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.num_scales < 2 {
            errs.push("num_scales must be >= 2".to_string());
        }
        for (name, v) in [("theta", self.theta), ("mu_r", self.mu_r), ("mu_s", self.mu_s)] {
            if !(v > 1.0) {
                errs.push(format!("{name} must be > 1, got {v}"));
            }
        }
        if self.layers < 2 {
            errs.push("layers must be >= 2".into());
        }
        if self.hidden_channels == 0 || self.sr_channels.is_empty() || self.sr_channels.contains(&0) {
            errs.push("channel widths must be >= 1".into());
        }
        if self.base_volume_res < 2 || self.base_image_res < 1 {
            errs.push("base resolutions too small".into());
        }
        if let Some(v) = &self.volume_res {
            if v.len() != self.num_scales - 1 || v.iter().any(|&d| d < 2) {
                errs.push(format!("volume_res needs {} entries >= 2", self.num_scales - 1));
            }
        }
        if let Some(v) = &self.image_res {
            if v.len() != self.num_scales - 1 || v.contains(&0) {
                errs.push(format!("image_res needs {} entries >= 1", self.num_scales - 1));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(errs.join("; ")))
        }
    }

    fn is_reference_image_schedule(&self) -> bool {
        self.num_scales == 6 && self.base_image_res == 32 && self.mu_r == 1.5
    }
}

/// Resolved per-scale resolutions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    /// Volume side for scales `1..N-1`.
    pub volume_res: Vec<usize>,
    /// Image side for scales `1..N-1`.
    pub image_res: Vec<usize>,
    /// Super-resolved image side at scale `N`.
    pub final_image_res: usize,
}

impl Schedule {
    pub fn num_scales(&self) -> usize {
        self.volume_res.len() + 1
    }

    pub fn volume_dims(&self, n: usize) -> [usize; 3] {
        [self.volume_res[n - 1]; 3]
    }

    /// Image side at scale `n` in `1..=N`.
    pub fn image_side(&self, n: usize) -> usize {
        if n == self.num_scales() {
            self.final_image_res
        } else {
            self.image_res[n - 1]
        }
    }
}

pub fn scale_schedule(config: &PyramidConfig) -> Result<Schedule> {
    config.validate()?;
    let n = config.num_scales;
    let volume_res = match &config.volume_res {
        Some(v) => v.clone(),
        None => (0..n - 1)
            .map(|i| round_res(config.base_volume_res as f64 * config.theta.powi(i as i32)))
            .collect(),
    };
    let image_res = match &config.image_res {
        Some(v) => v.clone(),
        None => {
            let mut v: Vec<usize> = (0..n - 1)
                .map(|i| round_res(config.base_image_res as f64 * config.mu_r.powi(i as i32)))
                .collect();
            if config.is_reference_image_schedule() {
                let last = v.len() - 1;
                v[last] = v[last].min(REFERENCE_LAST_IMAGE);
            }
            v
        }
    };
    let final_image_res = config
        .final_image_res
        .unwrap_or_else(|| round_res(image_res[n - 2] as f64 * config.mu_s));
    Ok(Schedule {
        volume_res,
        image_res,
        final_image_res,
    })
}

/// Per-scale noise volumes, `[1,3,..]` at scale 1 and `[1,4,..]` above.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseStack {
    pub seed: u64,
    pub volumes: Vec<Tensor>,
}

pub fn noise_channels(n: usize) -> usize {
    if n == 1 {
        3
    } else {
        4
    }
}

pub fn noise_shape(schedule: &Schedule, n: usize, batch: usize) -> Vec<usize> {
    let d = schedule.volume_dims(n);
    vec![batch, noise_channels(n), d[0], d[1], d[2]]
}

impl NoiseStack {
    pub fn sample(schedule: &Schedule, seed: u64) -> Self {
        let volumes = (1..schedule.num_scales())
            .map(|n| {
                let mut rng = rng_for(seed, n as u64);
                Tensor::randn(&noise_shape(schedule, n, 1), &mut rng)
            })
            .collect();
        Self { seed, volumes }
    }

    /// The reconstruction set `{z1*, 0, …, 0}`.
    pub fn fixed(schedule: &Schedule, z1: Tensor) -> Self {
        let mut volumes = vec![z1];
        for n in 2..schedule.num_scales() {
            volumes.push(Tensor::zeros(&noise_shape(schedule, n, 1)));
        }
        Self { seed: 0, volumes }
    }

    pub fn zeros(schedule: &Schedule) -> Self {
        Self {
            seed: 0,
            volumes: (1..schedule.num_scales())
                .map(|n| Tensor::zeros(&noise_shape(schedule, n, 1)))
                .collect(),
        }
    }

    pub fn check(&self, schedule: &Schedule) -> Result<()> {
        if self.volumes.len() != schedule.num_scales() - 1 {
            return Err(Error::invalid(format!(
                "noise stack has {} scales, schedule needs {}",
                self.volumes.len(),
                schedule.num_scales() - 1
            )));
        }
        for (i, z) in self.volumes.iter().enumerate() {
            let want = noise_shape(schedule, i + 1, 1);
            if z.shape() != want.as_slice() {
                return Err(Error::ShapeMismatch {
                    expected: want,
                    actual: z.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    pub fn to_store(&self) -> ParamStore {
        let mut s = ParamStore::new();
        for (i, z) in self.volumes.iter().enumerate() {
            s.insert(format!("noise.{}", i + 1), z.clone(), false);
        }
        let seed = [(self.seed >> 32) as f64, (self.seed & 0xffff_ffff) as f64];
        s.insert("noise.seed", Tensor::new(vec![2], seed.to_vec()).unwrap(), false);
        s
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let parts = store.tensor("noise.seed")?.data();
        let seed = ((parts[0] as u64) << 32) | parts[1] as u64;
        let mut volumes = Vec::new();
        while let Ok(t) = store.tensor(&format!("noise.{}", volumes.len() + 1)) {
            volumes.push(t.clone());
        }
        Ok(Self { seed, volumes })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_store().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_store(&ParamStore::load(path)?)
    }
}

pub fn generator_name(n: usize) -> String {
    format!("g{n}")
}

pub fn discriminator_name(n: usize) -> String {
    format!("d{n}")
}

const ZSTAR: &str = "zstar.1";

/// All networks of the pyramid plus the fixed reconstruction noise.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorStack {
    pub config: PyramidConfig,
    pub schedule: Schedule,
    pub seed: u64,
    pub params: ParamStore,
    /// Per scale `1..=N`: trained and frozen flags.
    pub trained: Vec<bool>,
    pub frozen: Vec<bool>,
}

impl GeneratorStack {
    /// Randomly initialised networks for every scale.
    pub fn new(config: PyramidConfig, seed: u64) -> Result<Self> {
        let schedule = scale_schedule(&config)?;
        let n = config.num_scales;
        let mut stack = Self {
            config,
            schedule,
            seed,
            params: ParamStore::new(),
            trained: vec![false; n],
            frozen: vec![false; n],
        };
        for s in 1..=n {
            let mut rng = rng_for(seed, 1000 + s as u64);
            let std = stack.config.init_std;
            if s < n {
                stack.generator(s).init(&mut stack.params, std, &mut rng);
            } else {
                stack.super_resolver().init(&mut stack.params, std, &mut rng);
            }
            stack.discriminator(s).init(&mut stack.params, std, &mut rng);
        }
        let mut rng = rng_for(seed, 999);
        let z1 = Tensor::randn(&noise_shape(&stack.schedule, 1, 1), &mut rng);
        stack.params.insert(ZSTAR, z1, false);
        Ok(stack)
    }

    pub fn num_scales(&self) -> usize {
        self.config.num_scales
    }

    pub fn bounds(&self) -> Aabb {
        self.config.bounds
    }

    pub fn generator(&self, n: usize) -> ConvStack {
        let h = self.config.hidden_channels;
        let l = self.config.layers;
        let layers = (0..l)
            .map(|i| {
                let last = i == l - 1;
                ConvSpec {
                    in_c: if i == 0 { noise_channels(n) } else { h },
                    out_c: if last { 4 } else { h },
                    geom: ConvGeom::cube(3, 1),
                    norm: if last { Norm::None } else { self.config.norm_3d },
                    activate: !last,
                }
            })
            .collect();
        ConvStack {
            prefix: generator_name(n),
            layers,
        }
    }

    /// Upsample → expansion conv → widths in `sr_channels` → RGB.
    pub fn super_resolver(&self) -> ConvStack {
        let mut widths = vec![3];
        widths.extend(&self.config.sr_channels);
        let mut layers: Vec<ConvSpec> = widths
            .windows(2)
            .map(|w| ConvSpec {
                in_c: w[0],
                out_c: w[1],
                geom: ConvGeom::square(3, 1, 1),
                norm: Norm::Instance,
                activate: true,
            })
            .collect();
        layers.push(ConvSpec {
            in_c: *widths.last().unwrap(),
            out_c: 3,
            geom: ConvGeom::square(3, 1, 1),
            norm: Norm::None,
            activate: false,
        });
        ConvStack {
            prefix: generator_name(self.num_scales()),
            layers,
        }
    }

    pub fn disc_in_channels(&self, n: usize) -> usize {
        if n == self.num_scales() {
            6
        } else if self.config.depth_conditioning {
            4
        } else {
            3
        }
    }

    pub fn discriminator(&self, n: usize) -> ConvStack {
        let h = self.config.hidden_channels;
        let l = self.config.layers;
        let layers = (0..l)
            .map(|i| {
                let last = i == l - 1;
                ConvSpec {
                    in_c: if i == 0 { self.disc_in_channels(n) } else { h },
                    out_c: if last { 1 } else { h },
                    geom: ConvGeom::square(3, 1, 0),
                    norm: Norm::None,
                    activate: !last,
                }
            })
            .collect();
        ConvStack {
            prefix: discriminator_name(n),
            layers,
        }
    }

    /// Receptive field of the patch discriminator in pixels.
    pub fn receptive_field(&self) -> usize {
        1 + 2 * self.config.layers
    }

    pub fn fixed_noise(&self) -> NoiseStack {
        let z1 = self.params.tensor(ZSTAR).expect("fixed noise present").clone();
        NoiseStack::fixed(&self.schedule, z1)
    }

    /// `[1,3,W,H,U]` coordinate grid for scale 1.
    pub fn csg(&self) -> Tensor {
        let g = make_csg_grid(self.schedule.volume_dims(1)).expect("valid dims");
        let t = g.to_tensor();
        let mut s = vec![1];
        s.extend_from_slice(t.shape());
        t.reshape(&s).unwrap()
    }

    /// `G_1(z_1 + e_csg)`, batched over the first axis of `z1`.
    pub fn generate_coarsest(&self, ctx: &Ctx<'_>, z1: &Var) -> Result<Var> {
        let d = self.schedule.volume_dims(1);
        let want = [z1.shape()[0], 3, d[0], d[1], d[2]];
        if z1.shape() != want {
            return Err(Error::ShapeMismatch {
                expected: want.to_vec(),
                actual: z1.shape().to_vec(),
            });
        }
        let x = ops::add(z1, &Var::constant(self.csg()));
        Ok(self.generator(1).forward(ctx, &x))
    }

    /// `up(prev) + G_n(z_n + up(prev))`.
    pub fn refine(&self, ctx: &Ctx<'_>, n: usize, prev: &Var, z: &Var) -> Result<Var> {
        if n < 2 || n >= self.num_scales() {
            return Err(Error::invalid(format!("refine scale {n} out of range")));
        }
        let d = self.schedule.volume_dims(n);
        let want = [prev.shape()[0], 4, d[0], d[1], d[2]];
        if z.shape() != want {
            return Err(Error::ShapeMismatch {
                expected: want.to_vec(),
                actual: z.shape().to_vec(),
            });
        }
        let up = resize_trailing_var(prev, &d, Filter::Linear);
        let res = self.generator(n).forward(ctx, &ops::add(z, &up));
        Ok(ops::add(&up, &res))
    }

    /// Bilinear ×μ_s upsample plus the learned residual; `[B,3,H,W]` in and out.
    pub fn super_resolve(&self, ctx: &Ctx<'_>, img: &Var) -> Result<Var> {
        let s = img.shape().to_vec();
        let side = self.schedule.image_side(self.num_scales() - 1);
        if s.len() != 4 || s[1] != 3 || s[2] != side || s[3] != side {
            return Err(Error::invalid(format!(
                "super-resolver expects [B,3,{side},{side}], got {s:?}"
            )));
        }
        let out = self.schedule.final_image_res;
        let up = resize_trailing_var(img, &[out, out], Filter::Linear);
        let x = ops::reshape(&up, &[s[0], 3, 1, out, out]);
        let res = self.super_resolver().forward(ctx, &x);
        Ok(ops::add(&up, &ops::reshape(&res, &[s[0], 3, out, out])))
    }

    /// Patch map `[B,1,H',W']` for a `[B,C,H,W]` input.
    pub fn discriminate(&self, ctx: &Ctx<'_>, n: usize, x: &Var) -> Result<Var> {
        let s = x.shape().to_vec();
        if s.len() != 4 || s[1] != self.disc_in_channels(n) {
            return Err(Error::invalid(format!(
                "discriminator {n} expects [B,{},H,W], got {s:?}",
                self.disc_in_channels(n)
            )));
        }
        let min = 2 * self.config.layers + 1;
        if s[2] < min || s[3] < min {
            return Err(Error::invalid(format!(
                "discriminator input {}x{} smaller than receptive field {min}",
                s[2], s[3]
            )));
        }
        let y = self
            .discriminator(n)
            .forward(ctx, &ops::reshape(x, &[s[0], s[1], 1, s[2], s[3]]));
        let ys = y.shape().to_vec();
        Ok(ops::reshape(&y, &[ys[0], 1, ys[3], ys[4]]))
    }

    /// Runs the 3-D cascade up to scale `upto` (≤ N−1) from noise batches.
    pub fn generate_upto(&self, ctx: &Ctx<'_>, noise: &[Var], upto: usize) -> Result<Var> {
        let mut v = self.generate_coarsest(ctx, &noise[0])?;
        for n in 2..=upto {
            v = self.refine(ctx, n, &v, &noise[n - 1])?;
        }
        Ok(v)
    }

    /// Inference pass: the finest volume for a noise stack.
    pub fn sample_volume(&self, noise: &NoiseStack) -> Result<RadianceVolume> {
        self.sample_volume_at(noise, self.num_scales() - 1)
    }

    /// Inference pass stopped at scale `upto`.
    pub fn sample_volume_at(&self, noise: &NoiseStack, upto: usize) -> Result<RadianceVolume> {
        noise.check(&self.schedule)?;
        if upto == 0 || upto >= self.num_scales() {
            return Err(Error::invalid(format!("volume scale {upto} out of range")));
        }
        let t = no_grad(|| -> Result<Tensor> {
            let bound = self.params.bind();
            let ctx = Ctx::new(&bound, false);
            let zs: Vec<Var> = noise.volumes.iter().cloned().map(Var::constant).collect();
            Ok(self.generate_upto(&ctx, &zs, upto)?.value().clone())
        })?;
        RadianceVolume::from_tensor(&t, self.bounds())
    }

    /// Fresh noise from `seed`, then [`sample_volume`](Self::sample_volume).
    pub fn sample_scene(&self, seed: u64) -> Result<(RadianceVolume, NoiseStack)> {
        let noise = NoiseStack::sample(&self.schedule, seed);
        Ok((self.sample_volume(&noise)?, noise))
    }

    /// Refines a scale-`from` volume through scales `from+1..N-1` with `noise`.
    pub fn refine_from(&self, volume: &Tensor, from: usize, noise: &NoiseStack) -> Result<Tensor> {
        no_grad(|| {
            let bound = self.params.bind();
            let ctx = Ctx::new(&bound, false);
            let mut v = Var::constant(volume.clone());
            for n in from + 1..self.num_scales() {
                v = self.refine(&ctx, n, &v, &Var::constant(noise.volumes[n - 1].clone()))?;
            }
            Ok(v.value().clone())
        })
    }

    /// Final-resolution colour `[3,S,S]` of `volume` seen from `camera`:
    /// rendered at the last volume scale's image side, then super-resolved.
    pub fn render_final(&self, volume: &RadianceVolume, camera: &Camera) -> Result<Tensor> {
        let n = self.num_scales();
        let low_side = self.schedule.image_side(n - 1);
        let spec = RaySampleSpec::new(samples_for_scale(n, n))?;
        let low = render(volume, &camera.with_resolution(low_side, low_side), spec)?.color;
        let low = low.reshape(&[1, 3, low_side, low_side])?;
        let side = self.schedule.final_image_res;
        let out = no_grad(|| -> Result<Tensor> {
            let bound = self.params.bind();
            let ctx = Ctx::new(&bound, false);
            Ok(self.super_resolve(&ctx, &Var::constant(low))?.value().clone())
        })?;
        Ok(out.reshape(&[3, side, side])?.map(|v| v.clamp(0.0, 1.0)))
    }

    pub fn freeze_scale(&mut self, n: usize) {
        self.params.set_trainable(&generator_name(n), false);
        self.params.set_trainable(&discriminator_name(n), false);
        self.frozen[n - 1] = true;
    }

    pub fn is_frozen(&self, n: usize) -> bool {
        self.frozen[n - 1]
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        for n in 1..=self.num_scales() {
            self.save_scale(dir, n)?;
        }
        self.write_index(dir)
    }

    pub fn save_scale(&self, dir: &Path, n: usize) -> Result<()> {
        let sdir = dir.join(format!("scale_{n}"));
        let mut blob = self.params.subset(&generator_name(n));
        blob.extend(self.params.subset(&discriminator_name(n)));
        if n == 1 {
            blob.extend(self.params.subset("zstar"));
        }
        blob.save(&sdir.join("weights.safetensors"))?;
        let sc = ScaleConfig {
            scale: n,
            volume_res: (n < self.num_scales()).then(|| self.schedule.volume_res[n - 1]),
            image_res: self.schedule.image_side(n),
            generator_in_channels: if n < self.num_scales() { noise_channels(n) } else { 3 },
            discriminator_in_channels: self.disc_in_channels(n),
            layers: self.config.layers,
            hidden_channels: self.config.hidden_channels,
            seed: self.seed,
            trained: self.trained[n - 1],
            frozen: self.frozen[n - 1],
        };
        write_json(&sdir.join("scale_config.json"), &sc)
    }

    pub fn write_index(&self, dir: &Path) -> Result<()> {
        let index = PyramidIndex {
            version: 1,
            config: self.config.clone(),
            schedule: self.schedule.clone(),
            seed: self.seed,
            scales: (1..=self.num_scales())
                .map(|n| ScaleEntry {
                    scale: n,
                    dir: format!("scale_{n}"),
                    trained: self.trained[n - 1],
                    frozen: self.frozen[n - 1],
                })
                .collect(),
        };
        write_json(&dir.join("pyramid.json"), &index)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let index: PyramidIndex = read_json(&dir.join("pyramid.json"))?;
        let schedule = scale_schedule(&index.config)?;
        if schedule != index.schedule {
            return Err(Error::Checkpoint(
                "stored schedule does not match its configuration".into(),
            ));
        }
        let mut stack = Self::new(index.config.clone(), index.seed)?;
        for e in &index.scales {
            let path = dir.join(&e.dir).join("weights.safetensors");
            if !path.exists() {
                continue;
            }
            let blob = ParamStore::load(&path)?;
            for (name, p) in blob.iter() {
                stack.params.set(name, p.value.clone()).map_err(|err| {
                    Error::Checkpoint(format!("scale {}: parameter {name}: {err}", e.scale))
                })?;
            }
            stack.trained[e.scale - 1] = e.trained;
            if e.frozen {
                stack.freeze_scale(e.scale);
            }
        }
        Ok(stack)
    }

    pub fn is_trained(&self) -> bool {
        self.trained.iter().any(|t| *t)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScaleConfig {
    pub scale: usize,
    pub volume_res: Option<usize>,
    pub image_res: usize,
    pub generator_in_channels: usize,
    pub discriminator_in_channels: usize,
    pub layers: usize,
    pub hidden_channels: usize,
    pub seed: u64,
    pub trained: bool,
    pub frozen: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScaleEntry {
    pub scale: usize,
    pub dir: String,
    pub trained: bool,
    pub frozen: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PyramidIndex {
    pub version: u32,
    pub config: PyramidConfig,
    pub schedule: Schedule,
    pub seed: u64,
    pub scales: Vec<ScaleEntry>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::no_grad;

    #[test]
    fn default_schedule() {
        let s = scale_schedule(&PyramidConfig::default()).unwrap();
        assert_eq!(s.volume_res, vec![40, 53, 71, 95, 126]);
        assert_eq!(s.image_res, vec![32, 48, 72, 108, 160]);
        assert_eq!(s.final_image_res, 320);
    }

    #[test]
    fn two_scale_schedule() {
        let c = PyramidConfig {
            num_scales: 2,
            base_volume_res: 8,
            base_image_res: 8,
            theta: 2.0,
            mu_r: 2.0,
            mu_s: 2.0,
            ..Default::default()
        };
        let s = scale_schedule(&c).unwrap();
        assert_eq!((s.volume_res, s.image_res, s.final_image_res), (vec![8], vec![8], 16));
    }

    #[test]
    fn toy_schedule() {
        let s = scale_schedule(&PyramidConfig::toy()).unwrap();
        assert_eq!((s.volume_res, s.image_res, s.final_image_res), (vec![8, 11], vec![16, 24], 48));
    }

    #[test]
    fn invalid_configs() {
        for c in [
            PyramidConfig { num_scales: 1, ..Default::default() },
            PyramidConfig { theta: 1.0, ..Default::default() },
            PyramidConfig { volume_res: Some(vec![4]), ..Default::default() },
        ] {
            assert!(scale_schedule(&c).is_err());
        }
    }

    fn toy_stack(seed: u64) -> GeneratorStack {
        let c = PyramidConfig {
            hidden_channels: 4,
            sr_channels: vec![4, 4],
            layers: 3,
            ..PyramidConfig::toy()
        };
        GeneratorStack::new(c, seed).unwrap()
    }

    #[test]
    fn shapes_through_the_cascade() {
        let s = toy_stack(1);
        let (v, noise) = s.sample_scene(5).unwrap();
        assert_eq!(v.dims(), [11, 11, 11]);
        assert_eq!(noise.volumes[0].shape(), &[1, 3, 8, 8, 8]);
        assert_eq!(noise.volumes[1].shape(), &[1, 4, 11, 11, 11]);
        let b = s.params.bind();
        let ctx = Ctx::new(&b, false);
        let img = Var::constant(Tensor::zeros(&[1, 3, 24, 24]));
        let out = no_grad(|| s.super_resolve(&ctx, &img)).unwrap();
        assert_eq!(out.shape(), &[1, 3, 48, 48]);
        assert!(s.super_resolve(&ctx, &Var::constant(Tensor::zeros(&[1, 3, 16, 16]))).is_err());
        let d = s.discriminate(&ctx, 1, &Var::constant(Tensor::zeros(&[2, 4, 16, 16]))).unwrap();
        assert_eq!(d.shape(), &[2, 1, 10, 10]);
        assert_eq!(s.disc_in_channels(3), 6);
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let s = toy_stack(2);
        let (a, _) = s.sample_scene(7).unwrap();
        let (b, _) = s.sample_scene(7).unwrap();
        assert_eq!(a, b);
        for k in 0..10u64 {
            let (x, _) = s.sample_scene(100 + k).unwrap();
            let (y, _) = s.sample_scene(200 + k).unwrap();
            assert_ne!(x, y);
        }
    }

    #[test]
    fn zero_last_layer_refine_is_pure_upsample() {
        let mut s = toy_stack(3);
        let (w, b) = s.generator(2).last_layer_names();
        let ws = s.params.tensor(&w).unwrap().shape().to_vec();
        s.params.set(&w, Tensor::zeros(&ws)).unwrap();
        s.params.set(&b, Tensor::zeros(&[4])).unwrap();
        let bound = s.params.bind();
        let ctx = Ctx::new(&bound, false);
        let mut rng = rng_for(0, 0);
        let prev = Tensor::randn(&[1, 4, 8, 8, 8], &mut rng);
        let z = Var::constant(Tensor::randn(&[1, 4, 11, 11, 11], &mut rng));
        let out = s.refine(&ctx, 2, &Var::constant(prev.clone()), &z).unwrap();
        let up = crate::resample::resize_trailing(&prev, &[11, 11, 11], Filter::Linear);
        assert_eq!(out.value(), &up);
    }

    #[test]
    fn zero_weight_coarsest_is_constant() {
        let mut s = toy_stack(4);
        let names: Vec<String> = s.params.names().filter(|n| n.starts_with("g1.") && n.ends_with("weight")).map(String::from).collect();
        for n in names {
            let sh = s.params.tensor(&n).unwrap().shape().to_vec();
            s.params.set(&n, Tensor::zeros(&sh)).unwrap();
        }
        let (w, b) = s.generator(1).last_layer_names();
        let _ = w;
        s.params.set(&b, Tensor::new(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap()).unwrap();
        let bound = s.params.bind();
        let ctx = Ctx::new(&bound, false);
        let mut rng = rng_for(9, 9);
        let z = Var::constant(Tensor::randn(&[1, 3, 8, 8, 8], &mut rng));
        let v = s.generate_coarsest(&ctx, &z).unwrap();
        let n = 512;
        for c in 0..4 {
            assert!(v.value().data()[c * n..(c + 1) * n].iter().all(|x| *x == [0.1, 0.2, 0.3, 0.4][c]));
        }
    }

    #[test]
    fn csg_only_at_coarsest() {
        let s = toy_stack(5);
        assert_eq!(s.generator(1).layers[0].in_c, 3);
        assert_eq!(s.generator(2).layers[0].in_c, 4);
        let c = PyramidConfig { layers: 7, hidden_channels: 2, ..PyramidConfig::toy() };
        let big = GeneratorStack::new(c, 0).unwrap();
        assert_eq!(big.receptive_field(), 15);
        let b = big.params.bind();
        let x = Var::constant(Tensor::zeros(&[1, 4, 32, 32]));
        let y = no_grad(|| big.discriminate(&Ctx::new(&b, false), 1, &x)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 18, 18]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut s = toy_stack(6);
        s.trained[0] = true;
        s.freeze_scale(1);
        let dir = tempfile::tempdir().unwrap();
        s.save(dir.path()).unwrap();
        assert!(dir.path().join("scale_2/scale_config.json").exists());
        let back = GeneratorStack::load(dir.path()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn noise_round_trip() {
        let s = scale_schedule(&PyramidConfig::toy()).unwrap();
        let z = NoiseStack::sample(&s, 42);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("noise.safetensors");
        z.save(&p).unwrap();
        assert_eq!(NoiseStack::load(&p).unwrap(), z);
        assert!(z.check(&s).is_ok());
        let fixed = NoiseStack::fixed(&s, z.volumes[0].clone());
        assert!(fixed.volumes[1].data().iter().all(|v| *v == 0.0));
    }
}
