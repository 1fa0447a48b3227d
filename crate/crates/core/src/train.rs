//! Coarse-to-fine training: per-scale optimisation, freezing, checkpoints.

use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{no_grad, Var};
use crate::camera::{generate_rays, Camera, Ray};
use crate::dataio::{build_pyramid, cached_pyramid, DatasetPyramid, MultiViewDataset};
use crate::error::{Error, Result};
use crate::features::FeatureNet;
use crate::io::{read_json, write_json};
use crate::losses::{
    adversarial_losses, critic_scores, mse, reconstruction_from_parts, swd_loss, total_loss,
    LossWeights, SwdConfig,
};
use crate::nn::{Adam, Ctx};
use crate::ops;
use crate::pyramid::{
    discriminator_name, generator_name, noise_shape, rng_for, GeneratorStack,
};
use crate::render::{render_rays, samples_for_scale, RaySampleSpec};
use crate::resample::{resize_trailing, resize_trailing_var, Filter};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs_per_scale: usize,
    pub recon_only_epochs: usize,
    pub d_steps: usize,
    pub g_steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Adversarial batch size per scale.
    pub adv_batch: Vec<usize>,
    /// Reconstruction batch size per scale.
    pub recon_batch: Vec<usize>,
    /// Explicit samples per ray per scale; the 64→128 ramp otherwise.
    pub samples: Option<Vec<usize>>,
    /// Image side above which adversarial passes use crops and
    /// reconstruction uses a pixel subset.
    pub crop: usize,
    pub max_rays: usize,
    pub warm_start: bool,
    /// Supervise depth with renders of the reconstruction volume after the
    /// recon-only epochs instead of dataset depth.
    pub self_depth: bool,
    pub seed: u64,
    pub weights: LossWeights,
    pub swd: SwdConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_per_scale: 80,
            recon_only_epochs: 20,
            d_steps: 3,
            g_steps: 3,
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            adv_batch: vec![6, 6, 6, 5, 2, 2],
            recon_batch: vec![2, 2, 2, 1, 1, 1],
            samples: None,
            crop: 64,
            max_rays: 4096,
            warm_start: true,
            self_depth: false,
            seed: 0,
            weights: LossWeights::default(),
            swd: SwdConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, num_scales: usize) -> Result<()> {
        let mut errs = Vec::new();
        if self.recon_only_epochs > self.epochs_per_scale {
            errs.push("recon_only_epochs exceeds epochs_per_scale".to_string());
        }
        if self.adv_batch.len() != num_scales || self.recon_batch.len() != num_scales {
            errs.push(format!("batch lists must have {num_scales} entries"));
        }
        if self.adv_batch.iter().chain(&self.recon_batch).any(|b| *b == 0) {
            errs.push("batch sizes must be >= 1".into());
        }
        if let Some(s) = &self.samples {
            if s.len() != num_scales || s.contains(&0) {
                errs.push(format!("samples must list {num_scales} positive counts"));
            }
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            errs.push("optimizer settings out of range".into());
        }
        if self.d_steps == 0 || self.g_steps == 0 {
            errs.push("d_steps and g_steps must be >= 1".into());
        }
        if self.crop == 0 || self.max_rays == 0 {
            errs.push("crop and max_rays must be >= 1".into());
        }
        if let Err(e) = self.weights.validate() {
            errs.push(e.to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(errs.join("; ")))
        }
    }

    fn samples_at(&self, n: usize, num_scales: usize) -> usize {
        match &self.samples {
            Some(s) => s[n - 1],
            None => samples_for_scale(n, num_scales),
        }
    }
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub scale: usize,
    pub d_loss: f64,
    pub g_loss: f64,
    pub rec_loss: f64,
    pub swd_loss: f64,
    pub wall_time: f64,
}

/// Row-major pixel selection inside a `side × side` image.
struct Window {
    pixels: Vec<usize>,
    /// `(h, w)` when the selection is a rectangle.
    rect: Option<(usize, usize)>,
}

impl Window {
    fn full(side: usize) -> Self {
        Self {
            pixels: (0..side * side).collect(),
            rect: Some((side, side)),
        }
    }

    fn crop<R: Rng>(side: usize, c: usize, rng: &mut R) -> Self {
        if c >= side {
            return Self::full(side);
        }
        let y0 = rng.random_range(0..=side - c);
        let x0 = rng.random_range(0..=side - c);
        let pixels = (0..c)
            .flat_map(|y| (0..c).map(move |x| (y0 + y) * side + x0 + x))
            .collect();
        Self {
            pixels,
            rect: Some((c, c)),
        }
    }

    fn subset<R: Rng>(side: usize, count: usize, rng: &mut R) -> Self {
        if count >= side * side {
            return Self::full(side);
        }
        let mut all: Vec<usize> = (0..side * side).collect();
        all.partial_shuffle(rng, count);
        all.truncate(count);
        Self {
            pixels: all,
            rect: None,
        }
    }

    /// `[C,H,W]` → `[C,R]`, or `[C,h,w]` for rectangles.
    fn take(&self, img: &Tensor) -> Tensor {
        let s = img.shape();
        let (c, hw) = (s[0], s[1] * s[2]);
        let r = self.pixels.len();
        let mut out = vec![0.0; c * r];
        for ch in 0..c {
            for (i, p) in self.pixels.iter().enumerate() {
                out[ch * r + i] = img.data()[ch * hw + p];
            }
        }
        let shape = match self.rect {
            Some((h, w)) => vec![c, h, w],
            None => vec![c, r],
        };
        Tensor::new(shape, out).expect("window shape")
    }

    fn rays(&self, cam: &Camera) -> Result<Rc<Vec<Ray>>> {
        let all = generate_rays(cam)?;
        Ok(Rc::new(self.pixels.iter().map(|p| all[*p]).collect()))
    }
}

fn normalize_depth(d: &Tensor, cam: &Camera) -> Tensor {
    let (near, span) = (cam.near, cam.far - cam.near);
    d.map(move |v| (v - near) / span)
}

fn normalize_depth_var(d: &Var, cam: &Camera) -> Var {
    ops::scale(&ops::add_scalar(d, -cam.near), 1.0 / (cam.far - cam.near))
}

fn check_finite(v: f64, scale: usize, step: usize, which: &'static str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        log::error!("non-finite {which} loss ({v}) at scale {scale}, step {step}");
        Err(Error::NonFinite { scale, step, which })
    }
}

struct ScaleTrainer<'a> {
    stack: &'a mut GeneratorStack,
    n: usize,
    dataset: &'a MultiViewDataset,
    pyramid: &'a DatasetPyramid,
    config: &'a TrainConfig,
    features: Option<&'a FeatureNet>,
    rng: ChaCha8Rng,
    spec: RaySampleSpec,
    depth: bool,
    self_depths: Option<Vec<Tensor>>,
    g_opt: Adam,
    d_opt: Adam,
}

/// Fake or real discriminator inputs plus the images fed to the texture loss.
struct Batch {
    disc: Var,
    images: Vec<Var>,
}

impl<'a> ScaleTrainer<'a> {
    fn num_scales(&self) -> usize {
        self.stack.num_scales()
    }

    fn last(&self) -> bool {
        self.n == self.num_scales()
    }

    fn side(&self) -> usize {
        self.stack.schedule.image_side(self.n)
    }

    fn camera(&self, view: usize, side: usize) -> Camera {
        self.dataset.views[view].camera.with_resolution(side, side)
    }

    fn random_view(&mut self) -> usize {
        self.rng.random_range(0..self.dataset.len())
    }

    fn adv_window(&mut self, side: usize) -> Window {
        let c = self.config.crop;
        Window::crop(side, c, &mut self.rng)
    }

    fn noise(&mut self, upto: usize, batch: usize) -> Vec<Var> {
        (1..=upto)
            .map(|s| {
                Var::constant(Tensor::randn(
                    &noise_shape(&self.stack.schedule, s, batch),
                    &mut self.rng,
                ))
            })
            .collect()
    }

    /// Volume at scale `n` (or `N-1` for the last scale); previous scales run frozen in eval mode.
    fn volume(&self, ctx: &Ctx<'_>, eval: &Ctx<'_>, noise: &[Var]) -> Result<Var> {
        let n = self.n.min(self.num_scales() - 1);
        if self.last() {
            return no_grad(|| self.stack.generate_upto(eval, noise, n)).map(|v| v.detach());
        }
        if n == 1 {
            return self.stack.generate_coarsest(ctx, &noise[0]);
        }
        let prev = no_grad(|| self.stack.generate_upto(eval, &noise[..n - 1], n - 1))?.detach();
        self.stack.refine(ctx, n, &prev, &noise[n - 1])
    }

    fn render_window(&self, vol: &Var, b: usize, cam: &Camera, w: &Window) -> Result<Var> {
        let s = vol.shape().to_vec();
        let one = ops::reshape(&ops::narrow(vol, 0, b, 1), &s[1..]);
        render_rays(&one, self.stack.bounds(), w.rays(cam)?, self.spec)
    }

    /// Renders a full image of volume `b` at the pre-super-resolution side.
    fn render_low(&self, vol: &Var, b: usize, cam: &Camera) -> Result<Tensor> {
        let side = cam.width;
        let out = self.render_window(vol, b, cam, &Window::full(side))?;
        Ok(out.value().narrow(0, 0, 3)?.reshape(&[1, 3, side, side])?)
    }

    fn fake_batch(&mut self, ctx: &Ctx<'_>, eval: &Ctx<'_>, batch: usize) -> Result<Batch> {
        let upto = self.n.min(self.num_scales() - 1);
        let noise = self.noise(upto, batch);
        let vol = self.volume(ctx, eval, &noise)?;
        let side = self.side();
        if self.last() {
            let low_side = self.stack.schedule.image_side(self.n - 1);
            let mut lows = Vec::with_capacity(batch);
            for b in 0..batch {
                let v = self.random_view();
                let cam = self.camera(v, low_side);
                lows.push(no_grad(|| self.render_low(&vol, b, &cam))?);
            }
            let refs: Vec<&Tensor> = lows.iter().collect();
            let low = Var::constant(Tensor::concat(&refs, 0)?);
            let sr = self.stack.super_resolve(ctx, &low)?;
            let up = resize_trailing_var(&low, &[side, side], Filter::Linear);
            let joint = ops::concat(&[sr, up], 1);
            let mut discs = Vec::with_capacity(batch);
            let mut images = Vec::with_capacity(batch);
            for b in 0..batch {
                let w = self.adv_window(side);
                let one = ops::narrow(&joint, 0, b, 1);
                let (h, ww) = w.rect.expect("crop is rectangular");
                let (y0, x0) = (w.pixels[0] / side, w.pixels[0] % side);
                let c = ops::narrow(&ops::narrow(&one, 2, y0, h), 3, x0, ww);
                images.push(ops::narrow(&c, 1, 0, 3));
                discs.push(c);
            }
            return Ok(Batch {
                disc: ops::concat(&discs, 0),
                images,
            });
        }
        let mut discs = Vec::with_capacity(batch);
        for b in 0..batch {
            let v = self.random_view();
            let cam = self.camera(v, side);
            let w = self.adv_window(side);
            let (h, ww) = w.rect.expect("crop is rectangular");
            let out = ops::reshape(&self.render_window(&vol, b, &cam, &w)?, &[5, h, ww]);
            let color = ops::narrow(&out, 0, 0, 3);
            let x = if self.depth {
                let d = normalize_depth_var(&ops::narrow(&out, 0, 3, 1), &cam);
                ops::concat(&[color, d], 0)
            } else {
                color
            };
            let c = x.shape()[0];
            discs.push(ops::reshape(&x, &[1, c, h, ww]));
        }
        Ok(Batch {
            disc: ops::concat(&discs, 0),
            images: vec![],
        })
    }

    fn real_batch(&mut self, batch: usize) -> Result<Batch> {
        let side = self.side();
        let scale = self.pyramid.scale(self.n);
        let mut discs = Vec::with_capacity(batch);
        let mut images = Vec::with_capacity(batch);
        for _ in 0..batch {
            let v = self.random_view();
            let w = self.adv_window(side);
            let x = if self.last() {
                let low = &self.pyramid.scale(self.n - 1).color[v];
                let up = resize_trailing(low, &[side, side], Filter::Linear);
                Tensor::concat(&[&scale.color[v], &up], 0)?
            } else if self.depth {
                let d = self.depth_of(v)?;
                let d = normalize_depth(d, &self.camera(v, side));
                Tensor::concat(&[&scale.color[v], &d], 0)?
            } else {
                scale.color[v].clone()
            };
            let crop = w.take(&x);
            let mut s = vec![1];
            s.extend_from_slice(crop.shape());
            let crop = crop.reshape(&s)?;
            if self.last() {
                images.push(Var::constant(crop.narrow(1, 0, 3)?));
            }
            discs.push(crop);
        }
        let refs: Vec<&Tensor> = discs.iter().collect();
        Ok(Batch {
            disc: Var::constant(Tensor::concat(&refs, 0)?),
            images,
        })
    }

    /// Reconstruction loss of the fixed-noise volume against `views`.
    fn recon(&mut self, ctx: &Ctx<'_>, eval: &Ctx<'_>, views: &[usize]) -> Result<Var> {
        let fixed = self.stack.fixed_noise();
        let upto = self.n.min(self.num_scales() - 1);
        let noise: Vec<Var> = fixed.volumes[..upto]
            .iter()
            .cloned()
            .map(Var::constant)
            .collect();
        let vol = self.volume(ctx, eval, &noise)?;
        let side = self.side();
        let scale = self.pyramid.scale(self.n);
        let mut cms = Vec::new();
        let mut dms = Vec::new();
        for &v in views {
            if self.last() {
                let low_side = self.stack.schedule.image_side(self.n - 1);
                let cam = self.camera(v, low_side);
                let low = no_grad(|| self.render_low(&vol, 0, &cam))?;
                let sr = self.stack.super_resolve(ctx, &Var::constant(low))?;
                let w = self.adv_window(side);
                let (h, ww) = w.rect.expect("crop is rectangular");
                let (y0, x0) = (w.pixels[0] / side, w.pixels[0] % side);
                let got = ops::narrow(&ops::narrow(&sr, 2, y0, h), 3, x0, ww);
                let target = w.take(&scale.color[v]).reshape(&[1, 3, h, ww])?;
                cms.push(mse(&got, &Var::constant(target)));
                continue;
            }
            let cam = self.camera(v, side);
            let w = if side > self.config.crop {
                let r = self.config.max_rays;
                Window::subset(side, r, &mut self.rng)
            } else {
                Window::full(side)
            };
            let out = self.render_window(&vol, 0, &cam, &w)?;
            let r = w.pixels.len();
            let color = ops::reshape(&ops::narrow(&out, 0, 0, 3), &[3, r]);
            let target = w.take(&scale.color[v]).reshape(&[3, r])?;
            cms.push(mse(&color, &Var::constant(target)));
            if self.depth_supervised() {
                let d = self.depth_of(v)?;
                let td = w.take(&normalize_depth(d, &cam)).reshape(&[1, r])?;
                let got = normalize_depth_var(&ops::narrow(&out, 0, 3, 1), &cam);
                dms.push(mse(&got, &Var::constant(td)));
            }
        }
        let avg = |xs: &[Var]| {
            let total = xs[1..].iter().fold(xs[0].clone(), |a, b| ops::add(&a, b));
            ops::scale(&total, 1.0 / xs.len() as f64)
        };
        let cm = avg(&cms);
        let dm = (!dms.is_empty()).then(|| avg(&dms));
        Ok(reconstruction_from_parts(&cm, dm.as_ref(), self.last(), &self.config.weights))
    }

    fn depth_of(&self, v: usize) -> Result<&Tensor> {
        match &self.self_depths {
            Some(d) => Ok(&d[v]),
            None => self.pyramid.scale(self.n).depth[v]
                .as_ref()
                .ok_or(Error::AbsentDepth { view: v }),
        }
    }

    fn depth_supervised(&self) -> bool {
        self.depth && (!self.config.self_depth || self.self_depths.is_some())
    }

    /// Depth maps rendered from the current reconstruction volume.
    fn render_self_depths(&self) -> Result<Vec<Tensor>> {
        let vol = self.stack.sample_volume_at(&self.stack.fixed_noise(), self.n)?;
        let side = self.side();
        (0..self.dataset.len())
            .map(|v| Ok(crate::render::render(&vol, &self.camera(v, side), self.spec)?.depth))
            .collect()
    }

    fn check_disc_input(&self, x: &Var) -> Result<()> {
        let s = x.shape();
        let want = self.stack.disc_in_channels(self.n);
        if s.len() != 4 || s[1] != want || s[2] < self.stack.receptive_field() || s[3] < self.stack.receptive_field() {
            return Err(Error::invalid(format!(
                "discriminator {} cannot take input {s:?}",
                self.n
            )));
        }
        Ok(())
    }

    fn d_step(&mut self, step: usize) -> Result<f64> {
        let n = self.n;
        let batch = self.config.adv_batch[n - 1];
        let d_names = self.stack.params.trainable_under(&discriminator_name(n));
        let bound = self.stack.params.bind();
        let ctx = Ctx::new(&bound, true);
        let eval = Ctx::new(&bound, false);
        let fake = no_grad(|| self.fake_batch(&ctx, &eval, batch))?.disc.detach();
        let real = self.real_batch(batch)?.disc;
        self.check_disc_input(&fake)?;
        self.check_disc_input(&real)?;
        let stack = &*self.stack;
        let critic = |x: &Var| stack.discriminate(&ctx, n, x).expect("input checked");
        let adv = adversarial_losses(&critic, &real, &fake, self.config.weights.gp_weight, &mut self.rng)?;
        let d = adv.d_loss.value().item();
        check_finite(d, n, step, "discriminator")?;
        let grads = bound.grads(&adv.d_loss, &d_names);
        let updates = ctx.take_updates();
        let _ = eval.take_updates();
        self.d_opt.step(&mut self.stack.params, &grads);
        self.stack.params.apply_updates(updates);
        Ok(d)
    }

    /// One generator update; returns `(g_adv, rec, swd)`.
    fn g_step(&mut self, step: usize, views: &[usize], adversarial: bool) -> Result<(f64, f64, f64)> {
        let n = self.n;
        let batch = self.config.adv_batch[n - 1];
        let g_names = self.stack.params.trainable_under(&generator_name(n));
        let bound = self.stack.params.bind();
        let ctx = Ctx::new(&bound, true);
        let eval = Ctx::new(&bound, false);
        let rec = self.recon(&ctx, &eval, views)?;
        let rec_v = rec.value().item();
        check_finite(rec_v, n, step, "reconstruction")?;
        let (loss, g_v, swd_v) = if adversarial {
            let fake = self.fake_batch(&ctx, &eval, batch)?;
            self.check_disc_input(&fake.disc)?;
            let g_adv = ops::neg(&ops::mean(&critic_scores(
                &self.stack.discriminate(&ctx, n, &fake.disc)?,
            )));
            let g_v = g_adv.value().item();
            check_finite(g_v, n, step, "generator")?;
            let swd = match self.features {
                Some(net) if self.last() && self.config.weights.swd_weight > 0.0 => {
                    let real = self.real_batch(batch)?;
                    let mut acc: Option<Var> = None;
                    for (a, b) in fake.images.iter().zip(&real.images) {
                        let t = swd_loss(net, a, b, &self.config.swd)?;
                        acc = Some(match acc {
                            Some(x) => ops::add(&x, &t),
                            None => t,
                        });
                    }
                    acc.map(|a| ops::scale(&a, 1.0 / batch as f64))
                }
                _ => None,
            };
            let swd_v = swd.as_ref().map_or(0.0, |s| s.value().item());
            check_finite(swd_v, n, step, "swd")?;
            let total = total_loss(n, self.num_scales(), &g_adv, &rec, swd.as_ref(), &self.config.weights);
            (total, g_v, swd_v)
        } else {
            (rec, 0.0, 0.0)
        };
        let grads = bound.grads(&loss, &g_names);
        let updates = ctx.take_updates();
        self.g_opt.step(&mut self.stack.params, &grads);
        self.stack.params.apply_updates(updates);
        Ok((g_v, rec_v, swd_v))
    }

    fn run(&mut self, on_row: &mut dyn FnMut(&LogRow) -> Result<()>) -> Result<Vec<LogRow>> {
        let n = self.n;
        let m = self.dataset.len();
        let adv_b = self.config.adv_batch[n - 1];
        let rec_b = self.config.recon_batch[n - 1].min(m);
        let per_epoch = m.div_ceil(adv_b);
        let total = self.config.epochs_per_scale * per_epoch;
        let recon_only = self.config.recon_only_epochs * per_epoch;
        let start = Instant::now();
        let mut rows = Vec::with_capacity(total);
        let mut order: Vec<usize> = (0..m).collect();
        let mut views = Vec::new();
        for step in 0..total {
            if step % per_epoch == 0 {
                order.shuffle(&mut self.rng);
                views = order[..rec_b].to_vec();
            }
            let adversarial = step >= recon_only;
            if adversarial && self.config.self_depth && self.depth && self.self_depths.is_none() && !self.last() {
                self.self_depths = Some(self.render_self_depths()?);
            }
            let mut d = 0.0;
            let (mut g, mut rec, mut swd) = (0.0, 0.0, 0.0);
            if adversarial {
                for _ in 0..self.config.d_steps {
                    d = self.d_step(step)?;
                }
                for _ in 0..self.config.g_steps {
                    (g, rec, swd) = self.g_step(step, &views, true)?;
                }
            } else {
                (g, rec, swd) = self.g_step(step, &views, false)?;
            }
            let row = LogRow {
                step,
                scale: n,
                d_loss: d,
                g_loss: g,
                rec_loss: rec,
                swd_loss: swd,
                wall_time: start.elapsed().as_secs_f64(),
            };
            on_row(&row)?;
            rows.push(row);
        }
        Ok(rows)
    }
}

/// Trains scale `n`, then marks it trained and frozen.
pub fn train_scale(
    stack: &mut GeneratorStack,
    n: usize,
    dataset: &MultiViewDataset,
    pyramid: &DatasetPyramid,
    config: &TrainConfig,
    features: Option<&FeatureNet>,
    on_row: &mut dyn FnMut(&LogRow) -> Result<()>,
) -> Result<Vec<LogRow>> {
    let num = stack.num_scales();
    if n == 0 || n > num {
        return Err(Error::invalid(format!("scale {n} out of range 1..={num}")));
    }
    config.validate(num)?;
    if pyramid.scales.len() != num {
        return Err(Error::Precondition(format!(
            "dataset pyramid has {} scales, stack has {num}",
            pyramid.scales.len()
        )));
    }
    if dataset.is_empty() {
        return Err(Error::Precondition("dataset has no views".into()));
    }
    for s in 1..n {
        if !stack.trained[s - 1] || !stack.is_frozen(s) {
            return Err(Error::Precondition(format!(
                "scale {s} must be trained and frozen before scale {n}"
            )));
        }
    }
    if stack.is_frozen(n) {
        return Err(Error::Precondition(format!("scale {n} is frozen")));
    }
    let depth = stack.config.depth_conditioning;
    if depth && n < num && !config.self_depth && !dataset.has_depth() {
        let view = dataset.views.iter().position(|v| v.depth.is_none()).unwrap_or(0);
        return Err(Error::AbsentDepth { view });
    }
    if config.warm_start && n > 1 && n < num {
        stack.params.copy_overlapping(&generator_name(n - 1), &generator_name(n));
        stack.params.copy_overlapping(&discriminator_name(n - 1), &discriminator_name(n));
    }
    let opt = || Adam::new(config.lr, config.beta1, config.beta2);
    let mut t = ScaleTrainer {
        n,
        dataset,
        pyramid,
        config,
        features,
        rng: rng_for(config.seed, 10_000 + n as u64),
        spec: RaySampleSpec::new(config.samples_at(n, num))?,
        depth,
        self_depths: None,
        g_opt: opt(),
        d_opt: opt(),
        stack,
    };
    let rows = t.run(on_row)?;
    stack_done(t.stack, n);
    Ok(rows)
}

fn stack_done(stack: &mut GeneratorStack, n: usize) {
    stack.trained[n - 1] = true;
    stack.freeze_scale(n);
}

/// Where and how far [`train_all`] runs.
#[derive(Default)]
pub struct TrainOptions<'a> {
    pub checkpoint_dir: Option<PathBuf>,
    pub cache_root: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
    pub features: Option<&'a FeatureNet>,
    /// Stop after this scale (inclusive).
    pub stop_after: Option<usize>,
}

const TRAIN_CONFIG_FILE: &str = "train_config.json";

/// Trains every untrained scale in order, resuming from `checkpoint_dir` when it holds a pyramid.
pub fn train_all(
    stack: &mut GeneratorStack,
    dataset: &MultiViewDataset,
    config: &TrainConfig,
    opts: &TrainOptions<'_>,
) -> Result<Vec<LogRow>> {
    dataset.validate()?;
    let num = stack.num_scales();
    config.validate(num)?;
    if let Some(dir) = &opts.checkpoint_dir {
        resume(stack, dir, config)?;
    }
    let pyramid = match &opts.cache_root {
        Some(root) => cached_pyramid(dataset, &stack.schedule, root)?,
        None => build_pyramid(dataset, &stack.schedule),
    };
    let mut writer = match &opts.log_path {
        Some(p) => Some(open_log(p)?),
        None => None,
    };
    let mut on_row = |row: &LogRow| -> Result<()> {
        log::debug!(
            "scale {} step {} d {:.5} g {:.5} rec {:.5} swd {:.5}",
            row.scale, row.step, row.d_loss, row.g_loss, row.rec_loss, row.swd_loss
        );
        if let Some(w) = writer.as_mut() {
            w.serialize(row).map_err(csv_err)?;
            w.flush().map_err(|e| Error::Format(e.to_string()))?;
        }
        Ok(())
    };
    let last = opts.stop_after.unwrap_or(num).min(num);
    let first = stack.trained.iter().position(|t| !t).map_or(num + 1, |i| i + 1);
    let mut rows = Vec::new();
    for n in first..=last {
        log::info!("training scale {n}/{num}");
        rows.extend(train_scale(stack, n, dataset, &pyramid, config, opts.features, &mut on_row)?);
        if let Some(dir) = &opts.checkpoint_dir {
            stack.save_scale(dir, n)?;
            stack.write_index(dir)?;
        }
    }
    Ok(rows)
}

fn resume(stack: &mut GeneratorStack, dir: &Path, config: &TrainConfig) -> Result<()> {
    let cfg_path = dir.join(TRAIN_CONFIG_FILE);
    if !dir.join("pyramid.json").exists() {
        write_json(&cfg_path, config)?;
        stack.save(dir)?;
        return Ok(());
    }
    let loaded = GeneratorStack::load(dir)?;
    if loaded.config != stack.config || loaded.seed != stack.seed {
        return Err(Error::Checkpoint(
            "checkpoint pyramid configuration or seed differs from the requested run".into(),
        ));
    }
    if cfg_path.exists() {
        let stored: TrainConfig = read_json(&cfg_path)?;
        if &stored != config {
            return Err(Error::Checkpoint(
                "checkpoint training configuration differs from the requested run".into(),
            ));
        }
    } else {
        write_json(&cfg_path, config)?;
    }
    let done = loaded.trained.iter().take_while(|t| **t).count();
    if loaded.trained[done..].iter().any(|t| *t) {
        return Err(Error::Checkpoint("trained scales are not contiguous".into()));
    }
    *stack = loaded;
    for s in 1..=done {
        stack.freeze_scale(s);
    }
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("metrics log: {e}"))
}

fn open_log(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new().has_headers(fresh).from_writer(file))
}
