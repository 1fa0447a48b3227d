//! Training objective: WGAN-GP, reconstruction and sliced Wasserstein terms.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{grad, Var};
use crate::error::{Error, Result};
use crate::features::{argsort_rows, FeatureNet};
use crate::ops;
use crate::pyramid::rng_for;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_c: f64,
    pub lambda_d: f64,
    pub gp_weight: f64,
    pub swd_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_c: 10.0,
            lambda_d: 30.0,
            gp_weight: 0.1,
            swd_weight: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_c, self.lambda_d, self.gp_weight, self.swd_weight];
        if all.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::invalid("loss weights must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SwdConfig {
    pub projections: usize,
    pub seed: u64,
}

impl Default for SwdConfig {
    fn default() -> Self {
        Self {
            projections: 64,
            seed: 0,
        }
    }
}

/// Mean of the patch map: one score per sample, `[B]`.
pub fn critic_scores(patch: &Var) -> Var {
    let s = patch.shape().to_vec();
    let per = s[1..].iter().product::<usize>();
    let b = ops::sum_axes_keep(patch, &[true, false, false, false]);
    ops::reshape(&ops::scale(&b, 1.0 / per as f64), &[s[0]])
}

/// `mean_b (‖∇ D(x̂_b)‖₂ − 1)²` at `x̂ = ε·real + (1−ε)·fake`, `ε` per sample.
///
/// The result stays differentiable with respect to the critic's parameters.
pub fn gradient_penalty(
    critic: &dyn Fn(&Var) -> Var,
    real: &Tensor,
    fake: &Tensor,
    eps: &[f64],
) -> Var {
    let b = real.shape()[0];
    assert_eq!(eps.len(), b);
    let per = real.numel() / b;
    let mut mix = real.clone();
    {
        let (r, f) = (real.data(), fake.data());
        for (i, m) in mix.data_mut().iter_mut().enumerate() {
            let e = eps[i / per];
            *m = e * r[i] + (1.0 - e) * f[i];
        }
    }
    let x_hat = Var::leaf(mix);
    let score = ops::sum(&critic_scores(&critic(&x_hat)));
    let g = grad(&score, &[x_hat.clone()], true)[0]
        .clone()
        .unwrap_or_else(|| Var::constant(Tensor::zeros(real.shape())));
    let mut keep = vec![false; real.ndim()];
    keep[0] = true;
    let sq = ops::reshape(&ops::sum_axes_keep(&ops::square(&g), &keep), &[b]);
    let norm = ops::sqrt(&sq);
    ops::mean(&ops::square(&ops::add_scalar(&norm, -1.0)))
}

/// Critic and generator losses with their parts.
pub struct AdversarialLosses {
    pub d_loss: Var,
    pub g_loss: Var,
    pub gp: Var,
}

/// WGAN-GP losses. `real`/`fake` are `[B,C,H,W]`; `rng` draws the interpolation weights.
pub fn adversarial_losses<R: Rng + ?Sized>(
    critic: &dyn Fn(&Var) -> Var,
    real: &Var,
    fake: &Var,
    gp_weight: f64,
    rng: &mut R,
) -> Result<AdversarialLosses> {
    if real.shape() != fake.shape() {
        return Err(Error::ShapeMismatch {
            expected: real.shape().to_vec(),
            actual: fake.shape().to_vec(),
        });
    }
    let d_real = ops::mean(&critic_scores(&critic(real)));
    let d_fake = ops::mean(&critic_scores(&critic(fake)));
    let eps: Vec<f64> = (0..real.shape()[0]).map(|_| rng.random::<f64>()).collect();
    let gp = gradient_penalty(critic, real.value(), fake.value(), &eps);
    let d_loss = ops::add(&ops::sub(&d_fake, &d_real), &ops::scale(&gp, gp_weight));
    Ok(AdversarialLosses {
        d_loss,
        g_loss: ops::neg(&d_fake),
        gp,
    })
}

/// Channel concatenation of colour with depth (or low-res colour at the last scale).
pub fn build_disc_input(color: &Var, cond: Option<&Var>) -> Result<Var> {
    match cond {
        None => Ok(color.clone()),
        Some(c) => {
            let (a, b) = (color.shape(), c.shape());
            if a.len() != 4 || b.len() != 4 || a[0] != b[0] || a[2..] != b[2..] {
                return Err(Error::invalid(format!(
                    "cannot concatenate {a:?} with {b:?} for the discriminator"
                )));
            }
            Ok(ops::concat(&[color.clone(), c.clone()], 1))
        }
    }
}

pub fn mse(a: &Var, b: &Var) -> Var {
    ops::mean(&ops::square(&ops::sub(a, b)))
}

/// `λ_c·color_mse + [n<N]·λ_d·depth_mse`.
pub fn reconstruction_from_parts(color_mse: &Var, depth_mse: Option<&Var>, final_scale: bool, w: &LossWeights) -> Var {
    let c = ops::scale(color_mse, w.lambda_c);
    match (final_scale, depth_mse) {
        (false, Some(d)) => ops::add(&c, &ops::scale(d, w.lambda_d)),
        _ => c,
    }
}

/// Eq-5 style reconstruction loss from rendered and target images.
pub fn reconstruction_loss(
    color: &Var,
    target_color: &Var,
    depth: Option<(&Var, &Var)>,
    final_scale: bool,
    w: &LossWeights,
) -> Var {
    let cm = mse(color, target_color);
    let dm = depth.map(|(d, t)| mse(d, t));
    reconstruction_from_parts(&cm, dm.as_ref(), final_scale, w)
}

/// Unit-norm random directions `[K, C]`.
pub fn random_directions(k: usize, c: usize, seed: u64, stream: u64) -> Tensor {
    let mut rng = rng_for(seed, stream);
    let mut t = Tensor::randn(&[k, c], &mut rng);
    for row in t.data_mut().chunks_mut(c) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        row.iter_mut().for_each(|v| *v /= n);
    }
    t
}

/// Sliced Wasserstein distance between `[C,P]` feature sets along `dirs` (`[K,C]`).
pub fn sliced_wasserstein(fa: &Var, fb: &Var, dirs: &Tensor) -> Result<Var> {
    if fa.shape() != fb.shape() || fa.shape().len() != 2 {
        return Err(Error::invalid(format!(
            "feature sets must share a [C,P] shape, got {:?} and {:?}",
            fa.shape(),
            fb.shape()
        )));
    }
    if dirs.shape()[1] != fa.shape()[0] {
        return Err(Error::invalid("projection width does not match feature channels"));
    }
    let d = Var::constant(dirs.clone());
    let pa = ops::matmul(&d, fa);
    let pb = ops::matmul(&d, fb);
    let shape = pa.shape().to_vec();
    let sa = ops::gather(&pa, argsort_rows(pa.value()), &shape);
    let sb = ops::gather(&pb, argsort_rows(pb.value()), &shape);
    Ok(mse(&sa, &sb))
}

/// Texture loss summed over the extractor's taps; images are `[1,3,H,W]`.
pub fn swd_loss(net: &FeatureNet, a: &Var, b: &Var, cfg: &SwdConfig) -> Result<Var> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!(
            "swd images differ in size: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let fa = net.feature_matrices(a);
    let fb = net.feature_matrices(b);
    let mut total: Option<Var> = None;
    for (k, (x, y)) in fa.iter().zip(&fb).enumerate() {
        let dirs = random_directions(cfg.projections, x.shape()[0], cfg.seed, k as u64);
        let term = sliced_wasserstein(x, y, &dirs)?;
        total = Some(match total {
            Some(t) => ops::add(&t, &term),
            None => term,
        });
    }
    Ok(total.unwrap_or_else(|| Var::scalar(0.0)))
}

/// `adv + rec + [n = N]·swd_weight·swd`.
pub fn total_loss(n: usize, num_scales: usize, adv: &Var, rec: &Var, swd: Option<&Var>, w: &LossWeights) -> Var {
    let base = ops::add(adv, rec);
    match swd {
        Some(s) if n == num_scales => ops::add(&base, &ops::scale(s, w.swd_weight)),
        _ => base,
    }
}
