//! Multi-view SIFID and pixel diversity of generated scenes.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::autograd::{no_grad, Var};
use crate::dataio::MultiViewDataset;
use crate::error::{Error, Result};
use crate::features::FeatureNet;
use crate::pyramid::{rng_for, GeneratorStack, NoiseStack};
use crate::resample::{resize_trailing, Filter};
use crate::tensor::Tensor;

pub const COV_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub views_m: usize,
    pub scenes_j: usize,
    pub seed: u64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            views_m: 40,
            scenes_j: 50,
            seed: 0,
        }
    }
}

impl MetricsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.views_m == 0 || self.scenes_j < 2 {
            return Err(Error::invalid("metrics need views_m >= 1 and scenes_j >= 2"));
        }
        Ok(())
    }
}

/// Mean and covariance of feature columns.
#[derive(Clone, Debug)]
pub struct Gaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// Covariance had to be regularised (fewer locations than channels).
    pub regularized: bool,
}

/// Gaussian fit over the `P` columns of a `[C,P]` feature matrix (ddof 1).
pub fn gaussian_stats(features: &Tensor) -> Gaussian {
    let (c, p) = (features.shape()[0], features.shape()[1]);
    let m = DMatrix::from_row_slice(c, p, features.data());
    let mean = m.column_mean();
    let mut centered = m;
    for mut col in centered.column_iter_mut() {
        col -= &mean;
    }
    let mut cov = if p > 1 {
        &centered * centered.transpose() / (p as f64 - 1.0)
    } else {
        DMatrix::zeros(c, c)
    };
    let regularized = p < c;
    if regularized {
        for i in 0..c {
            cov[(i, i)] += COV_EPS;
        }
    }
    Gaussian {
        mean,
        cov,
        regularized,
    }
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let e = SymmetricEigen::new(sym);
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &e.eigenvectors * d * e.eigenvectors.transpose()
}

/// `‖μ₁−μ₂‖² + tr(Σ₁ + Σ₂ − 2(Σ₁^½ Σ₂ Σ₁^½)^½)`.
pub fn frechet_distance(a: &Gaussian, b: &Gaussian) -> f64 {
    let d = &a.mean - &b.mean;
    let s1 = psd_sqrt(&a.cov);
    let inner = &s1 * &b.cov * &s1;
    let sym = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    (d.norm_squared() + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt).max(0.0)
}

/// Single-image FID between two `[3,H,W]` images.
pub fn sifid(net: &FeatureNet, a: &Tensor, b: &Tensor) -> Result<(f64, bool)> {
    let fa = image_stats(net, a)?;
    let fb = image_stats(net, b)?;
    Ok((frechet_distance(&fa, &fb), fa.regularized || fb.regularized))
}

fn image_stats(net: &FeatureNet, img: &Tensor) -> Result<Gaussian> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::invalid(format!("expected a [3,H,W] image, got {s:?}")));
    }
    let x = img.reshape(&[1, 3, s[1], s[2]])?;
    let feats = no_grad(|| net.feature_matrices(&Var::constant(x)));
    let last = feats
        .last()
        .ok_or_else(|| Error::invalid("feature extractor has no taps"))?;
    Ok(gaussian_stats(last.value()))
}

fn check_grid(generated: &[Vec<Tensor>], reference: &[Tensor]) -> Result<()> {
    if generated.is_empty() || reference.is_empty() {
        return Err(Error::invalid("metrics need at least one scene and one view"));
    }
    for (j, row) in generated.iter().enumerate() {
        if row.len() != reference.len() {
            return Err(Error::invalid(format!(
                "scene {j} has {} views, reference has {}",
                row.len(),
                reference.len()
            )));
        }
        for (m, img) in row.iter().enumerate() {
            if img.shape() != reference[m].shape() {
                return Err(Error::ShapeMismatch {
                    expected: reference[m].shape().to_vec(),
                    actual: img.shape().to_vec(),
                });
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SifidResult {
    pub value: f64,
    pub per_view: Vec<f64>,
    pub regularized: bool,
}

/// Mean SIFID over scenes `j` and views `m`; `generated[j][m]` pairs with `reference[m]`.
pub fn sifid_mv(net: &FeatureNet, generated: &[Vec<Tensor>], reference: &[Tensor]) -> Result<SifidResult> {
    check_grid(generated, reference)?;
    let refs = reference
        .iter()
        .map(|r| image_stats(net, r))
        .collect::<Result<Vec<_>>>()?;
    let mut regularized = refs.iter().any(|g| g.regularized);
    let mut per_view = vec![0.0; reference.len()];
    for row in generated {
        for (m, img) in row.iter().enumerate() {
            let g = image_stats(net, img)?;
            regularized |= g.regularized;
            per_view[m] += frechet_distance(&g, &refs[m]) / generated.len() as f64;
        }
    }
    let value = per_view.iter().sum::<f64>() / per_view.len() as f64;
    Ok(SifidResult {
        value,
        per_view,
        regularized,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityResult {
    pub value: f64,
    /// `None` for views excluded because their reference is constant.
    pub per_view: Vec<Option<f64>>,
}

/// Shifted by the first value, so a constant sequence gives exactly zero.
fn population_std(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let Some(first) = xs.clone().next() else {
        return 0.0;
    };
    let shifted = xs.map(move |x| x - first);
    let (n, s) = shifted.clone().fold((0usize, 0.0), |(n, s), x| (n + 1, s + x));
    let mean = s / n as f64;
    (shifted.map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt()
}

/// Per-pixel standard deviation over scenes, averaged, over the reference's pixel deviation.
pub fn diversity_mv(generated: &[Vec<Tensor>], reference: &[Tensor]) -> Result<DiversityResult> {
    check_grid(generated, reference)?;
    let mut per_view = Vec::with_capacity(reference.len());
    for (m, r) in reference.iter().enumerate() {
        let ref_std = population_std(r.data().iter().copied());
        if ref_std == 0.0 {
            log::warn!("view {m} has a constant reference image; excluded from diversity");
            per_view.push(None);
            continue;
        }
        let len = r.numel();
        let mut acc = 0.0;
        for i in 0..len {
            acc += population_std(generated.iter().map(move |row| row[m].data()[i]));
        }
        per_view.push(Some(acc / len as f64 / ref_std));
    }
    let used: Vec<f64> = per_view.iter().flatten().copied().collect();
    if used.is_empty() {
        return Err(Error::invalid("every reference view is constant"));
    }
    Ok(DiversityResult {
        value: used.iter().sum::<f64>() / used.len() as f64,
        per_view,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewReport {
    pub view: usize,
    pub sifid: f64,
    pub diversity: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config: MetricsConfig,
    pub seed: u64,
    pub sifid_mv: f64,
    pub diversity_mv: f64,
    pub per_view: Vec<ViewReport>,
    pub covariance_regularized: bool,
    pub pretrained_features: bool,
    pub wall_time: f64,
}

/// Samples `J` scenes, renders them at `M` dataset views and scores both metrics.
pub fn evaluate(
    stack: &GeneratorStack,
    dataset: &MultiViewDataset,
    config: &MetricsConfig,
    net: &FeatureNet,
) -> Result<MetricsReport> {
    config.validate()?;
    if !stack.trained.iter().all(|t| *t) {
        return Err(Error::Precondition("evaluation needs a fully trained pyramid".into()));
    }
    if dataset.is_empty() {
        return Err(Error::Precondition("dataset has no views".into()));
    }
    let start = Instant::now();
    let mut rng = rng_for(config.seed, 0x4d45_5452);
    let m = dataset.len();
    let views: Vec<usize> = if config.views_m <= m {
        let mut v = sample(&mut rng, m, config.views_m).into_vec();
        v.sort_unstable();
        v
    } else {
        (0..config.views_m).map(|i| i % m).collect()
    };
    let side = stack.schedule.final_image_res;
    let reference: Vec<Tensor> = views
        .iter()
        .map(|&v| resize_trailing(&dataset.views[v].rgb, &[side, side], Filter::Area))
        .collect();
    let mut generated = Vec::with_capacity(config.scenes_j);
    for j in 0..config.scenes_j {
        let seed = config.seed.wrapping_mul(1_000_003).wrapping_add(j as u64);
        let noise = NoiseStack::sample(&stack.schedule, seed);
        let vol = stack.sample_volume(&noise)?;
        let row = views
            .iter()
            .map(|&v| stack.render_final(&vol, &dataset.views[v].camera))
            .collect::<Result<Vec<_>>>()?;
        generated.push(row);
    }
    let s = sifid_mv(net, &generated, &reference)?;
    let d = diversity_mv(&generated, &reference)?;
    let per_view = views
        .iter()
        .enumerate()
        .map(|(i, &view)| ViewReport {
            view,
            sifid: s.per_view[i],
            diversity: d.per_view[i],
        })
        .collect();
    Ok(MetricsReport {
        config: config.clone(),
        seed: config.seed,
        sifid_mv: s.value,
        diversity_mv: d.value,
        per_view,
        covariance_regularized: s.regularized,
        pretrained_features: net.pretrained(),
        wall_time: start.elapsed().as_secs_f64(),
    })
}
