//! Named parameters, convolution stacks, normalization and Adam.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::Rng;
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::autograd::{grad, Var};
use crate::conv::{conv, ConvGeom};
use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub trainable: bool,
}

/// Ordered collection of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) {
        self.params.insert(name.into(), Param { value, trainable });
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
        if p.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                expected: p.value.shape().to_vec(),
                actual: value.shape().to_vec(),
            });
        }
        p.value = value;
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Names starting with `prefix.` that are trainable.
    pub fn trainable_under(&self, prefix: &str) -> Vec<String> {
        let pre = format!("{prefix}.");
        self.params
            .iter()
            .filter(|(k, p)| p.trainable && k.starts_with(&pre))
            .map(|(k, _)| k.clone())
            .collect()
    }

    /// Marks every parameter under `prefix` as frozen (or trainable).
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        let pre = format!("{prefix}.");
        for (k, p) in self.params.iter_mut() {
            if k.starts_with(&pre) && !is_stat(k) {
                p.trainable = trainable;
            }
        }
    }

    pub fn subset(&self, prefix: &str) -> ParamStore {
        let pre = format!("{prefix}.");
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(&pre))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: ParamStore) {
        self.params.extend(other.params);
    }

    /// Copies every `src.*` tensor onto the matching `dst.*` tensor over the
    /// overlapping index range of each axis.
    pub fn copy_overlapping(&mut self, src: &str, dst: &str) {
        let src_pre = format!("{src}.");
        let pairs: Vec<(String, Tensor)> = self
            .params
            .iter()
            .filter_map(|(k, p)| {
                k.strip_prefix(&src_pre)
                    .map(|rest| (format!("{dst}.{rest}"), p.value.clone()))
            })
            .collect();
        for (name, from) in pairs {
            if let Some(p) = self.params.get_mut(&name) {
                copy_overlap(&from, &mut p.value);
            }
        }
    }

    /// Binds trainable parameters as leaves and the rest as constants.
    pub fn bind(&self) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|(k, p)| {
                    let v = if p.trainable {
                        Var::leaf(p.value.clone())
                    } else {
                        Var::constant(p.value.clone())
                    };
                    (k.clone(), v)
                })
                .collect(),
        }
    }

    pub fn apply_updates(&mut self, updates: Vec<(String, Tensor)>) {
        for (k, v) in updates {
            if let Some(p) = self.params.get_mut(&k) {
                p.value = v;
            }
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = self
            .params
            .iter()
            .map(|(k, p)| {
                let b = p.value.data().iter().flat_map(|v| v.to_le_bytes()).collect();
                (k.clone(), b, p.value.shape().to_vec())
            })
            .collect();
        let views = bytes
            .iter()
            .map(|(k, b, s)| {
                TensorView::new(Dtype::F64, s.clone(), b)
                    .map(|v| (k.clone(), v))
                    .map_err(|e| Error::Checkpoint(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let frozen: Vec<&str> = self
            .params
            .iter()
            .filter(|(_, p)| !p.trainable)
            .map(|(k, _)| k.as_str())
            .collect();
        let meta = HashMap::from([("frozen".to_string(), serde_json::to_string(&frozen)?)]);
        safetensors::tensor::serialize(views, Some(meta))
            .map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let frozen: Vec<String> = meta
            .metadata()
            .as_ref()
            .and_then(|m| m.get("frozen"))
            .map(|s| serde_json::from_str(s))
            .transpose()?
            .unwrap_or_default();
        let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut store = ParamStore::new();
        for (name, view) in st.tensors() {
            let t = tensor_from_view(&view)?;
            let trainable = !frozen.contains(&name) && !is_stat(&name);
            store.insert(name, t, trainable);
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Converts an F64 or F32 safetensors view.
pub fn tensor_from_view(view: &TensorView<'_>) -> Result<Tensor> {
    let data: Vec<f64> = match view.dtype() {
        Dtype::F64 => view
            .data()
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect(),
        Dtype::F32 => view
            .data()
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect(),
        d => return Err(Error::Checkpoint(format!("unsupported dtype {d:?}"))),
    };
    Tensor::new(view.shape().to_vec(), data)
}

fn is_stat(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

fn copy_overlap(src: &Tensor, dst: &mut Tensor) {
    if src.ndim() != dst.ndim() {
        return;
    }
    let ext: Vec<usize> = src
        .shape()
        .iter()
        .zip(dst.shape())
        .map(|(a, b)| *a.min(b))
        .collect();
    let total: usize = ext.iter().product();
    let ss = crate::tensor::strides(src.shape());
    let ds = crate::tensor::strides(dst.shape());
    let sd = src.data();
    let dd = dst.data_mut();
    let mut idx = vec![0usize; ext.len()];
    for _ in 0..total {
        let so: usize = idx.iter().zip(&ss).map(|(i, s)| i * s).sum();
        let d_off: usize = idx.iter().zip(&ds).map(|(i, s)| i * s).sum();
        dd[d_off] = sd[so];
        for a in (0..ext.len()).rev() {
            idx[a] += 1;
            if idx[a] < ext[a] {
                break;
            }
            idx[a] = 0;
        }
    }
}

/// Parameters bound into one computation graph.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> &Var {
        self.vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    /// Plain gradients of a scalar for the named variables; unused ones are zero.
    pub fn grads(&self, loss: &Var, names: &[String]) -> BTreeMap<String, Tensor> {
        let inputs: Vec<Var> = names.iter().map(|n| self.var(n).clone()).collect();
        let gs = grad(loss, &inputs, false);
        names
            .iter()
            .zip(gs)
            .zip(&inputs)
            .map(|((n, g), v)| {
                let t = g.map(|g| g.value().clone()).unwrap_or_else(|| Tensor::zeros(v.shape()));
                (n.clone(), t)
            })
            .collect()
    }
}

/// Forward-pass context: bound parameters, mode and pending running-stat updates.
pub struct Ctx<'a> {
    pub vars: &'a Bound,
    pub training: bool,
    updates: RefCell<Vec<(String, Tensor)>>,
}

impl<'a> Ctx<'a> {
    pub fn new(vars: &'a Bound, training: bool) -> Self {
        Self {
            vars,
            training,
            updates: RefCell::new(Vec::new()),
        }
    }

    pub fn take_updates(&self) -> Vec<(String, Tensor)> {
        std::mem::take(&mut self.updates.borrow_mut())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    None,
    Batch,
    Instance,
}

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LEAKY_SLOPE: f64 = 0.2;

/// One `conv → norm → leaky ReLU` layer; the last two are optional.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_c: usize,
    pub out_c: usize,
    pub geom: ConvGeom,
    pub norm: Norm,
    pub activate: bool,
}

/// A sequential stack of [`ConvSpec`] layers on `[B, C, D, H, W]` inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvStack {
    pub prefix: String,
    pub layers: Vec<ConvSpec>,
}

impl ConvStack {
    fn name(&self, i: usize, what: &str) -> String {
        format!("{}.{}.{}", self.prefix, i, what)
    }

    /// Registers the stack's parameters with normal(0, `std`) weights.
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, std: f64, rng: &mut R) {
        for (i, l) in self.layers.iter().enumerate() {
            let k = l.geom.kernel;
            let w = Tensor::randn_scaled(&[l.out_c, l.in_c, k[0], k[1], k[2]], std, rng);
            store.insert(self.name(i, "weight"), w, true);
            store.insert(self.name(i, "bias"), Tensor::zeros(&[l.out_c]), true);
            if l.norm != Norm::None {
                store.insert(self.name(i, "gamma"), Tensor::ones(&[l.out_c]), true);
                store.insert(self.name(i, "beta"), Tensor::zeros(&[l.out_c]), true);
            }
            if l.norm == Norm::Batch {
                store.insert(self.name(i, "running_mean"), Tensor::zeros(&[l.out_c]), false);
                store.insert(self.name(i, "running_var"), Tensor::ones(&[l.out_c]), false);
            }
        }
    }

    pub fn forward(&self, ctx: &Ctx<'_>, x: &Var) -> Var {
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            assert_eq!(
                h.shape()[1],
                l.in_c,
                "{} layer {i}: expected {} input channels",
                self.prefix,
                l.in_c
            );
            h = conv(&h, ctx.vars.var(&self.name(i, "weight")), l.geom);
            h = ops::add(&h, &channel_vec(ctx.vars.var(&self.name(i, "bias"))));
            h = match l.norm {
                Norm::None => h,
                Norm::Instance => {
                    let y = normalize(&h, &[true, true, false, false, false]).0;
                    self.affine(ctx, i, &y)
                }
                Norm::Batch => {
                    let y = self.batch_norm(ctx, i, &h);
                    self.affine(ctx, i, &y)
                }
            };
            if l.activate {
                h = ops::leaky_relu(&h, LEAKY_SLOPE);
            }
        }
        h
    }

    fn affine(&self, ctx: &Ctx<'_>, i: usize, y: &Var) -> Var {
        let g = channel_vec(ctx.vars.var(&self.name(i, "gamma")));
        let b = channel_vec(ctx.vars.var(&self.name(i, "beta")));
        ops::add(&ops::mul(y, &g), &b)
    }

    fn batch_norm(&self, ctx: &Ctx<'_>, i: usize, h: &Var) -> Var {
        let rm_name = self.name(i, "running_mean");
        let rv_name = self.name(i, "running_var");
        if !ctx.training {
            let rm = channel_vec(ctx.vars.var(&rm_name));
            let rv = channel_vec(ctx.vars.var(&rv_name));
            let inv = rv.value().map(|v| 1.0 / (v + NORM_EPS).sqrt());
            return ops::mul_const(&ops::sub(h, &rm), &inv);
        }
        let (y, mean, var) = normalize(h, &[false, true, false, false, false]);
        let n = (h.value().numel() / h.shape()[1]) as f64;
        let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        let rm = ctx.vars.var(&rm_name).value();
        let rv = ctx.vars.var(&rv_name).value();
        let c = rm.numel();
        let mean = mean.reshape(&[c]).unwrap();
        let var = var.reshape(&[c]).unwrap();
        let new_rm = rm.zip_map(&mean, |r, m| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * m);
        let new_rv = rv.zip_map(&var, |r, v| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * v * unbiased);
        ctx.updates.borrow_mut().push((rm_name, new_rm));
        ctx.updates.borrow_mut().push((rv_name, new_rv));
        y
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map(|l| l.out_c).unwrap_or(0)
    }

    /// Index of the last layer's weight and bias names.
    pub fn last_layer_names(&self) -> (String, String) {
        let i = self.layers.len() - 1;
        (self.name(i, "weight"), self.name(i, "bias"))
    }
}

/// `[C]` to `[1, C, 1, 1, 1]` for broadcasting over 5-D activations.
fn channel_vec(v: &Var) -> Var {
    let c = v.shape()[0];
    ops::reshape(v, &[1, c, 1, 1, 1])
}

/// Zero-mean, unit-variance over every axis where `keep` is false.
/// Returns the normalized tensor plus the (biased) mean and variance.
pub fn normalize(x: &Var, keep: &[bool]) -> (Var, Tensor, Tensor) {
    let n: usize = x
        .shape()
        .iter()
        .zip(keep)
        .filter(|(_, k)| !**k)
        .map(|(d, _)| *d)
        .product();
    let inv_n = 1.0 / n as f64;
    let mean = ops::scale(&ops::sum_axes_keep(x, keep), inv_n);
    let xc = ops::sub(x, &mean);
    let var = ops::scale(&ops::sum_axes_keep(&ops::square(&xc), keep), inv_n);
    let y = ops::mul(&xc, &ops::powf(&ops::add_scalar(&var, NORM_EPS), -0.5));
    (y, mean.value().clone(), var.value().clone())
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (name, g) in grads {
            let Some(p) = store.params.get_mut(name) else {
                continue;
            };
            if !p.trainable {
                continue;
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let (lr, eps) = (self.lr, self.eps);
            let md = m.data_mut();
            let vd = v.data_mut();
            let pd = p.value.data_mut();
            for i in 0..pd.len() {
                let gi = g.data()[i];
                md[i] = b1 * md[i] + (1.0 - b1) * gi;
                vd[i] = b2 * vd[i] + (1.0 - b2) * gi * gi;
                let mh = md[i] / c1;
                let vh = vd[i] / c2;
                pd[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::no_grad;
    use rand::SeedableRng;

    fn stack(norm: Norm) -> ConvStack {
        ConvStack {
            prefix: "net".into(),
            layers: vec![
                ConvSpec {
                    in_c: 2,
                    out_c: 3,
                    geom: ConvGeom::cube(3, 1),
                    norm,
                    activate: true,
                },
                ConvSpec {
                    in_c: 3,
                    out_c: 1,
                    geom: ConvGeom::cube(3, 1),
                    norm: Norm::None,
                    activate: false,
                },
            ],
        }
    }

    #[test]
    fn instance_norm_output_is_standardized() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let x = Var::constant(Tensor::randn(&[2, 3, 2, 3, 4], &mut rng));
        let (y, _, _) = normalize(&x, &[true, true, false, false, false]);
        for p in 0..6 {
            let s = &y.value().data()[p * 24..(p + 1) * 24];
            let mean: f64 = s.iter().sum::<f64>() / 24.0;
            let var: f64 = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 24.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn batch_norm_tracks_running_stats() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let net = stack(Norm::Batch);
        let mut store = ParamStore::new();
        net.init(&mut store, 0.5, &mut rng);
        let x = Var::constant(Tensor::randn(&[1, 2, 3, 3, 3], &mut rng));
        let bound = store.bind();
        let ctx = Ctx::new(&bound, true);
        let _ = net.forward(&ctx, &x);
        let ups = ctx.take_updates();
        assert_eq!(ups.len(), 2);
        store.apply_updates(ups);
        assert!(store.tensor("net.0.running_mean").unwrap().data().iter().any(|v| *v != 0.0));
        assert!(!store.get("net.0.running_mean").unwrap().trainable);
        // Eval mode records nothing.
        let bound = store.bind();
        let ctx = Ctx::new(&bound, false);
        let _ = no_grad(|| net.forward(&ctx, &x));
        assert!(ctx.take_updates().is_empty());
    }

    #[test]
    fn zero_weights_give_constant_bias() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let net = stack(Norm::Instance);
        let mut store = ParamStore::new();
        net.init(&mut store, 0.0, &mut rng);
        store.set("net.1.bias", Tensor::full(&[1], 0.75)).unwrap();
        let bound = store.bind();
        let x = Var::constant(Tensor::randn(&[1, 2, 3, 3, 3], &mut rng));
        let y = net.forward(&Ctx::new(&bound, true), &x);
        assert!(y.value().data().iter().all(|v| *v == 0.75));
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::new();
        store.insert("p.x", Tensor::new(vec![2], vec![3.0, -2.0]).unwrap(), true);
        let mut opt = Adam::new(0.1, 0.9, 0.999);
        for _ in 0..500 {
            let b = store.bind();
            let x = b.var("p.x");
            let loss = ops::sum(&ops::square(x));
            let g = b.grads(&loss, &store.trainable_under("p"));
            opt.step(&mut store, &g);
        }
        assert!(store.tensor("p.x").unwrap().data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn frozen_params_do_not_move() {
        let mut store = ParamStore::new();
        store.insert("a.x", Tensor::scalar(1.0), true);
        store.set_trainable("a", false);
        assert!(store.trainable_under("a").is_empty());
        let b = store.bind();
        assert!(!b.var("a.x").requires_grad());
        let mut opt = Adam::new(0.1, 0.9, 0.999);
        let g = BTreeMap::from([("a.x".to_string(), Tensor::scalar(1.0))]);
        opt.step(&mut store, &g);
        assert_eq!(store.tensor("a.x").unwrap().item(), 1.0);
    }

    #[test]
    fn bytes_round_trip_keeps_flags() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        stack(Norm::Batch).init(&mut store, 0.02, &mut rng);
        store.set_trainable("net", false);
        let back = ParamStore::from_bytes(&store.to_bytes().unwrap()).unwrap();
        assert_eq!(back, store);
    }

    #[test]
    fn overlapping_copy() {
        let mut store = ParamStore::new();
        store.insert("a.w", Tensor::new(vec![2, 3], (0..6).map(|v| v as f64).collect()).unwrap(), true);
        store.insert("b.w", Tensor::full(&[2, 4], -1.0), true);
        store.copy_overlapping("a", "b");
        assert_eq!(
            store.tensor("b.w").unwrap().data(),
            &[0.0, 1.0, 2.0, -1.0, 3.0, 4.0, 5.0, -1.0]
        );
    }
}
