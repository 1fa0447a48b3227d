//! Frozen image feature extractors: VGG-19 (up to relu5_1) and the
//! Inception-v3 stem up to its first max-pool.
//!
//! Weights are read from a safetensors file using torchvision parameter
//! names. Without a file, a seeded He-normal initialisation is used instead;
//! [`FeatureNet::pretrained`] reports which one is active.

use std::path::Path;
use std::rc::Rc;

use safetensors::SafeTensors;

use crate::autograd::Var;
use crate::conv::{conv, ConvGeom};
use crate::error::{Error, Result};
use crate::nn::{tensor_from_view, ParamStore};
use crate::ops;
use crate::pyramid::rng_for;
use crate::tensor::Tensor;

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Vgg19,
    InceptionStem,
}

#[derive(Clone, Debug)]
enum Layer {
    Conv {
        name: String,
        in_c: usize,
        out_c: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        /// Batch-norm prefix (eval mode, eps 1e-3) for the inception stem.
        bn: Option<String>,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    Tap(&'static str),
}

/// A feed-forward feature network.
#[derive(Clone, Debug)]
pub struct FeatureNet {
    kind: Kind,
    layers: Vec<Layer>,
    params: ParamStore,
    pretrained: bool,
}

fn vgg_layers() -> Vec<Layer> {
    let cfg: [&[usize]; 5] = [&[64, 64], &[128, 128], &[256; 4], &[512; 4], &[512]];
    let taps = ["relu1_1", "relu2_1", "relu3_1", "relu4_1", "relu5_1"];
    let mut layers = Vec::new();
    let mut idx = 0;
    let mut in_c = 3;
    for (block, widths) in cfg.iter().enumerate() {
        for (j, &w) in widths.iter().enumerate() {
            layers.push(Layer::Conv {
                name: format!("features.{idx}"),
                in_c,
                out_c: w,
                stride: 1,
                pad: 1,
                bias: true,
                bn: None,
            });
            layers.push(Layer::Relu);
            if j == 0 {
                layers.push(Layer::Tap(taps[block]));
            }
            in_c = w;
            idx += 2;
        }
        if block < 4 {
            layers.push(Layer::MaxPool { kernel: 2, stride: 2 });
            idx += 1;
        }
    }
    // Nothing past relu5_1 is needed.
    while !matches!(layers.last(), Some(Layer::Tap(_))) {
        layers.pop();
    }
    layers
}

fn inception_layers() -> Vec<Layer> {
    let conv = |name: &str, in_c, out_c, stride, pad| Layer::Conv {
        name: format!("{name}.conv"),
        in_c,
        out_c,
        stride,
        pad,
        bias: false,
        bn: Some(format!("{name}.bn")),
    };
    vec![
        conv("Conv2d_1a_3x3", 3, 32, 2, 0),
        Layer::Relu,
        conv("Conv2d_2a_3x3", 32, 32, 1, 0),
        Layer::Relu,
        conv("Conv2d_2b_3x3", 32, 64, 1, 1),
        Layer::Relu,
        Layer::MaxPool { kernel: 3, stride: 2 },
        Layer::Tap("pool1"),
    ]
}

impl FeatureNet {
    pub fn vgg19(weights: Option<&Path>, seed: u64) -> Result<Self> {
        Self::build(Kind::Vgg19, vgg_layers(), weights, seed)
    }

    pub fn inception_stem(weights: Option<&Path>, seed: u64) -> Result<Self> {
        Self::build(Kind::InceptionStem, inception_layers(), weights, seed)
    }

    fn build(kind: Kind, layers: Vec<Layer>, weights: Option<&Path>, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut rng = rng_for(seed, 77);
        for l in &layers {
            if let Layer::Conv {
                name,
                in_c,
                out_c,
                bias,
                bn,
                ..
            } = l
            {
                let std = (2.0 / (*in_c as f64 * 9.0)).sqrt();
                params.insert(
                    format!("{name}.weight"),
                    Tensor::randn_scaled(&[*out_c, *in_c, 3, 3], std, &mut rng),
                    false,
                );
                if *bias {
                    params.insert(format!("{name}.bias"), Tensor::zeros(&[*out_c]), false);
                }
                if let Some(bn) = bn {
                    params.insert(format!("{bn}.weight"), Tensor::ones(&[*out_c]), false);
                    params.insert(format!("{bn}.bias"), Tensor::zeros(&[*out_c]), false);
                    params.insert(format!("{bn}.running_mean"), Tensor::zeros(&[*out_c]), false);
                    params.insert(format!("{bn}.running_var"), Tensor::ones(&[*out_c]), false);
                }
            }
        }
        let pretrained = match weights {
            Some(path) => {
                let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
                let st = SafeTensors::deserialize(&bytes)
                    .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
                let names: Vec<String> = params.names().map(String::from).collect();
                for name in names {
                    let view = st.tensor(&name).map_err(|_| {
                        Error::Checkpoint(format!("{}: missing tensor {name}", path.display()))
                    })?;
                    params.set(&name, tensor_from_view(&view)?)?;
                }
                true
            }
            None => false,
        };
        Ok(Self {
            kind,
            layers,
            params,
            pretrained,
        })
    }

    /// Resolves weights from an explicit path or `$SINGRAV_WEIGHTS/<file>`.
    pub fn resolve_weights(explicit: Option<&Path>, file: &str) -> Option<std::path::PathBuf> {
        if let Some(p) = explicit {
            return Some(p.to_path_buf());
        }
        let dir = std::env::var_os("SINGRAV_WEIGHTS")?;
        let p = Path::new(&dir).join(file);
        p.exists().then_some(p)
    }

    pub fn kind(&self) -> Kind {
        self.kind
    }

    pub fn pretrained(&self) -> bool {
        self.pretrained
    }

    pub fn tap_names(&self) -> Vec<&'static str> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Tap(n) => Some(*n),
                _ => None,
            })
            .collect()
    }

    /// Per-tap feature maps `[B,C,h,w]` for a `[B,3,H,W]` image in `[0,1]`.
    pub fn features(&self, img: &Var) -> Vec<Var> {
        let s = img.shape().to_vec();
        assert!(s.len() == 4 && s[1] == 3, "feature input must be [B,3,H,W], got {s:?}");
        let (mean, std) = match self.kind {
            Kind::Vgg19 => (IMAGENET_MEAN, IMAGENET_STD),
            Kind::InceptionStem => ([0.5; 3], [0.5; 3]),
        };
        let m = Tensor::new(vec![1, 3, 1, 1], mean.to_vec()).unwrap();
        let inv = Tensor::new(vec![1, 3, 1, 1], std.iter().map(|s| 1.0 / s).collect()).unwrap();
        let mut h = ops::mul(&ops::sub(img, &Var::constant(m)), &Var::constant(inv));
        let mut out = Vec::new();
        for l in &self.layers {
            h = match l {
                Layer::Conv {
                    name,
                    in_c,
                    out_c,
                    stride,
                    pad,
                    bias,
                    bn,
                } => {
                    let w = self.params.tensor(&format!("{name}.weight")).unwrap();
                    let w5 = Var::constant(w.reshape(&[*out_c, *in_c, 1, 3, 3]).unwrap());
                    let hs = h.shape().to_vec();
                    let x5 = ops::reshape(&h, &[hs[0], hs[1], 1, hs[2], hs[3]]);
                    let y = conv(&x5, &w5, ConvGeom::square(3, *stride, *pad));
                    let ys = y.shape().to_vec();
                    let mut y = ops::reshape(&y, &[ys[0], ys[1], ys[3], ys[4]]);
                    if *bias {
                        let b = self.params.tensor(&format!("{name}.bias")).unwrap();
                        y = ops::add(&y, &Var::constant(b.reshape(&[1, *out_c, 1, 1]).unwrap()));
                    }
                    if let Some(bn) = bn {
                        let get = |k: &str| self.params.tensor(&format!("{bn}.{k}")).unwrap().clone();
                        let (g, b, rm, rv) = (get("weight"), get("bias"), get("running_mean"), get("running_var"));
                        let scale: Vec<f64> = (0..*out_c).map(|c| g.data()[c] / (rv.data()[c] + 1e-3).sqrt()).collect();
                        let shift: Vec<f64> = (0..*out_c).map(|c| b.data()[c] - rm.data()[c] * scale[c]).collect();
                        let sc = Tensor::new(vec![1, *out_c, 1, 1], scale).unwrap();
                        let sh = Tensor::new(vec![1, *out_c, 1, 1], shift).unwrap();
                        y = ops::add(&ops::mul(&y, &Var::constant(sc)), &Var::constant(sh));
                    }
                    y
                }
                Layer::Relu => ops::relu(&h),
                Layer::MaxPool { kernel, stride } => {
                    let hs = h.shape();
                    if hs[2] < *kernel || hs[3] < *kernel {
                        break;
                    }
                    ops::max_pool2d(&h, *kernel, *stride)
                }
                Layer::Tap(_) => {
                    out.push(h.clone());
                    h
                }
            };
        }
        out
    }

    /// Features of a single image flattened to `[C, P]` per tap.
    pub fn feature_matrices(&self, img: &Var) -> Vec<Var> {
        self.features(img)
            .into_iter()
            .map(|f| {
                let s = f.shape().to_vec();
                assert_eq!(s[0], 1, "feature_matrices takes one image");
                ops::reshape(&f, &[s[1], s[2] * s[3]])
            })
            .collect()
    }
}

/// Row-wise argsort of a `[K, P]` tensor, as flat gather indices.
pub(crate) fn argsort_rows(t: &Tensor) -> Rc<Vec<usize>> {
    let [k, p] = t.shape() else {
        panic!("argsort_rows expects 2-D input");
    };
    let d = t.data();
    let mut idx = Vec::with_capacity(k * p);
    for r in 0..*k {
        let mut row: Vec<usize> = (0..*p).collect();
        row.sort_by(|&a, &b| d[r * p + a].total_cmp(&d[r * p + b]));
        idx.extend(row.into_iter().map(|c| r * p + c));
    }
    Rc::new(idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::no_grad;

    #[test]
    fn vgg_tap_shapes() {
        let net = FeatureNet::vgg19(None, 0).unwrap();
        assert!(!net.pretrained());
        assert_eq!(net.tap_names(), ["relu1_1", "relu2_1", "relu3_1", "relu4_1", "relu5_1"]);
        let img = Var::constant(Tensor::full(&[1, 3, 16, 16], 0.5));
        let f = no_grad(|| net.features(&img));
        let shapes: Vec<Vec<usize>> = f.iter().map(|v| v.shape().to_vec()).collect();
        assert_eq!(
            shapes,
            vec![
                vec![1, 64, 16, 16],
                vec![1, 128, 8, 8],
                vec![1, 256, 4, 4],
                vec![1, 512, 2, 2],
                vec![1, 512, 1, 1]
            ]
        );
    }

    #[test]
    fn inception_stem_shape() {
        let net = FeatureNet::inception_stem(None, 0).unwrap();
        let img = Var::constant(Tensor::full(&[1, 3, 48, 48], 0.3));
        let f = no_grad(|| net.features(&img));
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].shape(), &[1, 64, 10, 10]);
    }

    #[test]
    fn loads_weights_by_torchvision_name() {
        let net = FeatureNet::inception_stem(None, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.safetensors");
        let mut store = net.params.clone();
        store.set("Conv2d_1a_3x3.bn.bias", Tensor::full(&[32], 0.25)).unwrap();
        store.save(&path).unwrap();
        let loaded = FeatureNet::inception_stem(Some(&path), 99).unwrap();
        assert!(loaded.pretrained());
        assert_eq!(loaded.params.tensor("Conv2d_1a_3x3.bn.bias").unwrap().data()[0], 0.25);
        assert_eq!(
            loaded.params.tensor("Conv2d_2b_3x3.conv.weight").unwrap(),
            net.params.tensor("Conv2d_2b_3x3.conv.weight").unwrap()
        );
        let mut partial = ParamStore::new();
        partial.insert("x.weight", Tensor::zeros(&[1]), false);
        partial.save(&path).unwrap();
        assert!(FeatureNet::inception_stem(Some(&path), 0).is_err());
    }

    #[test]
    fn argsort() {
        let t = Tensor::new(vec![2, 3], vec![3.0, 1.0, 2.0, -1.0, -3.0, 0.0]).unwrap();
        assert_eq!(*argsort_rows(&t), vec![1, 2, 0, 4, 3, 5]);
    }
}
