use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{shape_err, Error, Result};
use crate::nn::{Activation, BaseConv, Bound, Conv2d, Init, ParamStore};
use crate::tensor::Tensor;
use crate::vit::ViTBlock;

use super::spec::{ModelSpec, YOLOX_BASE_DEPTH};

/// Objectness/class bias at initialization, so that sigmoid starts near 0.01
/// and the all-negative background does not swamp early training.
const PRIOR_PROB: f64 = 0.01;
/// Std of the prediction-layer weights; keeps initial box sizes near one stride.
const PRED_STD: f64 = 0.01;

/// Logits of one pyramid level.
#[derive(Debug, Clone)]
pub struct ScaleLogits {
    /// `[N, C, H, W]`
    pub cls: Tensor,
    /// `[N, 4, H, W]`: x/y offsets in cells, log width/height in strides.
    pub reg: Tensor,
    /// `[N, 1, H, W]`
    pub obj: Tensor,
}

impl ScaleLogits {
    pub fn tensors(&self) -> [&Tensor; 3] {
        [&self.cls, &self.reg, &self.obj]
    }

    fn map(&self, f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<ScaleLogits> {
        Ok(ScaleLogits {
            cls: f(&self.cls)?,
            reg: f(&self.reg)?,
            obj: f(&self.obj)?,
        })
    }
}

/// Outputs of the three heads, strides ascending.
#[derive(Debug, Clone)]
pub struct FpnLogits {
    pub scales: Vec<ScaleLogits>,
}

impl FpnLogits {
    pub fn batch_size(&self) -> usize {
        self.scales.first().map_or(0, |s| s.cls.shape()[0])
    }

    pub fn num_classes(&self) -> usize {
        self.scales.first().map_or(0, |s| s.cls.shape()[1])
    }

    /// Copy without autodiff history.
    pub fn detach(&self) -> FpnLogits {
        FpnLogits {
            scales: self
                .scales
                .iter()
                .map(|s| ScaleLogits {
                    cls: s.cls.detach(),
                    reg: s.reg.detach(),
                    obj: s.obj.detach(),
                })
                .collect(),
        }
    }

    /// Logits of image `i` as a batch of one.
    pub fn item(&self, i: usize) -> Result<FpnLogits> {
        let scales = self
            .scales
            .iter()
            .map(|s| s.map(|t| t.narrow(0, i, 1)))
            .collect::<Result<_>>()?;
        Ok(FpnLogits { scales })
    }

    /// Concatenates per-image logits along the batch axis.
    pub fn stack(items: &[FpnLogits]) -> Result<FpnLogits> {
        let Some(first) = items.first() else {
            return Err(Error::InvalidArgument("cannot stack zero logit sets".into()));
        };
        if items.iter().any(|l| l.scales.len() != first.scales.len()) {
            return shape_err("logit sets disagree on the number of scales");
        }
        let scales = (0..first.scales.len())
            .map(|s| {
                let cat = |pick: fn(&ScaleLogits) -> &Tensor| {
                    let parts: Vec<Tensor> = items.iter().map(|l| pick(&l.scales[s]).clone()).collect();
                    Tensor::concat(&parts, 0)
                };
                Ok(ScaleLogits {
                    cls: cat(|x| &x.cls)?,
                    reg: cat(|x| &x.reg)?,
                    obj: cat(|x| &x.obj)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(FpnLogits { scales })
    }

    /// Checks the shape contract against a spec for batch size `n`.
    pub fn check_contract(&self, spec: &ModelSpec, n: usize) -> Result<()> {
        if self.scales.len() != 3 {
            return shape_err(format!("expected 3 scales, got {}", self.scales.len()));
        }
        for (s, ((gh, gw), lv)) in spec.grid_sizes().into_iter().zip(&self.scales).enumerate() {
            for (t, c) in lv.tensors().into_iter().zip([spec.num_classes, 4, 1]) {
                if t.shape() != [n, c, gh, gw] {
                    return shape_err(format!(
                        "scale {s}: expected [{n},{c},{gh},{gw}], got {:?}",
                        t.shape()
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub params: usize,
}

#[derive(Debug, Clone)]
struct Bottleneck {
    conv1: BaseConv,
    conv2: BaseConv,
    shortcut: bool,
}

impl Bottleneck {
    fn new(init: &mut Init<'_>, name: &str, ch: usize, shortcut: bool, act: Activation) -> Result<Self> {
        init.scope(name, |init| {
            // A zero scale on the residual branch starts the block as the identity.
            let scale = if shortcut { 0.0 } else { 1.0 };
            Ok(Bottleneck {
                conv1: BaseConv::new(init, "conv1", ch, ch, 1, 1, act)?,
                conv2: BaseConv::with_scale(init, "conv2", ch, ch, 3, 1, act, scale)?,
                shortcut,
            })
        })
    }

    fn forward(&self, p: &Bound, x: &Tensor) -> Result<Tensor> {
        let y = self.conv2.forward(p, &self.conv1.forward(p, x)?)?;
        if self.shortcut {
            y.add(x)
        } else {
            Ok(y)
        }
    }
}

/// Cross-stage partial block: two 1×1 branches, bottlenecks on one, concat, 1×1.
#[derive(Debug, Clone)]
struct CspLayer {
    conv1: BaseConv,
    conv2: BaseConv,
    conv3: BaseConv,
    blocks: Vec<Bottleneck>,
}

impl CspLayer {
    #[allow(clippy::too_many_arguments)]
    fn new(
        init: &mut Init<'_>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        n: usize,
        shortcut: bool,
        act: Activation,
    ) -> Result<Self> {
        let hidden = (out_ch / 2).max(1);
        init.scope(name, |init| {
            let conv1 = BaseConv::new(init, "conv1", in_ch, hidden, 1, 1, act)?;
            let conv2 = BaseConv::new(init, "conv2", in_ch, hidden, 1, 1, act)?;
            let conv3 = BaseConv::new(init, "conv3", 2 * hidden, out_ch, 1, 1, act)?;
            let blocks = (0..n)
                .map(|i| Bottleneck::new(init, &format!("m.{i}"), hidden, shortcut, act))
                .collect::<Result<_>>()?;
            Ok(CspLayer {
                conv1,
                conv2,
                conv3,
                blocks,
            })
        })
    }

    fn forward(&self, p: &Bound, x: &Tensor) -> Result<Tensor> {
        let mut a = self.conv1.forward(p, x)?;
        for b in &self.blocks {
            a = b.forward(p, &a)?;
        }
        let b = self.conv2.forward(p, x)?;
        self.conv3.forward(p, &Tensor::concat(&[a, b], 1)?)
    }
}

const SPP_KERNELS: [usize; 3] = [5, 9, 13];

#[derive(Debug, Clone)]
struct SppBottleneck {
    conv1: BaseConv,
    conv2: BaseConv,
}

impl SppBottleneck {
    fn new(init: &mut Init<'_>, name: &str, in_ch: usize, out_ch: usize, act: Activation) -> Result<Self> {
        let hidden = (in_ch / 2).max(1);
        init.scope(name, |init| {
            Ok(SppBottleneck {
                conv1: BaseConv::new(init, "conv1", in_ch, hidden, 1, 1, act)?,
                conv2: BaseConv::new(init, "conv2", hidden * (SPP_KERNELS.len() + 1), out_ch, 1, 1, act)?,
            })
        })
    }

    fn forward(&self, p: &Bound, x: &Tensor) -> Result<Tensor> {
        let x = self.conv1.forward(p, x)?;
        let mut parts = vec![x.clone()];
        for k in SPP_KERNELS {
            parts.push(x.max_pool2d(k, 1, k / 2)?);
        }
        self.conv2.forward(p, &Tensor::concat(&parts, 1)?)
    }
}

/// Stride-2 downsampling conv followed by a CSP layer (and SPP for dark5).
#[derive(Debug, Clone)]
struct Stage {
    down: BaseConv,
    csp: CspLayer,
    spp: Option<SppBottleneck>,
}

impl Stage {
    fn forward(&self, p: &Bound, x: &Tensor) -> Result<Tensor> {
        let y = self.csp.forward(p, &self.down.forward(p, x)?)?;
        match &self.spp {
            Some(spp) => spp.forward(p, &y),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
struct Pafpn {
    lateral_conv0: BaseConv,
    c3_p4: CspLayer,
    reduce_conv1: BaseConv,
    c3_p3: CspLayer,
    bu_conv2: BaseConv,
    c3_n3: CspLayer,
    bu_conv1: BaseConv,
    c3_n4: CspLayer,
}

impl Pafpn {
    fn new(init: &mut Init<'_>, c: [usize; 5], n: usize, act: Activation) -> Result<Self> {
        let (c3, c4, c5) = (c[2], c[3], c[4]);
        init.scope("neck", |init| {
            Ok(Pafpn {
                lateral_conv0: BaseConv::new(init, "lateral_conv0", c5, c4, 1, 1, act)?,
                c3_p4: CspLayer::new(init, "C3_p4", 2 * c4, c4, n, false, act)?,
                reduce_conv1: BaseConv::new(init, "reduce_conv1", c4, c3, 1, 1, act)?,
                c3_p3: CspLayer::new(init, "C3_p3", 2 * c3, c3, n, false, act)?,
                bu_conv2: BaseConv::new(init, "bu_conv2", c3, c3, 3, 2, act)?,
                c3_n3: CspLayer::new(init, "C3_n3", 2 * c3, c4, n, false, act)?,
                bu_conv1: BaseConv::new(init, "bu_conv1", c4, c4, 3, 2, act)?,
                c3_n4: CspLayer::new(init, "C3_n4", 2 * c4, c5, n, false, act)?,
            })
        })
    }

    /// Maps backbone features (strides 8, 16, 32) to neck outputs at the same strides.
    fn forward(&self, p: &Bound, x2: &Tensor, x1: &Tensor, x0: &Tensor) -> Result<[Tensor; 3]> {
        let fpn_out0 = self.lateral_conv0.forward(p, x0)?;
        let f_out0 = Tensor::concat(&[fpn_out0.upsample_nearest(2)?, x1.clone()], 1)?;
        let f_out0 = self.c3_p4.forward(p, &f_out0)?;

        let fpn_out1 = self.reduce_conv1.forward(p, &f_out0)?;
        let f_out1 = Tensor::concat(&[fpn_out1.upsample_nearest(2)?, x2.clone()], 1)?;
        let pan_out2 = self.c3_p3.forward(p, &f_out1)?;

        let p_out1 = Tensor::concat(&[self.bu_conv2.forward(p, &pan_out2)?, fpn_out1], 1)?;
        let pan_out1 = self.c3_n3.forward(p, &p_out1)?;

        let p_out0 = Tensor::concat(&[self.bu_conv1.forward(p, &pan_out1)?, fpn_out0], 1)?;
        let pan_out0 = self.c3_n4.forward(p, &p_out0)?;
        Ok([pan_out2, pan_out1, pan_out0])
    }
}

/// Decoupled head for one pyramid level.
#[derive(Debug, Clone)]
struct Head {
    stem: BaseConv,
    cls_convs: [BaseConv; 2],
    reg_convs: [BaseConv; 2],
    cls_pred: Conv2d,
    reg_pred: Conv2d,
    obj_pred: Conv2d,
}

impl Head {
    fn new(init: &mut Init<'_>, name: &str, in_ch: usize, hc: usize, classes: usize, act: Activation) -> Result<Self> {
        let prior = -((1.0 - PRIOR_PROB) / PRIOR_PROB).ln();
        init.scope(name, |init| {
            Ok(Head {
                stem: BaseConv::new(init, "stem", in_ch, hc, 1, 1, act)?,
                cls_convs: [
                    BaseConv::new(init, "cls_convs.0", hc, hc, 3, 1, act)?,
                    BaseConv::new(init, "cls_convs.1", hc, hc, 3, 1, act)?,
                ],
                reg_convs: [
                    BaseConv::new(init, "reg_convs.0", hc, hc, 3, 1, act)?,
                    BaseConv::new(init, "reg_convs.1", hc, hc, 3, 1, act)?,
                ],
                cls_pred: Conv2d::new(init, "cls_pred", hc, classes, 1, 1, Some(PRED_STD), Some(prior))?,
                reg_pred: Conv2d::new(init, "reg_pred", hc, 4, 1, 1, Some(PRED_STD), Some(0.0))?,
                obj_pred: Conv2d::new(init, "obj_pred", hc, 1, 1, 1, Some(PRED_STD), Some(prior))?,
            })
        })
    }

    fn forward(&self, p: &Bound, x: &Tensor) -> Result<ScaleLogits> {
        let x = self.stem.forward(p, x)?;
        let c = self.cls_convs[1].forward(p, &self.cls_convs[0].forward(p, &x)?)?;
        let r = self.reg_convs[1].forward(p, &self.reg_convs[0].forward(p, &x)?)?;
        Ok(ScaleLogits {
            cls: self.cls_pred.forward(p, &c)?,
            reg: self.reg_pred.forward(p, &r)?,
            obj: self.obj_pred.forward(p, &r)?,
        })
    }
}

#[derive(Debug, Clone)]
struct Network {
    stem: BaseConv,
    dark: [Stage; 4],
    vit: Option<ViTBlock>,
    neck: Pafpn,
    heads: Vec<Head>,
}

/// A detector: its spec, init seed and parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub seed: u64,
    pub store: ParamStore,
    net: Network,
}

/// Space-to-depth: `[N,C,H,W]` → `[N,4C,H/2,W/2]`, sub-grids ordered
/// (even row, even col), (odd, even), (even, odd), (odd, odd).
fn focus(x: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = *x.shape() else {
        return shape_err(format!("focus expects [N,C,H,W], got {:?}", x.shape()));
    };
    if h % 2 != 0 || w % 2 != 0 {
        return shape_err(format!("focus needs even extents, got {h}x{w}"));
    }
    x.reshape(&[n, c, h / 2, 2, w / 2, 2])?
        .permute(&[0, 5, 3, 1, 2, 4])?
        .reshape(&[n, 4 * c, h / 2, w / 2])
}

impl Model {
    /// Builds the network with parameters drawn from `seed`.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Model> {
        spec.validate()?;
        let act = spec.activation;
        let c = spec.stage_channels();
        let shallow = spec.depth(YOLOX_BASE_DEPTH);
        let deep = spec.depth(3 * YOLOX_BASE_DEPTH);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut store, &mut rng);

        let (stem, dark) = init.scope("backbone", |init| {
            let stem = BaseConv::new(init, "stem", 12, c[0], 3, 1, act)?;
            let mut stage = |name: &str, i: usize, n: usize, last: bool| {
                init.scope(name, |init| {
                    Ok(Stage {
                        down: BaseConv::new(init, "down", c[i - 1], c[i], 3, 2, act)?,
                        csp: CspLayer::new(init, "csp", c[i], c[i], n, !last, act)?,
                        spp: if last {
                            Some(SppBottleneck::new(init, "spp", c[i], c[i], act)?)
                        } else {
                            None
                        },
                    })
                })
            };
            let dark = [
                stage("dark2", 1, shallow, false)?,
                stage("dark3", 2, deep, false)?,
                stage("dark4", 3, deep, false)?,
                stage("dark5", 4, shallow, true)?,
            ];
            Ok((stem, dark))
        })?;

        let vit = match &spec.vit {
            Some(cfg) => {
                let (h, w) = (spec.input_size.0 / 32, spec.input_size.1 / 32);
                Some(ViTBlock::new(&mut init, "vit", cfg, c[4], h, w, act)?)
            }
            None => None,
        };
        let neck = Pafpn::new(&mut init, c, shallow, act)?;
        let hc = spec.head_channels();
        let heads = init.scope("head", |init| {
            [c[2], c[3], c[4]]
                .iter()
                .enumerate()
                .map(|(i, &ch)| Head::new(init, &i.to_string(), ch, hc, spec.num_classes, act))
                .collect::<Result<Vec<_>>>()
        })?;

        Ok(Model {
            spec: spec.clone(),
            seed,
            store,
            net: Network {
                stem,
                dark,
                vit,
                neck,
                heads,
            },
        })
    }

    /// Rebuilds the network for `spec` and replaces its parameters with
    /// `params` (name → values), which must cover every parameter exactly.
    pub fn from_params(spec: &ModelSpec, seed: u64, params: Vec<(String, Vec<usize>, Vec<f64>)>) -> Result<Model> {
        let mut model = Model::build(spec, seed)?;
        if params.len() != model.store.len() {
            return Err(Error::Corrupt(format!(
                "expected {} parameters, found {}",
                model.store.len(),
                params.len()
            )));
        }
        for (name, shape, data) in params {
            let id = model
                .store
                .id_of(&name)
                .ok_or_else(|| Error::Corrupt(format!("unexpected parameter `{name}`")))?;
            if model.store.get(id).shape != shape {
                return Err(Error::Corrupt(format!(
                    "parameter `{name}`: expected shape {:?}, found {shape:?}",
                    model.store.get(id).shape
                )));
            }
            model.store.set(&name, data)?;
        }
        Ok(model)
    }

    /// Name, shape and parameter count of every parameter tensor, in build order.
    pub fn layers(&self) -> Vec<LayerInfo> {
        self.store
            .params()
            .iter()
            .map(|p| LayerInfo {
                name: p.name.clone(),
                shape: p.shape.clone(),
                params: p.numel(),
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// `images`: `[N, 3, H, W]` with intensities scaled to `[0, 1]`.
    pub fn forward(&self, p: &Bound, images: &Tensor) -> Result<FpnLogits> {
        let (h, w) = self.spec.input_size;
        if images.rank() != 4 || images.shape()[1] != 3 || images.shape()[2..] != [h, w] {
            return shape_err(format!("model expects [N,3,{h},{w}], got {:?}", images.shape()));
        }
        let net = &self.net;
        let x = net.stem.forward(p, &focus(images)?)?;
        let d2 = net.dark[0].forward(p, &x)?;
        let d3 = net.dark[1].forward(p, &d2)?;
        let d4 = net.dark[2].forward(p, &d3)?;
        let mut d5 = net.dark[3].forward(p, &d4)?;
        if let Some(vit) = &net.vit {
            d5 = vit.forward(p, &d5)?;
        }
        let feats = net.neck.forward(p, &d3, &d4, &d5)?;
        let scales = net
            .heads
            .iter()
            .zip(&feats)
            .map(|(head, f)| head.forward(p, f))
            .collect::<Result<_>>()?;
        Ok(FpnLogits { scales })
    }

    /// Forward pass without recording gradients.
    pub fn infer(&self, images: &Tensor) -> Result<FpnLogits> {
        self.forward(&self.store.bind(false), images)
    }
}
