//! Central finite-difference checks of every differentiable op, the encoder,
//! the ViT insert, the whole detector and the loss stack.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sonar_kd::boxes::{BBox, GtBox};
use sonar_kd::detector::{FpnLogits, Model, ModelSpec, ScaleLogits};
use sonar_kd::distill::{hard_loss, soft_loss, KdNormalization, KdWeights};
use sonar_kd::nn::{Activation, Init, ParamStore};
use sonar_kd::tensor::{grad_check, Conv2dOptions, GradCheckReport, FD_STEP};
use sonar_kd::vit::{encoder_layer, mhsa, EncoderWeights, MhsaWeights, ViTBlock, ViTConfig};
use sonar_kd::{Result, Tensor};

pub struct Check {
    pub name: String,
    pub report: GradCheckReport,
}

struct Gen(ChaCha8Rng);

impl Gen {
    fn normal(&mut self, shape: &[usize]) -> Tensor {
        Tensor::randn(shape, 1.0, &mut self.0).unwrap()
    }

    fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| self.0.gen_range(lo..hi)).collect()).unwrap()
    }

    /// Distinct values at least 0.05 apart, so no max/min tie sits within a step.
    fn spaced(&mut self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - n as f64 * 0.025).collect();
        v.shuffle(&mut self.0);
        Tensor::new(shape, v).unwrap()
    }
}

/// Random fixed weights so a tensor output reduces to a scalar with
/// non-uniform sensitivity.
fn weighted(out: Tensor, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::randn(out.shape(), 1.0, &mut rng)?;
    Ok(out.mul(&w)?.sum())
}

fn check(name: &str, inputs: &[Tensor], f: impl Fn(&[Tensor]) -> Result<Tensor>) -> Result<Check> {
    Ok(Check {
        name: name.to_string(),
        report: grad_check(f, inputs, FD_STEP)?,
    })
}

pub fn op_checks() -> Result<Vec<Check>> {
    let mut g = Gen(ChaCha8Rng::seed_from_u64(11));
    let a = g.normal(&[2, 3, 4]);
    let b = g.normal(&[2, 3, 4]);
    let pos = g.uniform(&[2, 3, 4], 0.5, 2.0);
    let s1 = g.spaced(&[2, 3, 4]);
    // half a step off s1 so the pair never ties
    let s2 = g.spaced(&[2, 3, 4]).add_scalar(0.025).detach();
    let row = g.normal(&[4]);
    let m1 = g.normal(&[2, 3, 5]);
    let m2 = g.normal(&[5, 4]);
    let img = g.normal(&[2, 3, 5, 5]);
    let kern = g.normal(&[4, 3, 3, 3]);
    let bias = g.normal(&[4]);
    let pool_in = g.spaced(&[1, 2, 5, 5]);
    let ch = g.normal(&[3]);
    let probs = g.uniform(&[2, 3, 4], 0.05, 0.95);
    let targets = g.uniform(&[2, 3, 4], 0.0, 1.0);

    let w = |t: Tensor| weighted(t, 5);
    let mut out = vec![
        check("add", &[a.clone(), b.clone()], |x| w(x[0].add(&x[1])?))?,
        check("sub", &[a.clone(), b.clone()], |x| w(x[0].sub(&x[1])?))?,
        check("mul", &[a.clone(), b.clone()], |x| w(x[0].mul(&x[1])?))?,
        check("div", &[a.clone(), pos.clone()], |x| w(x[0].div(&x[1])?))?,
        check("minimum", &[s1.clone(), s2.clone()], |x| w(x[0].minimum(&x[1])?))?,
        check("maximum", &[s1.clone(), s2.clone()], |x| w(x[0].maximum(&x[1])?))?,
        check("add_broadcast", &[a.clone(), row.clone()], |x| w(x[0].add_broadcast(&x[1])?))?,
        check("mul_broadcast", &[a.clone(), row.clone()], |x| w(x[0].mul_broadcast(&x[1])?))?,
        check("add_scalar", &[a.clone()], |x| w(x[0].add_scalar(0.7)))?,
        check("mul_scalar", &[a.clone()], |x| w(x[0].mul_scalar(-1.3)))?,
        check("neg", &[a.clone()], |x| w(x[0].neg()))?,
        check("exp", &[a.clone()], |x| w(x[0].exp()))?,
        check("ln", &[pos.clone()], |x| w(x[0].ln()))?,
        check("square", &[a.clone()], |x| w(x[0].square()))?,
        check("sigmoid", &[a.clone()], |x| w(x[0].sigmoid()))?,
        check("silu", &[a.clone()], |x| w(x[0].silu()))?,
        check("relu", &[s2.clone()], |x| w(x[0].relu()))?,
        check("leaky_relu", &[s2.clone()], |x| w(x[0].leaky_relu(0.1)))?,
        check("softplus", &[a.clone()], |x| w(x[0].softplus()))?,
        check("sum", &[a.clone()], |x| Ok(x[0].sum().mul_scalar(1.5)))?,
        check("mean", &[a.clone()], |x| Ok(x[0].mean().mul_scalar(1.5)))?,
        check("sum_axis", &[a.clone()], |x| w(x[0].sum_axis(1)?))?,
        check("reshape", &[a.clone()], |x| w(x[0].reshape(&[4, 6])?))?,
        check("permute", &[a.clone()], |x| w(x[0].permute(&[2, 0, 1])?))?,
        check("transpose_last2", &[a.clone()], |x| w(x[0].transpose_last2()?))?,
        check("concat", &[a.clone(), b.clone()], |x| w(Tensor::concat(&[x[0].clone(), x[1].clone()], 1)?))?,
        check("narrow", &[a.clone()], |x| w(x[0].narrow(2, 1, 2)?))?,
        check("gather", &[a.clone()], |x| w(x[0].gather(&[0, 5, 5, 23, 7])?))?,
        check("matmul", &[m1.clone(), m2.clone()], |x| w(x[0].matmul(&x[1])?))?,
        check("linear", &[m1.clone(), m2.clone(), row.clone()], |x| w(x[0].linear(&x[1], Some(&x[2]))?))?,
        check("conv2d", &[img.clone(), kern.clone(), bias.clone()], |x| {
            w(x[0].conv2d(&x[1], Some(&x[2]), Conv2dOptions { stride: 1, padding: 1 })?)
        })?,
        check("conv2d_strided", &[img.clone(), kern.clone()], |x| {
            w(x[0].conv2d(&x[1], None, Conv2dOptions { stride: 2, padding: 1 })?)
        })?,
        check("max_pool2d", &[pool_in.clone()], |x| w(x[0].max_pool2d(3, 1, 1)?))?,
        check("max_pool2d_strided", &[pool_in.clone()], |x| w(x[0].max_pool2d(2, 2, 0)?))?,
        check("upsample_nearest", &[img.clone()], |x| w(x[0].upsample_nearest(2)?))?,
        check("channel_affine", &[img.clone(), ch.clone(), ch.mul_scalar(0.5)], |x| {
            w(x[0].channel_affine(&x[1], &x[2])?)
        })?,
        check("softmax", &[a.clone()], |x| w(x[0].softmax(1)?))?,
        check("log_softmax", &[a.clone()], |x| w(x[0].log_softmax(2)?))?,
        check("layer_norm", &[a.clone()], |x| w(x[0].layer_norm(1e-5)?))?,
        check("mse", &[a.clone(), b.clone()], |x| x[0].mse(&x[1]))?,
        check("bce", &[probs.clone(), targets.clone()], |x| x[0].bce(&x[1]))?,
        check("bce_elementwise", &[probs.clone(), targets.clone()], |x| w(x[0].bce_elementwise(&x[1])?))?,
        check("kl_div", &[a.clone(), b.clone()], |x| x[0].softmax(1)?.kl_div(&x[1].softmax(1)?, 1))?,
        check("kl_div_log_input", &[a.clone(), b.clone()], |x| {
            x[0].log_softmax(1)?.kl_div_log_input(&x[1].softmax(1)?)
        })?,
    ];
    out.push(attention_check(&mut g)?);
    Ok(out)
}

fn mhsa_weights(x: &[Tensor]) -> MhsaWeights {
    MhsaWeights {
        wq: x[0].clone(),
        bq: x[1].clone(),
        wk: x[2].clone(),
        bk: x[3].clone(),
        wv: x[4].clone(),
        bv: x[5].clone(),
        wo: x[6].clone(),
        bo: x[7].clone(),
    }
}

fn attention_check(g: &mut Gen) -> Result<Check> {
    let (n, t, d) = (2, 3, 4);
    let mut inputs = vec![g.normal(&[n, t, d])];
    for _ in 0..4 {
        inputs.push(g.normal(&[d, d]).mul_scalar(0.5));
        inputs.push(g.normal(&[d]).mul_scalar(0.1));
    }
    check("mhsa", &inputs, |x| weighted(mhsa(&x[0], &mhsa_weights(&x[1..9]), 2)?, 3))
}

pub fn model_checks() -> Result<Vec<Check>> {
    let mut g = Gen(ChaCha8Rng::seed_from_u64(23));
    let mut out = Vec::new();

    // one encoder layer over every weight
    let (n, t, d, hidden) = (1, 3, 4, 8);
    let mut inputs = vec![g.normal(&[n, t, d])];
    for _ in 0..4 {
        inputs.push(g.normal(&[d, d]).mul_scalar(0.5));
        inputs.push(g.normal(&[d]).mul_scalar(0.1));
    }
    inputs.push(g.uniform(&[d], 0.5, 1.5));
    inputs.push(g.normal(&[d]).mul_scalar(0.1));
    inputs.push(g.normal(&[d, hidden]).mul_scalar(0.5));
    inputs.push(g.normal(&[hidden]).mul_scalar(0.1));
    inputs.push(g.normal(&[hidden, d]).mul_scalar(0.5));
    inputs.push(g.normal(&[d]).mul_scalar(0.1));
    inputs.push(g.uniform(&[d], 0.5, 1.5));
    inputs.push(g.normal(&[d]).mul_scalar(0.1));
    out.push(check("encoder_layer", &inputs, |x| {
        let w = EncoderWeights {
            attn: mhsa_weights(&x[1..9]),
            ln1_gamma: x[9].clone(),
            ln1_beta: x[10].clone(),
            ffn_w1: x[11].clone(),
            ffn_b1: x[12].clone(),
            ffn_w2: x[13].clone(),
            ffn_b2: x[14].clone(),
            ln2_gamma: x[15].clone(),
            ln2_beta: x[16].clone(),
        };
        weighted(encoder_layer(&x[0], &w, 2, Activation::Silu)?, 4)
    })?);

    // ViT insert with patch embedding (P = 2, D ≠ C) and positional embedding
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = ViTConfig {
        embed_dim: 4,
        num_heads: 2,
        num_encoder_layers: 1,
        patch_size: 2,
        ffn_ratio: 2.0,
        use_positional_embedding: true,
    };
    let block = ViTBlock::new(&mut Init::new(&mut store, &mut rng), "vit", &cfg, 3, 4, 4, Activation::Silu)?;
    let mut inputs = vec![g.normal(&[1, 3, 4, 4])];
    inputs.extend(store.bind(false).tensors().iter().cloned());
    out.push(check("vit_block", &inputs, |x| {
        let p = store.bind_tensors(x[1..].to_vec())?;
        weighted(block.forward(&p, &x[0])?, 6)
    })?);

    // whole detector with the ViT insert at tiny width, every parameter
    let spec = ModelSpec::preset("nano")?
        .with_input_size(32, 32)
        .with_base_channels(4)
        .with_default_vit();
    let model = Model::build(&spec, 3)?;
    let images = g.uniform(&[1, 3, 32, 32], 0.0, 1.0);
    let params: Vec<Tensor> = model.store.bind(false).tensors().to_vec();
    out.push(check("detector_vit", &params, |x| {
        let p = model.store.bind_tensors(x.to_vec())?;
        let logits = model.forward(&p, &images)?;
        let mut total = Tensor::scalar(0.0);
        for (k, lv) in logits.scales.iter().enumerate() {
            for (j, t) in lv.tensors().into_iter().enumerate() {
                total = total.add(&weighted(t.clone(), (10 * k + j) as u64)?)?;
            }
        }
        Ok(total)
    })?);

    // loss stack with respect to student logits
    let s = random_logits(&mut g, 2, 2, &[(4, 4), (2, 2), (1, 1)]);
    let t = random_logits(&mut g, 2, 2, &[(4, 4), (2, 2), (1, 1)]);
    let flat = |l: &FpnLogits| -> Vec<Tensor> { l.scales.iter().flat_map(|s| s.tensors().map(Tensor::clone)).collect() };
    let unflat = |x: &[Tensor]| FpnLogits {
        scales: x
            .chunks(3)
            .map(|c| ScaleLogits {
                cls: c[0].clone(),
                reg: c[1].clone(),
                obj: c[2].clone(),
            })
            .collect(),
    };
    for norm in [KdNormalization::BatchScales, KdNormalization::ElementMean] {
        let w = KdWeights {
            normalization: norm,
            ..KdWeights::default()
        };
        out.push(check(&format!("soft_loss_{norm:?}"), &flat(&s), |x| Ok(soft_loss(&unflat(x), &t, &w)?.total))?);
    }
    let loss_spec = ModelSpec::preset("nano")?.with_input_size(32, 32);
    let targets = vec![
        vec![GtBox {
            class_id: 0,
            bbox: BBox::new(12.3, 17.9, 9.0, 14.0),
        }],
        vec![
            GtBox {
                class_id: 1,
                bbox: BBox::new(20.5, 9.5, 21.0, 17.0),
            },
            GtBox {
                class_id: 0,
                bbox: BBox::new(5.0, 26.0, 6.0, 8.0),
            },
        ],
    ];
    let small = |x: &[Tensor]| -> Vec<Tensor> { x.iter().map(|t| t.mul_scalar(0.3)).collect() };
    out.push(check("hard_loss", &small(&flat(&s)), |x| {
        Ok(hard_loss(&unflat(x), &targets, &loss_spec)?.total)
    })?);
    Ok(out)
}

pub fn random_logits(g: &mut impl GenLike, batch: usize, classes: usize, grids: &[(usize, usize)]) -> FpnLogits {
    FpnLogits {
        scales: grids
            .iter()
            .map(|&(h, w)| ScaleLogits {
                cls: g.normal(&[batch, classes, h, w]),
                reg: g.normal(&[batch, 4, h, w]),
                obj: g.normal(&[batch, 1, h, w]),
            })
            .collect(),
    }
}

pub trait GenLike {
    fn normal(&mut self, shape: &[usize]) -> Tensor;
}

impl GenLike for Gen {
    fn normal(&mut self, shape: &[usize]) -> Tensor {
        Gen::normal(self, shape)
    }
}

impl GenLike for ChaCha8Rng {
    fn normal(&mut self, shape: &[usize]) -> Tensor {
        Tensor::randn(shape, 1.0, self).unwrap()
    }
}
