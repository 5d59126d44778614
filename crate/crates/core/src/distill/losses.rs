use serde::{Deserialize, Serialize};

use crate::detector::{FpnLogits, ScaleLogits};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// How per-scale soft terms are reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KdNormalization {
    /// Elementwise sums per scale, the total divided once by `batch · 3`.
    #[default]
    BatchScales,
    /// Per-scale means over all elements (batch included), divided by 3.
    ElementMean,
}

/// How the hard and soft losses are combined.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "lambda")]
pub enum CombineMode {
    /// `hard + soft`
    #[default]
    Additive,
    /// `λ · hard + (1 − λ) · soft`
    Blend(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KdWeights {
    pub bbox: f64,
    pub obj: f64,
    pub cls: f64,
    pub mode: CombineMode,
    pub normalization: KdNormalization,
}

impl Default for KdWeights {
    fn default() -> Self {
        KdWeights {
            bbox: 0.5,
            obj: 0.5,
            cls: 0.5,
            mode: CombineMode::Additive,
            normalization: KdNormalization::BatchScales,
        }
    }
}

impl KdWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("bbox", self.bbox), ("obj", self.obj), ("cls", self.cls)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("KD weight {name} must be finite and >= 0, got {v}")));
            }
        }
        if let CombineMode::Blend(l) = self.mode {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::InvalidArgument(format!("blend lambda must be in [0, 1], got {l}")));
            }
        }
        Ok(())
    }
}

fn check_pair(s: &FpnLogits, t: &FpnLogits) -> Result<()> {
    if s.scales.len() != 3 || t.scales.len() != 3 {
        return shape_err(format!(
            "KD needs 3 scales on both sides, got {} and {}",
            s.scales.len(),
            t.scales.len()
        ));
    }
    for (i, (a, b)) in s.scales.iter().zip(&t.scales).enumerate() {
        for (x, y) in a.tensors().into_iter().zip(b.tensors()) {
            if x.shape() != y.shape() {
                return shape_err(format!(
                    "scale {i}: student {:?} vs teacher {:?}",
                    x.shape(),
                    y.shape()
                ));
            }
        }
    }
    Ok(())
}

/// Sums `term(student, teacher)` over scales with the chosen normalization.
/// `term` returns the unreduced elementwise loss.
fn aggregate(
    s: &FpnLogits,
    t: &FpnLogits,
    norm: KdNormalization,
    term: impl Fn(&ScaleLogits, &ScaleLogits) -> Result<Tensor>,
) -> Result<Tensor> {
    check_pair(s, t)?;
    let batch = s.batch_size() as f64;
    let mut total: Option<Tensor> = None;
    for (a, b) in s.scales.iter().zip(&t.scales) {
        let e = term(a, b)?;
        let reduced = match norm {
            KdNormalization::BatchScales => e.sum(),
            KdNormalization::ElementMean => e.mean(),
        };
        total = Some(match total {
            Some(acc) => acc.add(&reduced)?,
            None => reduced,
        });
    }
    let total = total.expect("three scales");
    Ok(match norm {
        KdNormalization::BatchScales => total.mul_scalar(1.0 / (batch * 3.0)),
        KdNormalization::ElementMean => total.mul_scalar(1.0 / 3.0),
    })
}

/// Squared error between student and teacher regression logits.
pub fn kd_bbox_loss(s: &FpnLogits, t: &FpnLogits, norm: KdNormalization) -> Result<Tensor> {
    aggregate(s, t, norm, |a, b| Ok(a.reg.sub(&b.reg.detach())?.square()))
}

/// BCE between `sigmoid(S_obj)` and the teacher probabilities `sigmoid(T_obj)`.
///
/// Evaluated in logit form, `softplus(s) − q·s`, which equals the
/// probability form without needing the clamp window.
pub fn kd_obj_loss(s: &FpnLogits, t: &FpnLogits, norm: KdNormalization) -> Result<Tensor> {
    aggregate(s, t, norm, |a, b| {
        let q = b.obj.detach().sigmoid();
        a.obj.softplus().sub(&a.obj.mul(&q)?)
    })
}

/// `KL(softmax(T_cls) ‖ softmax(S_cls))` per cell over the class axis, fed as
/// `(log_softmax(S), softmax(T))`.
pub fn kd_cls_loss(s: &FpnLogits, t: &FpnLogits, norm: KdNormalization) -> Result<Tensor> {
    aggregate(s, t, norm, |a, b| {
        let log_q = a.cls.log_softmax(1)?;
        let p = b.cls.detach().softmax(1)?;
        // log p from log_softmax stays finite where p underflows, so those terms are 0
        let log_p = b.cls.detach().log_softmax(1)?;
        p.mul(&log_p.sub(&log_q)?)
    })
}

#[derive(Debug, Clone)]
pub struct SoftLoss {
    pub bbox: Tensor,
    pub obj: Tensor,
    pub cls: Tensor,
    /// `λ_bbox·bbox + λ_obj·obj + λ_cls·cls`
    pub total: Tensor,
}

pub fn soft_loss(s: &FpnLogits, t: &FpnLogits, w: &KdWeights) -> Result<SoftLoss> {
    w.validate()?;
    let bbox = kd_bbox_loss(s, t, w.normalization)?;
    let obj = kd_obj_loss(s, t, w.normalization)?;
    let cls = kd_cls_loss(s, t, w.normalization)?;
    let total = bbox
        .mul_scalar(w.bbox)
        .add(&obj.mul_scalar(w.obj))?
        .add(&cls.mul_scalar(w.cls))?;
    Ok(SoftLoss { bbox, obj, cls, total })
}

pub fn total_loss(hard: &Tensor, soft: &Tensor, w: &KdWeights) -> Result<Tensor> {
    w.validate()?;
    match w.mode {
        CombineMode::Additive => hard.add(soft),
        CombineMode::Blend(l) => hard.mul_scalar(l).add(&soft.mul_scalar(1.0 - l)),
    }
}
