use crate::boxes::GtBox;
use crate::detector::{FpnLogits, ModelSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Box side, in strides, that each level is meant to predict.
const CELLS_PER_BOX: f64 = 4.0;

/// A positive cell: image, level, grid cell and the box it regresses to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Assignment {
    pub image: usize,
    pub scale: usize,
    pub gx: usize,
    pub gy: usize,
    pub target: GtBox,
}

/// Level whose stride best matches the box size: minimizes
/// `|ln(sqrt(w·h) / (4·stride))|`, ties to the finer level.
pub fn assign_scale(gt: &GtBox, strides: &[usize]) -> usize {
    let size = (gt.bbox.w * gt.bbox.h).sqrt().max(1e-9);
    let cost = |s: usize| (size / (CELLS_PER_BOX * s as f64)).ln().abs();
    (0..strides.len())
        .min_by(|&a, &b| cost(strides[a]).total_cmp(&cost(strides[b])).then(a.cmp(&b)))
        .unwrap_or(0)
}

/// The cell containing each box centre at its matched level. When two boxes
/// claim one cell the smaller box keeps it.
pub fn assign(targets: &[Vec<GtBox>], spec: &ModelSpec) -> Result<Vec<Assignment>> {
    let (h, w) = spec.input_size;
    let grids = spec.grid_sizes();
    let mut out: Vec<Assignment> = Vec::new();
    for (image, boxes) in targets.iter().enumerate() {
        for gt in boxes {
            if !gt.bbox.within(w as f64, h as f64) || gt.bbox.w <= 0.0 || gt.bbox.h <= 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "image {image}: box {:?} is empty or outside the {w}x{h} input",
                    gt.bbox
                )));
            }
            if gt.class_id >= spec.num_classes {
                return Err(Error::InvalidArgument(format!(
                    "image {image}: class {} >= num_classes {}",
                    gt.class_id, spec.num_classes
                )));
            }
            let scale = assign_scale(gt, &spec.strides);
            let s = spec.strides[scale] as f64;
            let (gh, gw) = grids[scale];
            let gx = ((gt.bbox.cx / s).floor() as usize).min(gw - 1);
            let gy = ((gt.bbox.cy / s).floor() as usize).min(gh - 1);
            let cand = Assignment {
                image,
                scale,
                gx,
                gy,
                target: *gt,
            };
            match out
                .iter_mut()
                .find(|a| (a.image, a.scale, a.gx, a.gy) == (image, scale, gx, gy))
            {
                Some(prev) if gt.bbox.area() < prev.target.bbox.area() => *prev = cand,
                Some(_) => {}
                None => out.push(cand),
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct HardLoss {
    /// Objectness BCE over every cell.
    pub obj: Tensor,
    /// Class BCE over positive cells.
    pub cls: Tensor,
    /// `1 − IoU` of decoded boxes over positive cells.
    pub iou: Tensor,
    /// `(obj + cls + iou) / max(num_pos, 1)`
    pub total: Tensor,
    pub num_pos: usize,
}

/// Elementwise-summed BCE of `sigmoid(logits)` against fixed targets, in the
/// overflow-free form `softplus(x) − y·x`.
fn bce_logits_sum(logits: &Tensor, targets: Vec<f64>) -> Result<Tensor> {
    let y = Tensor::new(logits.shape(), targets)?;
    logits.softplus().sum().sub(&logits.mul(&y)?.sum())
}

/// Ground-truth loss with the centre-cell assignment of [`assign`].
pub fn hard_loss(logits: &FpnLogits, targets: &[Vec<GtBox>], spec: &ModelSpec) -> Result<HardLoss> {
    let n = logits.batch_size();
    if targets.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{} target lists for a batch of {n}",
            targets.len()
        )));
    }
    logits.check_contract(spec, n)?;
    let assignments = assign(targets, spec)?;
    let c = spec.num_classes;

    let mut obj: Option<Tensor> = None;
    let mut cls: Option<Tensor> = None;
    let mut iou: Option<Tensor> = None;
    let acc = |slot: &mut Option<Tensor>, t: Tensor| -> Result<()> {
        *slot = Some(match slot.take() {
            Some(a) => a.add(&t)?,
            None => t,
        });
        Ok(())
    };

    for (k, lv) in logits.scales.iter().enumerate() {
        let [_, _, gh, gw] = *lv.obj.shape() else { unreachable!("checked contract") };
        let plane = gh * gw;
        let stride = spec.strides[k] as f64;
        let pos: Vec<&Assignment> = assignments.iter().filter(|a| a.scale == k).collect();

        let mut obj_t = vec![0.0; n * plane];
        for a in &pos {
            obj_t[a.image * plane + a.gy * gw + a.gx] = 1.0;
        }
        acc(&mut obj, bce_logits_sum(&lv.obj, obj_t)?)?;
        if pos.is_empty() {
            continue;
        }

        let cls_idx: Vec<usize> = pos
            .iter()
            .flat_map(|a| (0..c).map(move |ch| (a.image * c + ch) * plane + a.gy * gw + a.gx))
            .collect();
        let cls_t: Vec<f64> = pos
            .iter()
            .flat_map(|a| (0..c).map(move |ch| if ch == a.target.class_id { 1.0 } else { 0.0 }))
            .collect();
        acc(&mut cls, bce_logits_sum(&lv.cls.gather(&cls_idx)?, cls_t)?)?;

        let reg = |ch: usize| {
            let idx: Vec<usize> = pos
                .iter()
                .map(|a| (a.image * 4 + ch) * plane + a.gy * gw + a.gx)
                .collect();
            lv.reg.gather(&idx)
        };
        let consts = |f: &dyn Fn(&Assignment) -> f64| Tensor::new(&[pos.len()], pos.iter().map(|a| f(a)).collect());
        let cx = reg(0)?.add(&consts(&|a| a.gx as f64)?)?.mul_scalar(stride);
        let cy = reg(1)?.add(&consts(&|a| a.gy as f64)?)?.mul_scalar(stride);
        let bw = reg(2)?.exp().mul_scalar(stride);
        let bh = reg(3)?.exp().mul_scalar(stride);
        let (px0, px1) = (cx.sub(&bw.mul_scalar(0.5))?, cx.add(&bw.mul_scalar(0.5))?);
        let (py0, py1) = (cy.sub(&bh.mul_scalar(0.5))?, cy.add(&bh.mul_scalar(0.5))?);
        let gx0 = consts(&|a| a.target.bbox.x0())?;
        let gx1 = consts(&|a| a.target.bbox.x1())?;
        let gy0 = consts(&|a| a.target.bbox.y0())?;
        let gy1 = consts(&|a| a.target.bbox.y1())?;
        let garea = consts(&|a| a.target.bbox.area())?;
        let iw = px1.minimum(&gx1)?.sub(&px0.maximum(&gx0)?)?.relu();
        let ih = py1.minimum(&gy1)?.sub(&py0.maximum(&gy0)?)?.relu();
        let inter = iw.mul(&ih)?;
        let union = bw.mul(&bh)?.add(&garea)?.sub(&inter)?;
        let ious = inter.div(&union)?;
        acc(&mut iou, ious.neg().add_scalar(1.0).sum())?;
    }

    let zero = || Tensor::scalar(0.0);
    let obj = obj.expect("three scales");
    let cls = cls.unwrap_or_else(zero);
    let iou = iou.unwrap_or_else(zero);
    let num_pos = assignments.len();
    let total = obj
        .add(&cls)?
        .add(&iou)?
        .mul_scalar(1.0 / num_pos.max(1) as f64);
    Ok(HardLoss {
        obj,
        cls,
        iou,
        total,
        num_pos,
    })
}
