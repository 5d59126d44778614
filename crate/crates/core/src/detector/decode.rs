use crate::boxes::{nms, BBox, DetBox};
use crate::error::{shape_err, Result};
use crate::tensor::sigmoid;

use super::model::FpnLogits;
use super::spec::ModelSpec;

pub const DEFAULT_SCORE_THRESH: f64 = 0.3;
pub const DEFAULT_NMS_IOU: f64 = 0.45;

/// Box for cell `(gx, gy)` at `stride` from raw regression logits
/// `[x, y, log w, log h]`.
pub fn decode_cell(reg: [f64; 4], gx: usize, gy: usize, stride: usize) -> BBox {
    let s = stride as f64;
    BBox {
        cx: (reg[0] + gx as f64) * s,
        cy: (reg[1] + gy as f64) * s,
        w: reg[2].exp() * s,
        h: reg[3].exp() * s,
    }
}

/// One box per cell (best class), kept when its score reaches `score_thresh`.
/// Returns one list per image, in scale/row/column order, before NMS.
pub fn decode(logits: &FpnLogits, spec: &ModelSpec, score_thresh: f64) -> Result<Vec<Vec<DetBox>>> {
    let n = logits.batch_size();
    logits.check_contract(spec, n)?;
    let c = spec.num_classes;
    let mut out = vec![Vec::new(); n];
    for (lv, &stride) in logits.scales.iter().zip(&spec.strides) {
        let [_, _, gh, gw] = *lv.cls.shape() else {
            return shape_err("cls logits must be rank 4");
        };
        let plane = gh * gw;
        let (cls, reg, obj) = (lv.cls.data(), lv.reg.data(), lv.obj.data());
        for (b, dets) in out.iter_mut().enumerate() {
            for gy in 0..gh {
                for gx in 0..gw {
                    let cell = gy * gw + gx;
                    let (best, cls_logit) = (0..c)
                        .map(|k| (k, cls[(b * c + k) * plane + cell]))
                        .fold((0, f64::NEG_INFINITY), |acc, v| if v.1 > acc.1 { v } else { acc });
                    let score = sigmoid(obj[b * plane + cell]) * sigmoid(cls_logit);
                    if score < score_thresh || score.is_nan() {
                        continue;
                    }
                    let r = |k: usize| reg[(b * 4 + k) * plane + cell];
                    dets.push(DetBox {
                        class_id: best,
                        score,
                        bbox: decode_cell([r(0), r(1), r(2), r(3)], gx, gy, stride),
                    });
                }
            }
        }
    }
    Ok(out)
}

/// [`decode`] followed by per-image [`nms`].
pub fn postprocess(logits: &FpnLogits, spec: &ModelSpec, score_thresh: f64, nms_iou: f64) -> Result<Vec<Vec<DetBox>>> {
    Ok(decode(logits, spec, score_thresh)?
        .into_iter()
        .map(|d| nms(&d, nms_iou))
        .collect())
}
