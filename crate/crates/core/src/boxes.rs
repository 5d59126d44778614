//! Axis-aligned boxes in centre/size form and the IoU + NMS utilities.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

/// Box as centre and size, in pixels unless stated otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox { cx, cy, w, h }
    }

    /// From top-left corner and size.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox {
            cx: x + w / 2.0,
            cy: y + h / 2.0,
            w,
            h,
        }
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        BBox::from_xywh(x0, y0, x1 - x0, y1 - y0)
    }

    pub fn x0(&self) -> f64 {
        self.cx - self.w / 2.0
    }
    pub fn y0(&self) -> f64 {
        self.cy - self.h / 2.0
    }
    pub fn x1(&self) -> f64 {
        self.cx + self.w / 2.0
    }
    pub fn y1(&self) -> f64 {
        self.cy + self.h / 2.0
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    /// Whether the box lies inside `[0, width] × [0, height]` (with a small
    /// tolerance for rounding).
    pub fn within(&self, width: f64, height: f64) -> bool {
        const TOL: f64 = 1e-9;
        self.w >= 0.0
            && self.h >= 0.0
            && self.x0() >= -TOL
            && self.y0() >= -TOL
            && self.x1() <= width + TOL
            && self.y1() <= height + TOL
    }

    pub fn scaled(&self, sx: f64, sy: f64) -> BBox {
        BBox {
            cx: self.cx * sx,
            cy: self.cy * sy,
            w: self.w * sx,
            h: self.h * sy,
        }
    }
}

/// Intersection over union. A zero-area union yields 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x1().min(b.x1()) - a.x0().max(b.x0())).max(0.0);
    let ih = (a.y1().min(b.y1()) - a.y0().max(b.y0())).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// A decoded detection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetBox {
    pub class_id: usize,
    pub score: f64,
    pub bbox: BBox,
}

/// A ground-truth annotation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub class_id: usize,
    pub bbox: BBox,
}

/// Total order used wherever detections are ranked: score descending, then
/// `cx` ascending, then `cy` ascending.
pub fn rank_order(a: &DetBox, b: &DetBox) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.bbox.cx.total_cmp(&b.bbox.cx))
        .then(a.bbox.cy.total_cmp(&b.bbox.cy))
        .then(a.bbox.w.total_cmp(&b.bbox.w))
        .then(a.bbox.h.total_cmp(&b.bbox.h))
        .then(a.class_id.cmp(&b.class_id))
}

/// Greedy per-class non-maximum suppression. A box is dropped when it overlaps
/// an already kept box of the same class with IoU ≥ `iou_thresh`. The result is
/// in [`rank_order`] and does not depend on the input order.
pub fn nms(boxes: &[DetBox], iou_thresh: f64) -> Vec<DetBox> {
    let mut sorted = boxes.to_vec();
    sorted.sort_by(rank_order);
    let mut kept: Vec<DetBox> = Vec::with_capacity(sorted.len());
    for cand in sorted {
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == cand.class_id && iou(k, &cand) >= iou_thresh);
        if !suppressed {
            kept.push(cand);
        }
    }
    kept
}

impl std::ops::Deref for DetBox {
    type Target = BBox;
    fn deref(&self) -> &BBox {
        &self.bbox
    }
}
