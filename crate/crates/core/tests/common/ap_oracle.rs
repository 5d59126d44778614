//! From-definition AP reference with exact rational IoU and PR curve.

use num_rational::{BigRational, Ratio};
use num_traits::{One, Zero};

use sonar_kd::boxes::{rank_order, BBox, DetBox, GtBox};

/// Integer box `(x, y, w, h)` on the pixel grid.
pub type IBox = (i64, i64, i64, i64);

pub fn to_bbox(b: IBox) -> BBox {
    BBox::from_xywh(b.0 as f64, b.1 as f64, b.2 as f64, b.3 as f64)
}

pub fn iou_exact(a: IBox, b: IBox) -> Ratio<i64> {
    let iw = ((a.0 + a.2).min(b.0 + b.2) - a.0.max(b.0)).max(0);
    let ih = ((a.1 + a.3).min(b.1 + b.3) - a.1.max(b.1)).max(0);
    let inter = iw * ih;
    let union = a.2 * a.3 + b.2 * b.3 - inter;
    if union == 0 {
        Ratio::zero()
    } else {
        Ratio::new(inter, union)
    }
}

/// `(class, score, box)` predictions and `(class, box)` ground truth of one frame.
pub struct Frame {
    pub preds: Vec<(usize, f64, IBox)>,
    pub gts: Vec<(usize, IBox)>,
}

impl Frame {
    pub fn det_boxes(&self) -> Vec<DetBox> {
        self.preds
            .iter()
            .map(|&(class_id, score, b)| DetBox {
                class_id,
                score,
                bbox: to_bbox(b),
            })
            .collect()
    }

    pub fn gt_boxes(&self) -> Vec<GtBox> {
        self.gts
            .iter()
            .map(|&(class_id, b)| GtBox {
                class_id,
                bbox: to_bbox(b),
            })
            .collect()
    }
}

/// TP flags in rank order for one class at IoU ≥ 1/2, every frame matched
/// greedily on exact IoU; returns `(score-ordered flags, n_gt)`.
pub fn ranked_flags(frames: &[Frame], class: usize) -> (Vec<bool>, usize) {
    let half = Ratio::new(1, 2);
    let mut ranked: Vec<(DetBox, usize, bool)> = Vec::new();
    let mut n_gt = 0;
    for (fi, f) in frames.iter().enumerate() {
        n_gt += f.gts.iter().filter(|g| g.0 == class).count();
        let mut order: Vec<usize> = (0..f.preds.len()).collect();
        let dets = f.det_boxes();
        order.sort_by(|&a, &b| rank_order(&dets[a], &dets[b]));
        let mut taken = vec![false; f.gts.len()];
        for &pi in &order {
            let (pc, _, pb) = f.preds[pi];
            let mut best: Option<(usize, Ratio<i64>)> = None;
            for (gi, &(gc, gb)) in f.gts.iter().enumerate() {
                if taken[gi] || gc != pc {
                    continue;
                }
                let v = iou_exact(pb, gb);
                if v >= half && best.as_ref().map_or(true, |(_, bv)| v > *bv) {
                    best = Some((gi, v));
                }
            }
            if let Some((gi, _)) = best {
                taken[gi] = true;
            }
            if pc == class {
                ranked.push((dets[pi], fi, best.is_some()));
            }
        }
    }
    ranked.sort_by(|a, b| rank_order(&a.0, &b.0).then(a.1.cmp(&b.1)));
    (ranked.into_iter().map(|r| r.2).collect(), n_gt)
}

/// Area under the all-points-interpolated PR curve: the integral over recall
/// of `p(r) = max{precision_k : recall_k ≥ r}`.
pub fn pr_area(flags: &[bool], n_gt: usize) -> BigRational {
    let r = |n: usize, d: usize| BigRational::new((n as u64).into(), (d as u64).into());
    let mut points: Vec<(BigRational, BigRational)> = Vec::new();
    let mut tp = 0;
    for (k, &f) in flags.iter().enumerate() {
        tp += f as usize;
        points.push((r(tp, n_gt), r(tp, k + 1)));
    }
    let mut levels: Vec<BigRational> = points.iter().map(|p| p.0.clone()).collect();
    levels.sort();
    levels.dedup();
    let mut area = BigRational::zero();
    let mut prev = BigRational::zero();
    for level in levels {
        if level.is_zero() {
            continue;
        }
        let interp = points
            .iter()
            .filter(|p| p.0 >= level)
            .map(|p| p.1.clone())
            .max()
            .unwrap_or_else(BigRational::zero);
        area += (level.clone() - prev) * interp;
        prev = level;
    }
    debug_assert!(area <= BigRational::one());
    area
}

/// Mean over classes that have ground truth; 0 when none do.
pub fn map50(frames: &[Frame], num_classes: usize) -> BigRational {
    let aps: Vec<BigRational> = (0..num_classes)
        .filter_map(|c| {
            let (flags, n_gt) = ranked_flags(frames, c);
            (n_gt > 0).then(|| pr_area(&flags, n_gt))
        })
        .collect();
    if aps.is_empty() {
        return BigRational::zero();
    }
    let n = aps.len() as u64;
    aps.into_iter().fold(BigRational::zero(), |a, b| a + b) / BigRational::from_integer(n.into())
}

/// Boxes on a 16×16 grid covering the IoU regimes around 1/2: identical,
/// exactly 1/2, just above and below, partial shift, disjoint.
pub const POOL: [IBox; 6] = [(0, 0, 8, 8), (0, 0, 8, 4), (0, 0, 8, 5), (0, 0, 8, 3), (2, 0, 8, 8), (10, 10, 6, 6)];

pub const SCORES: [f64; 4] = [0.9, 0.8, 0.7, 0.6];

pub struct ApOracleOutcome {
    pub instances: usize,
    pub mismatches: usize,
    pub first_mismatch: Option<String>,
}

/// Every single-class frame with up to 3 GT and 4 predictions drawn from
/// [`POOL`] (distinct descending scores), then `random` two-class,
/// two-frame instances; compares the crate's exact and f64 AP50 with the
/// oracle.
pub fn run(random: usize, seed: u64) -> ApOracleOutcome {
    use rand::{Rng, SeedableRng};
    let mut out = ApOracleOutcome {
        instances: 0,
        mismatches: 0,
        first_mismatch: None,
    };
    let compare = |frames: Vec<Frame>, num_classes: usize, out: &mut ApOracleOutcome| {
        let preds: Vec<Vec<DetBox>> = frames.iter().map(Frame::det_boxes).collect();
        let gts: Vec<Vec<GtBox>> = frames.iter().map(Frame::gt_boxes).collect();
        let evals = sonar_kd::evalmetrics::match_all(&preds, &gts, 0.5).unwrap();
        let exact = sonar_kd::evalmetrics::mean_ap_exact(&evals, num_classes);
        let float = sonar_kd::evalmetrics::ap50(&preds, &gts, num_classes).unwrap();
        let want = map50(&frames, num_classes);
        let want_f = num_traits::ToPrimitive::to_f64(&want).unwrap();
        out.instances += 1;
        if exact != want || float != want_f {
            out.mismatches += 1;
            out.first_mismatch.get_or_insert_with(|| {
                format!(
                    "preds {:?} gts {:?}: crate {exact} / {float}, oracle {want}",
                    frames.iter().map(|f| &f.preds).collect::<Vec<_>>(),
                    frames.iter().map(|f| &f.gts).collect::<Vec<_>>()
                )
            });
        }
    };

    let k = POOL.len();
    for n_gt in 0..=3usize {
        for n_pred in 0..=4usize {
            let total = k.pow((n_gt + n_pred) as u32);
            for code in 0..total {
                let mut c = code;
                let mut pick = || {
                    let b = POOL[c % k];
                    c /= k;
                    b
                };
                let gts: Vec<(usize, IBox)> = (0..n_gt).map(|_| (0, pick())).collect();
                let preds: Vec<(usize, f64, IBox)> = (0..n_pred).map(|i| (0, SCORES[i], pick())).collect();
                compare(vec![Frame { preds, gts }], 1, &mut out);
            }
        }
    }

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let rbox = |rng: &mut rand_chacha::ChaCha8Rng| -> IBox {
        let (w, h) = (rng.gen_range(1..=16), rng.gen_range(1..=16));
        (rng.gen_range(0..=16 - w), rng.gen_range(0..=16 - h), w, h)
    };
    for _ in 0..random {
        let frames = (0..2)
            .map(|_| {
                let n_gt = rng.gen_range(0..=3);
                let n_pred = rng.gen_range(0..=4);
                Frame {
                    gts: (0..n_gt).map(|_| (rng.gen_range(0..2), rbox(&mut rng))).collect(),
                    // coarse scores so cross-frame ties occur
                    preds: (0..n_pred)
                        .map(|_| (rng.gen_range(0..2), rng.gen_range(1..=4) as f64 / 4.0, rbox(&mut rng)))
                        .collect(),
                }
            })
            .collect();
        compare(frames, 2, &mut out);
    }
    out
}
