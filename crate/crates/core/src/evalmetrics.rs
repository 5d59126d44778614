//! Detection and video metrics: greedy matching, precision, all-points AP,
//! frame-share video statistics, report rendering and the prediction /
//! timeline text formats.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::boxes::{iou, rank_order, BBox, DetBox, GtBox};
use crate::error::{Error, Result};

/// IoU thresholds 0.50, 0.55, …, 0.95 averaged by [`ap`].
pub const IOU_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

/// One frame matched at one IoU threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEval {
    pub frame: usize,
    /// Sorted by [`rank_order`].
    pub preds: Vec<DetBox>,
    pub gts: Vec<GtBox>,
    pub iou_thresh: f64,
    /// Parallel to `preds`.
    pub pred_tp: Vec<bool>,
    /// Parallel to `gts`.
    pub gt_matched: Vec<bool>,
}

impl FrameEval {
    pub fn tp(&self) -> usize {
        self.pred_tp.iter().filter(|&&t| t).count()
    }

    pub fn fp(&self) -> usize {
        self.preds.len() - self.tp()
    }

    pub fn fn_count(&self) -> usize {
        self.gt_matched.iter().filter(|&&m| !m).count()
    }

    pub fn has_tp_of(&self, class: usize) -> bool {
        self.preds.iter().zip(&self.pred_tp).any(|(p, &t)| t && p.class_id == class)
    }

    pub fn has_fp_of(&self, class: usize) -> bool {
        self.preds.iter().zip(&self.pred_tp).any(|(p, &t)| !t && p.class_id == class)
    }
}

/// Greedy matching: in rank order, each prediction takes the highest-IoU
/// unmatched ground truth of its class with IoU ≥ `iou_thresh` (lower index on
/// ties) and is a TP; otherwise it is an FP.
pub fn match_frame(frame: usize, preds: &[DetBox], gts: &[GtBox], iou_thresh: f64) -> FrameEval {
    let mut preds = preds.to_vec();
    preds.sort_by(rank_order);
    let mut gt_matched = vec![false; gts.len()];
    let mut pred_tp = Vec::with_capacity(preds.len());
    for p in &preds {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if gt_matched[j] || g.class_id != p.class_id {
                continue;
            }
            let v = iou(&p.bbox, &g.bbox);
            if v >= iou_thresh && best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            gt_matched[j] = true;
        }
        pred_tp.push(best.is_some());
    }
    FrameEval {
        frame,
        preds,
        gts: gts.to_vec(),
        iou_thresh,
        pred_tp,
        gt_matched,
    }
}

/// `tp / (tp + fp)`; 1 when there are no predictions.
pub fn precision(tp: f64, fp: f64) -> f64 {
    if tp + fp > 0.0 {
        tp / (tp + fp)
    } else {
        1.0
    }
}

/// Exact all-points-interpolated area under the PR curve of one class:
/// `(1/n_gt) · Σ_{TP ranks i} max_{j ≥ i} precision_j`. `None` without GT.
pub fn class_ap_exact(frames: &[FrameEval], class: usize) -> Option<BigRational> {
    let n_gt = frames
        .iter()
        .flat_map(|f| &f.gts)
        .filter(|g| g.class_id == class)
        .count();
    if n_gt == 0 {
        return None;
    }
    let mut ranked: Vec<(DetBox, usize, bool)> = frames
        .iter()
        .flat_map(|f| {
            f.preds
                .iter()
                .zip(&f.pred_tp)
                .filter(|(p, _)| p.class_id == class)
                .map(move |(p, &t)| (*p, f.frame, t))
        })
        .collect();
    ranked.sort_by(|a, b| rank_order(&a.0, &b.0).then(a.1.cmp(&b.1)));

    // (tp so far, rank) at each TP, then the running max from the tail
    let mut tp = 0usize;
    let mut prec: Vec<(bool, BigRational)> = Vec::with_capacity(ranked.len());
    for (k, (_, _, is_tp)) in ranked.iter().enumerate() {
        tp += *is_tp as usize;
        prec.push((*is_tp, ratio(tp, k + 1)));
    }
    let mut sum = BigRational::zero();
    let mut best = BigRational::zero();
    for (is_tp, p) in prec.into_iter().rev() {
        if p > best {
            best = p;
        }
        if is_tp {
            sum += &best;
        }
    }
    Some(sum / ratio(n_gt, 1))
}

fn ratio(n: usize, d: usize) -> BigRational {
    BigRational::new((n as u64).into(), (d as u64).into())
}

/// Mean over classes that have ground truth of [`class_ap_exact`]; 0 when no
/// class has any.
pub fn mean_ap_exact(frames: &[FrameEval], num_classes: usize) -> BigRational {
    let aps: Vec<BigRational> = (0..num_classes).filter_map(|c| class_ap_exact(frames, c)).collect();
    if aps.is_empty() {
        return BigRational::zero();
    }
    let n = aps.len();
    aps.into_iter().fold(BigRational::zero(), |a, b| a + b) / ratio(n, 1)
}

fn to_f64(r: &BigRational) -> f64 {
    r.to_f64().expect("AP lies in [0, 1]")
}

/// Matches every frame at `iou_thresh`. `preds` and `gts` are per frame.
pub fn match_all(preds: &[Vec<DetBox>], gts: &[Vec<GtBox>], iou_thresh: f64) -> Result<Vec<FrameEval>> {
    if preds.len() != gts.len() {
        return Err(Error::InvalidArgument(format!(
            "{} prediction lists for {} frames",
            preds.len(),
            gts.len()
        )));
    }
    Ok(preds
        .iter()
        .zip(gts)
        .enumerate()
        .map(|(i, (p, g))| match_frame(i, p, g, iou_thresh))
        .collect())
}

/// Mean AP at IoU 0.5.
pub fn ap50(preds: &[Vec<DetBox>], gts: &[Vec<GtBox>], num_classes: usize) -> Result<f64> {
    Ok(to_f64(&mean_ap_exact(&match_all(preds, gts, 0.5)?, num_classes)))
}

/// Mean of the per-threshold mean APs over [`IOU_THRESHOLDS`].
pub fn ap(preds: &[Vec<DetBox>], gts: &[Vec<GtBox>], num_classes: usize) -> Result<f64> {
    let mut sum = 0.0;
    for &t in &IOU_THRESHOLDS {
        sum += to_f64(&mean_ap_exact(&match_all(preds, gts, t)?, num_classes));
    }
    Ok(sum / IOU_THRESHOLDS.len() as f64)
}

/// Per-frame outcome for the video statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameOutcome {
    pub wall_present: bool,
    /// The frame holds at least one correct wall detection.
    pub detected: bool,
    /// The frame holds at least one wrong wall detection.
    pub false_alarm: bool,
}

impl FrameOutcome {
    /// From a box-level match: TP / FP wall detections decide.
    pub fn from_eval(eval: &FrameEval, wall_class: usize) -> FrameOutcome {
        FrameOutcome {
            wall_present: eval.gts.iter().any(|g| g.class_id == wall_class),
            detected: eval.has_tp_of(wall_class),
            false_alarm: eval.has_fp_of(wall_class),
        }
    }

    /// From a presence timeline alone: any wall detection counts as correct
    /// on a wall frame and as a false alarm otherwise.
    pub fn from_timeline(wall_present: bool, preds: &[DetBox], wall_class: usize) -> FrameOutcome {
        let fired = preds.iter().any(|p| p.class_id == wall_class);
        FrameOutcome {
            wall_present,
            detected: wall_present && fired,
            false_alarm: !wall_present && fired,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VideoMetrics {
    /// Share of wall-present frames with a correct detection, in percent.
    pub detection_duration_pct: f64,
    /// Share of all frames with a false alarm, in percent.
    pub video_fp_pct: f64,
}

pub fn video_metrics(frames: &[FrameOutcome]) -> VideoMetrics {
    let pct = |n: usize, d: usize| if d == 0 { 0.0 } else { 100.0 * n as f64 / d as f64 };
    let walls = frames.iter().filter(|f| f.wall_present).count();
    let detected = frames.iter().filter(|f| f.wall_present && f.detected).count();
    let alarms = frames.iter().filter(|f| f.false_alarm).count();
    VideoMetrics {
        detection_duration_pct: pct(detected, walls),
        video_fp_pct: pct(alarms, frames.len()),
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub frames: usize,
    pub predictions: usize,
    pub ground_truth: usize,
    /// Detection counts at `iou_thresh`.
    pub tp: usize,
    pub fp: usize,
    /// Percent of frames holding at least one TP / FP.
    pub tp_pct: f64,
    pub fp_pct: f64,
    /// `tp_pct / (tp_pct + fp_pct)`, in [0, 1].
    pub pr: f64,
    pub ap50: f64,
    pub ap: f64,
    pub detection_duration_pct: f64,
    pub video_fp_pct: f64,
    pub iou_thresh: f64,
}

/// Full report over per-frame predictions and ground truth. An empty input
/// gives the zeroed report.
pub fn evaluate(
    preds: &[Vec<DetBox>],
    gts: &[Vec<GtBox>],
    num_classes: usize,
    wall_class: usize,
    iou_thresh: f64,
) -> Result<EvalReport> {
    if preds.is_empty() && gts.is_empty() {
        return Ok(EvalReport {
            iou_thresh,
            ..EvalReport::default()
        });
    }
    let evals = match_all(preds, gts, iou_thresh)?;
    let n = evals.len();
    let share = |k: usize| 100.0 * k as f64 / n as f64;
    let tp_pct = share(evals.iter().filter(|e| e.tp() > 0).count());
    let fp_pct = share(evals.iter().filter(|e| e.fp() > 0).count());
    let outcomes: Vec<FrameOutcome> = evals.iter().map(|e| FrameOutcome::from_eval(e, wall_class)).collect();
    let video = video_metrics(&outcomes);
    Ok(EvalReport {
        frames: n,
        predictions: evals.iter().map(|e| e.preds.len()).sum(),
        ground_truth: evals.iter().map(|e| e.gts.len()).sum(),
        tp: evals.iter().map(FrameEval::tp).sum(),
        fp: evals.iter().map(FrameEval::fp).sum(),
        tp_pct,
        fp_pct,
        pr: precision(tp_pct, fp_pct),
        ap50: ap50(preds, gts, num_classes)?,
        ap: ap(preds, gts, num_classes)?,
        detection_duration_pct: video.detection_duration_pct,
        video_fp_pct: video.video_fp_pct,
        iou_thresh,
    })
}

/// Report for a frame sequence known only through a presence timeline; the
/// box-level columns stay zero.
pub fn evaluate_timeline(preds: &[Vec<DetBox>], wall_present: &[bool], wall_class: usize) -> Result<EvalReport> {
    if preds.len() != wall_present.len() {
        return Err(Error::InvalidArgument(format!(
            "{} prediction lists for a timeline of {} frames",
            preds.len(),
            wall_present.len()
        )));
    }
    let outcomes: Vec<FrameOutcome> = preds
        .iter()
        .zip(wall_present)
        .map(|(p, &w)| FrameOutcome::from_timeline(w, p, wall_class))
        .collect();
    let video = video_metrics(&outcomes);
    Ok(EvalReport {
        frames: preds.len(),
        predictions: preds.iter().map(Vec::len).sum(),
        detection_duration_pct: video.detection_duration_pct,
        video_fp_pct: video.video_fp_pct,
        ..EvalReport::default()
    })
}

pub const REPORT_COLUMNS: [&str; 8] = ["Model", "TP", "FP", "Pr", "AP50", "AP", "Detection", "VideoFP"];

fn cells(label: &str, r: &EvalReport) -> [String; 8] {
    [
        label.to_string(),
        format!("{:.2}", r.tp_pct),
        format!("{:.2}", r.fp_pct),
        format!("{:.2}", 100.0 * r.pr),
        format!("{:.3}", r.ap50),
        format!("{:.3}", r.ap),
        format!("{:.2}", r.detection_duration_pct),
        format!("{:.2}", r.video_fp_pct),
    ]
}

/// CSV with one row per labelled report. TP, FP, Pr, Detection and VideoFP are
/// percentages.
pub fn render_csv(rows: &[(&str, &EvalReport)]) -> String {
    let mut out = REPORT_COLUMNS.join(",");
    out.push('\n');
    for (label, r) in rows {
        out.push_str(&cells(label, r).join(","));
        out.push('\n');
    }
    out
}

/// Right-aligned text table of the same columns.
pub fn render_table(rows: &[(&str, &EvalReport)]) -> String {
    let body: Vec<[String; 8]> = rows.iter().map(|(l, r)| cells(l, r)).collect();
    let mut widths = REPORT_COLUMNS.map(str::len);
    for row in &body {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, row: &[&str]| {
        let padded: Vec<String> = row
            .iter()
            .zip(widths)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", padded.join("  "));
    };
    line(&mut out, &REPORT_COLUMNS);
    for row in &body {
        line(&mut out, &row.iter().map(String::as_str).collect::<Vec<_>>());
    }
    out
}

/// One line per detection, `class score cx cy w h` with geometry normalized
/// by the image size.
pub fn format_predictions(preds: &[DetBox], width: usize, height: usize) -> String {
    let (w, h) = (width as f64, height as f64);
    preds
        .iter()
        .map(|p| {
            format!(
                "{} {} {} {} {} {}\n",
                p.class_id,
                p.score,
                p.bbox.cx / w,
                p.bbox.cy / h,
                p.bbox.w / w,
                p.bbox.h / h
            )
        })
        .collect()
}

pub fn parse_predictions(text: &str, path: &Path, width: usize, height: usize) -> Result<Vec<DetBox>> {
    let (w, h) = (width as f64, height as f64);
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(err(format!("expected `class score cx cy w h`, got {} fields", fields.len())));
        }
        let class_id: usize = fields[0].parse().map_err(|_| err(format!("bad class `{}`", fields[0])))?;
        let mut v = [0.0f64; 5];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f.parse().map_err(|_| err(format!("bad number `{f}`")))?;
            if !slot.is_finite() {
                return Err(err(format!("non-finite value `{f}`")));
            }
        }
        if !(0.0..=1.0).contains(&v[0]) {
            return Err(err(format!("score {} outside [0, 1]", v[0])));
        }
        out.push(DetBox {
            class_id,
            score: v[0],
            bbox: BBox::new(v[1] * w, v[2] * h, v[3] * w, v[4] * h),
        });
    }
    Ok(out)
}

pub fn write_predictions(path: &Path, preds: &[DetBox], width: usize, height: usize) -> Result<()> {
    fs::write(path, format_predictions(preds, width, height)).map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path, width: usize, height: usize) -> Result<Vec<DetBox>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_predictions(&text, path, width, height)
}

/// Wall-presence timeline: one `frame_stem 0|1` line per frame, in order.
pub fn parse_timeline(text: &str, path: &Path) -> Result<Vec<(String, bool)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let mut it = line.split_whitespace();
        let (Some(stem), Some(flag), None) = (it.next(), it.next(), it.next()) else {
            return Err(err("expected `frame_stem 0|1`".into()));
        };
        let present = match flag {
            "0" => false,
            "1" => true,
            other => return Err(err(format!("presence flag must be 0 or 1, got `{other}`"))),
        };
        out.push((stem.to_string(), present));
    }
    Ok(out)
}

pub fn read_timeline(path: &Path) -> Result<Vec<(String, bool)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_timeline(&text, path)
}
