//! Distillation losses, the ground-truth loss, the offline teacher-logit
//! store and the training loop.

mod hard;
mod logits;
mod losses;
mod train;

pub use hard::{assign, assign_scale, hard_loss, Assignment, HardLoss};
pub use logits::{
    decode_record, dump_teacher_logits, encode_record, load_teacher_logits, read_record, write_record, LogitRecord,
    LogitStore, INDEX_FILE, LOGIT_MAGIC, LOGIT_VERSION,
};
pub use losses::{
    kd_bbox_loss, kd_cls_loss, kd_obj_loss, soft_loss, total_loss, CombineMode, KdNormalization, KdWeights, SoftLoss,
};
pub use train::{train, IterLoss, KdSetup, LrSchedule, Optimizer, SoftParts, Teacher, TrainConfig, TrainReport};

use crate::boxes::DetBox;
use crate::dataaug::Sample;
use crate::detector::{postprocess, Model, ModelSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Stacks sample images into the `[N, 3, H, W]` network input.
pub fn batch_images(samples: &[&Sample], spec: &ModelSpec) -> Result<Tensor> {
    let (h, w) = spec.input_size;
    let mut data = Vec::with_capacity(samples.len() * 3 * h * w);
    for s in samples {
        if (s.image.height, s.image.width) != (h, w) {
            return Err(Error::InvalidArgument(format!(
                "sample `{}` is {}x{}, model expects {h}x{w}; resize the dataset first",
                s.id, s.image.height, s.image.width
            )));
        }
        data.extend(s.image.to_chw3());
    }
    Tensor::new(&[samples.len(), 3, h, w], data)
}

/// Decoded, NMS-filtered detections for each sample, run in batches.
pub fn detect(
    model: &Model,
    samples: &[Sample],
    score_thresh: f64,
    nms_iou: f64,
    batch: usize,
) -> Result<Vec<Vec<DetBox>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let logits = model.infer(&batch_images(&refs, &model.spec)?)?;
        out.extend(postprocess(&logits, &model.spec, score_thresh, nms_iou)?);
    }
    Ok(out)
}
