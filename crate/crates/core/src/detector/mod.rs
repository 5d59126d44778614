//! Anchor-free detector: Focus stem → CSP dark stages → SPP bottleneck →
//! optional transformer insert → PAFPN neck → three decoupled heads.

mod decode;
mod model;
mod spec;

pub use decode::{decode, decode_cell, postprocess, DEFAULT_NMS_IOU, DEFAULT_SCORE_THRESH};
pub use model::{FpnLogits, LayerInfo, Model, ScaleLogits};
pub use spec::{ModelSpec, DEFAULT_STRIDES, YOLOX_BASE_CHANNELS, YOLOX_BASE_DEPTH};
