//! Desk-scale YOLOX-style detector with an optional transformer insert between
//! backbone and neck, an offline teacher/student distillation pipeline, sonar
//! augmentations and detection/video evaluation metrics.
//!
//! Everything numeric runs on the in-crate reverse-mode [`tensor`] engine in
//! `f64`.

pub mod boxes;
pub mod checkpoint;
pub mod dataaug;
pub mod detector;
pub mod distill;
pub mod error;
pub mod evalmetrics;
pub mod nn;
pub mod serial;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
pub use tensor::Tensor;
