//! Samples, the noise/flip augmentations, splitting, resizing, the synthetic
//! sonar generator and the on-disk dataset layout.

mod dataset;
mod image;
mod synth;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::boxes::{BBox, GtBox};
use crate::error::{Error, Result};

pub use self::dataset::{
    augment_group, build_dataset, format_annotations, import_originals, parse_annotations, read_annotations,
    split_counts, split_dataset, write_annotations, Dataset, DatasetManifest, ManifestEntry, MANIFEST_FILE,
};
pub use self::image::Image8;
pub use self::synth::{synth_sonar, synth_sonar_with, SynthConfig, CLASS_NAMES, NOWALL_CLASS, WALL_CLASS};

/// Noise std used for the sonar set: half the 8-bit range.
pub const DEFAULT_SIGMA: f64 = 0.5 * 255.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}` (train|val|test)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Original,
    Noise,
    Flip,
    NoiseFlip,
}

/// An image with its boxes (pixel coordinates).
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// Id of the original this sample was derived from; splits are drawn per group.
    pub group: String,
    pub image: Image8,
    pub boxes: Vec<GtBox>,
    pub split: Split,
    pub provenance: Provenance,
}

impl Sample {
    pub fn original(id: impl Into<String>, image: Image8, boxes: Vec<GtBox>) -> Sample {
        let id = id.into();
        Sample {
            group: id.clone(),
            id,
            image,
            boxes,
            split: Split::Train,
            provenance: Provenance::Original,
        }
    }

    pub fn boxes_in_bounds(&self) -> bool {
        self.boxes
            .iter()
            .all(|b| b.bbox.within(self.image.width as f64, self.image.height as f64))
    }
}

/// The additive noise values [`gaussian_noise`] draws for `seed`, before
/// rounding and clamping.
pub fn noise_samples(sigma: f64, seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            sigma * z
        })
        .collect()
}

/// `I + N(0, σ²)` per value, rounded and clamped to `[0, 255]`.
pub fn gaussian_noise(img: &Image8, sigma: f64, seed: u64) -> Result<Image8> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("noise sigma must be finite and >= 0, got {sigma}")));
    }
    let noise = noise_samples(sigma, seed, img.data.len());
    let data = img
        .data
        .iter()
        .zip(noise)
        .map(|(&v, n)| (v as f64 + n).round().clamp(0.0, 255.0) as u8)
        .collect();
    Ok(Image8 { data, ..img.clone() })
}

/// Mirror across the vertical axis: pixel `x` moves to `W − x − 1`.
pub fn hflip_image(img: &Image8) -> Image8 {
    let mut out = img.clone();
    let c = img.channels;
    for y in 0..img.height {
        for x in 0..img.width {
            let src = (y * img.width + x) * c;
            let dst = (y * img.width + (img.width - 1 - x)) * c;
            out.data[dst..dst + c].copy_from_slice(&img.data[src..src + c]);
        }
    }
    out
}

/// Flips image and labels; box centres map `cx → W − cx`.
pub fn hflip(sample: &Sample) -> Sample {
    let w = sample.image.width as f64;
    let boxes = sample
        .boxes
        .iter()
        .map(|b| GtBox {
            class_id: b.class_id,
            bbox: BBox { cx: w - b.bbox.cx, ..b.bbox },
        })
        .collect();
    Sample {
        image: hflip_image(&sample.image),
        boxes,
        ..sample.clone()
    }
}

pub fn noise(sample: &Sample, sigma: f64, seed: u64) -> Result<Sample> {
    Ok(Sample {
        image: gaussian_noise(&sample.image, sigma, seed)?,
        ..sample.clone()
    })
}

/// Flip first, then noise.
pub fn noise_flip(sample: &Sample, sigma: f64, seed: u64) -> Result<Sample> {
    noise(&hflip(sample), sigma, seed)
}

/// Bilinear resample (half-pixel centres) with boxes rescaled linearly.
pub fn resize(sample: &Sample, width: usize, height: usize) -> Result<Sample> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidArgument(format!("resize target must be non-empty, got {width}x{height}")));
    }
    let src = &sample.image;
    let (sx, sy) = (width as f64 / src.width as f64, height as f64 / src.height as f64);
    let boxes = sample
        .boxes
        .iter()
        .map(|b| GtBox {
            class_id: b.class_id,
            bbox: b.bbox.scaled(sx, sy),
        })
        .collect();
    Ok(Sample {
        image: resize_image(src, width, height),
        boxes,
        ..sample.clone()
    })
}

fn resize_image(src: &Image8, width: usize, height: usize) -> Image8 {
    if (width, height) == (src.width, src.height) {
        return src.clone();
    }
    // source coordinate and blend weight along one axis
    let taps = |dst: usize, src_len: usize, dst_len: usize| -> (usize, usize, f64) {
        let pos = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5).clamp(0.0, (src_len - 1) as f64);
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(src_len - 1);
        (i0, i1, pos - i0 as f64)
    };
    let c = src.channels;
    let mut data = vec![0u8; width * height * c];
    for y in 0..height {
        let (y0, y1, fy) = taps(y, src.height, height);
        for x in 0..width {
            let (x0, x1, fx) = taps(x, src.width, width);
            for ch in 0..c {
                let p = |xx: usize, yy: usize| src.get(xx, yy, ch) as f64;
                let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
                let bottom = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                data[(y * width + x) * c + ch] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Image8 {
        width,
        height,
        channels: c,
        data,
    }
}
