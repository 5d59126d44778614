use std::path::Path;

use crate::error::{Error, Result};

/// 8-bit image, row-major, channels interleaved (1 = gray, 3 = RGB).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image8 {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image8 {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Image8> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!("image must be non-empty, got {width}x{height}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument(format!("expected 1 or 3 channels, got {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::InvalidArgument(format!(
                "{width}x{height}x{channels} image needs {} bytes, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Image8 {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Result<Image8> {
        Image8::new(width, height, channels, vec![value; width * height * channels])
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, x: usize, y: usize, c: usize, v: u8) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Planar `[3, H, W]` values in `[0, 1]`; gray images are replicated.
    pub fn to_chw3(&self) -> Vec<f64> {
        let plane = self.width * self.height;
        let mut out = vec![0.0; 3 * plane];
        for i in 0..plane {
            for c in 0..3 {
                let src = if self.channels == 1 { 0 } else { c };
                out[c * plane + i] = self.data[i * self.channels + src] as f64 / 255.0;
            }
        }
        out
    }

    pub fn to_rgb(&self) -> Image8 {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        Image8 {
            channels: 3,
            data,
            ..*self
        }
    }

    /// Reads PNG or PGM/PPM; 8-bit gray stays gray, everything else becomes RGB.
    pub fn load(path: &Path) -> Result<Image8> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        match img {
            image::DynamicImage::ImageLuma8(buf) => Image8::new(w, h, 1, buf.into_raw()),
            other => Image8::new(w, h, 3, other.to_rgb8().into_raw()),
        }
    }

    /// Writes a PNG (or PGM/PPM by extension).
    pub fn save(&self, path: &Path) -> Result<()> {
        let color = if self.channels == 1 {
            image::ExtendedColorType::L8
        } else {
            image::ExtendedColorType::Rgb8
        };
        image::save_buffer(path, &self.data, self.width as u32, self.height as u32, color).map_err(|e| {
            Error::Image {
                path: path.to_path_buf(),
                message: e.to_string(),
            }
        })
    }
}
