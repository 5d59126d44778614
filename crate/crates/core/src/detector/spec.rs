use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::Activation;
use crate::vit::ViTConfig;

/// Channel widths of the reference family at `width_mult = 1`.
pub const YOLOX_BASE_CHANNELS: usize = 64;
/// Bottleneck count of the shallow CSP stages at `depth_mult = 1`.
pub const YOLOX_BASE_DEPTH: usize = 3;
pub const DEFAULT_STRIDES: [usize; 3] = [8, 16, 32];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub width_mult: f64,
    pub depth_mult: f64,
    pub num_classes: usize,
    pub strides: Vec<usize>,
    pub vit: Option<ViTConfig>,
    /// `(height, width)` of the network input.
    pub input_size: (usize, usize),
    /// Stem width before `width_mult`; 64 matches the full-size family, desk
    /// runs shrink it.
    pub base_channels: usize,
    pub activation: Activation,
}

impl ModelSpec {
    pub fn preset(name: &str) -> Result<ModelSpec> {
        let (width_mult, depth_mult) = match name {
            "nano" => (0.25, 0.33),
            "tiny" => (0.375, 0.33),
            "s" => (0.5, 0.33),
            "m" => (0.75, 0.67),
            "l" => (1.0, 1.0),
            "x" => (1.25, 1.33),
            other => return Err(Error::InvalidSpec(format!("unknown preset `{other}`"))),
        };
        Ok(ModelSpec {
            name: name.to_string(),
            width_mult,
            depth_mult,
            num_classes: 2,
            strides: DEFAULT_STRIDES.to_vec(),
            vit: None,
            input_size: (640, 640),
            base_channels: YOLOX_BASE_CHANNELS,
            activation: Activation::Silu,
        })
    }

    pub fn with_input_size(mut self, h: usize, w: usize) -> Self {
        self.input_size = (h, w);
        self
    }

    pub fn with_base_channels(mut self, c: usize) -> Self {
        self.base_channels = c;
        self
    }

    pub fn with_num_classes(mut self, c: usize) -> Self {
        self.num_classes = c;
        self
    }

    /// Enables the transformer insert with the default config for this width.
    pub fn with_default_vit(mut self) -> Self {
        self.vit = Some(ViTConfig::for_channels(self.stage_channels()[4]));
        self
    }

    pub fn with_vit(mut self, cfg: ViTConfig) -> Self {
        self.vit = Some(cfg);
        self
    }

    pub fn width(&self, base: f64) -> usize {
        ((base * self.width_mult).round() as usize).max(1)
    }

    pub fn depth(&self, base: usize) -> usize {
        ((base as f64 * self.depth_mult).round() as usize).max(1)
    }

    /// Output channels of stem, dark2..dark5.
    pub fn stage_channels(&self) -> [usize; 5] {
        let b = self.base_channels as f64;
        [
            self.width(b),
            self.width(2.0 * b),
            self.width(4.0 * b),
            self.width(8.0 * b),
            self.width(16.0 * b),
        ]
    }

    pub fn head_channels(&self) -> usize {
        self.width(4.0 * self.base_channels as f64)
    }

    pub fn grid_sizes(&self) -> Vec<(usize, usize)> {
        self.strides
            .iter()
            .map(|s| (self.input_size.0 / s, self.input_size.1 / s))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if !(self.width_mult > 0.0) || !(self.depth_mult > 0.0) {
            return bad(format!(
                "multipliers must be positive (width {}, depth {})",
                self.width_mult, self.depth_mult
            ));
        }
        if (self.base_channels as f64 * self.width_mult) < 1.0 {
            return bad(format!(
                "width_mult {} leaves the stem ({} base channels) with no channels",
                self.width_mult, self.base_channels
            ));
        }
        if self.num_classes == 0 {
            return bad("num_classes must be at least 1".into());
        }
        if self.strides.len() != 3 || self.strides.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("expected three ascending strides, got {:?}", self.strides));
        }
        if self.strides != DEFAULT_STRIDES {
            return bad(format!(
                "this backbone produces strides {DEFAULT_STRIDES:?}, got {:?}",
                self.strides
            ));
        }
        let (h, w) = self.input_size;
        for &s in &self.strides {
            if h == 0 || w == 0 || h % s != 0 || w % s != 0 {
                return bad(format!("input {h}x{w} is not divisible by stride {s}"));
            }
        }
        if let Some(vit) = &self.vit {
            vit.validate()?;
            let (gh, gw) = (h / 32, w / 32);
            vit.num_tokens(gh, gw)?;
        }
        Ok(())
    }

    /// Hash of everything a stored teacher-logit record must agree on with a
    /// student: input size, strides and class count.
    pub fn logit_contract_hash(&self) -> [u8; 32] {
        let contract = format!(
            "logit-contract/v1;input={}x{};strides={:?};classes={}",
            self.input_size.0, self.input_size.1, self.strides, self.num_classes
        );
        Sha256::digest(contract.as_bytes()).into()
    }
}
