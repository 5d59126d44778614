use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Image8, Sample};
use crate::boxes::{BBox, GtBox};
use crate::error::{Error, Result};

pub const WALL_CLASS: usize = 0;
/// Images without a wall carry no boxes; the class exists for the label map.
pub const NOWALL_CLASS: usize = 1;
pub const CLASS_NAMES: [&str; 2] = ["Wall", "NoWall"];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    /// Fraction of images that contain a wall.
    pub wall_ratio: f64,
    /// Rayleigh scale of the background speckle.
    pub speckle: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            width: 64,
            height: 64,
            wall_ratio: 0.5,
            speckle: 30.0,
        }
    }
}

pub fn synth_sonar(seed: u64, n: usize) -> Result<Vec<Sample>> {
    synth_sonar_with(&SynthConfig::default(), seed, n)
}

/// Speckled gray images; `round(n · wall_ratio)` of them get one bright,
/// roughly vertical streak (sometimes with an acoustic shadow beside it) and
/// a box tight around the streak pixels.
pub fn synth_sonar_with(cfg: &SynthConfig, seed: u64, n: usize) -> Result<Vec<Sample>> {
    if !(0.0..=1.0).contains(&cfg.wall_ratio) {
        return Err(Error::InvalidArgument(format!("wall_ratio must be in [0,1], got {}", cfg.wall_ratio)));
    }
    if cfg.width < 32 || cfg.height < 32 {
        return Err(Error::InvalidArgument(format!(
            "synthetic images need at least 32x32 pixels, got {}x{}",
            cfg.width, cfg.height
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let walls = (n as f64 * cfg.wall_ratio).round() as usize;
    let mut has_wall: Vec<bool> = (0..n).map(|i| i < walls).collect();
    has_wall.shuffle(&mut rng);
    has_wall
        .into_iter()
        .enumerate()
        .map(|(i, wall)| {
            let mut img = speckle(cfg, &mut rng);
            let boxes = if wall { vec![draw_wall(&mut img, cfg, &mut rng)] } else { vec![] };
            Ok(Sample::original(format!("synth_{i:05}"), img, boxes))
        })
        .collect()
}

fn speckle(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Image8 {
    let data = (0..cfg.width * cfg.height)
        .map(|_| {
            let u: f64 = rng.gen_range(f64::EPSILON..1.0);
            (cfg.speckle * (-2.0 * u.ln()).sqrt()).round().min(255.0) as u8
        })
        .collect();
    Image8 {
        width: cfg.width,
        height: cfg.height,
        channels: 1,
        data,
    }
}

/// Paints a thick segment and returns its tight box.
fn draw_wall(img: &mut Image8, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> GtBox {
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let max_len = (0.75 * h).min(48.0);
    let len = rng.gen_range(20.0f64.min(max_len)..=max_len);
    let angle = rng.gen_range(-35.0f64..35.0).to_radians();
    let thick = rng.gen_range(3.0f64..5.0);
    let (dx, dy) = (angle.sin() * len / 2.0, angle.cos() * len / 2.0);
    let margin = thick / 2.0 + 1.0;
    let cx = rng.gen_range(dx.abs() + margin..w - dx.abs() - margin);
    let cy = rng.gen_range(dy + margin..h - dy - margin);
    let (ax, ay, bx, by) = (cx - dx, cy - dy, cx + dx, cy + dy);
    let shadow = rng.gen_bool(0.5);

    let dist = |px: f64, py: f64, ox: f64| {
        let (vx, vy) = (bx - ax, by - ay);
        let t = (((px - ax - ox) * vx + (py - ay) * vy) / (vx * vx + vy * vy)).clamp(0.0, 1.0);
        ((px - ax - ox - t * vx).powi(2) + (py - ay - t * vy).powi(2)).sqrt()
    };
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..cfg.height {
        for x in 0..cfg.width {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            if dist(px, py, 0.0) <= thick / 2.0 {
                let v = rng.gen_range(190u8..=255);
                img.set(x, y, 0, v);
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            } else if shadow && dist(px, py, thick + 2.0) <= thick / 2.0 + 1.0 {
                let v = img.get(x, y, 0);
                img.set(x, y, 0, v / 4);
            }
        }
    }
    GtBox {
        class_id: WALL_CLASS,
        bbox: BBox::from_corners(x0 as f64, y0 as f64, (x1 + 1) as f64, (y1 + 1) as f64),
    }
}
