use sonar_kd::boxes::DetBox;
use sonar_kd::dataaug::{Image8, WALL_CLASS};

const WALL_COLOR: [u8; 3] = [255, 40, 40];
const OTHER_COLOR: [u8; 3] = [40, 220, 40];

/// RGB copy of `image` with a 1-pixel outline per detection.
pub fn draw_detections(image: &Image8, dets: &[DetBox]) -> Image8 {
    let mut out = image.to_rgb();
    let (w, h) = (out.width as i64, out.height as i64);
    for d in dets {
        let color = if d.class_id == WALL_CLASS { WALL_COLOR } else { OTHER_COLOR };
        let x0 = (d.bbox.x0().floor() as i64).clamp(0, w - 1);
        let y0 = (d.bbox.y0().floor() as i64).clamp(0, h - 1);
        let x1 = ((d.bbox.x1().ceil() as i64) - 1).clamp(0, w - 1);
        let y1 = ((d.bbox.y1().ceil() as i64) - 1).clamp(0, h - 1);
        let mut put = |x: i64, y: i64| {
            for (c, &v) in color.iter().enumerate() {
                out.set(x as usize, y as usize, c, v);
            }
        };
        for x in x0..=x1 {
            put(x, y0);
            put(x, y1);
        }
        for y in y0..=y1 {
            put(x0, y);
            put(x1, y);
        }
    }
    out
}
