use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Image;
use crate::error::Result;

enum Shape2d {
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Disc { cx: f64, cy: f64, r: f64 },
    Stripes { angle: f64, period: f64 },
}

/// A seeded synthetic RGB scene: a smooth gradient background overlaid with
/// hard-edged rectangles, discs and a striped patch. Used as a toy corpus.
pub fn synthetic_scene(width: usize, height: usize, seed: u64) -> Result<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (width as f64, height as f64);
    let base: [f64; 3] = [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)];
    let grad: [f64; 3] = [rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)];
    let mut layers = Vec::new();
    for _ in 0..rng.gen_range(4..8) {
        let color = [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
        let shape = match rng.gen_range(0..5) {
            0 | 1 => {
                let (x0, y0) = (rng.gen_range(0.0..w * 0.8), rng.gen_range(0.0..h * 0.8));
                Shape2d::Rect {
                    x0,
                    y0,
                    x1: x0 + rng.gen_range(w * 0.1..w * 0.5),
                    y1: y0 + rng.gen_range(h * 0.1..h * 0.5),
                }
            }
            2 | 3 => Shape2d::Disc {
                cx: rng.gen_range(0.0..w),
                cy: rng.gen_range(0.0..h),
                r: rng.gen_range(w.min(h) * 0.08..w.min(h) * 0.3),
            },
            _ => Shape2d::Stripes {
                angle: rng.gen_range(0.0..std::f64::consts::PI),
                period: rng.gen_range(3.0..9.0),
            },
        };
        layers.push((shape, color));
    }
    let mut data = Vec::with_capacity(width * height * 3);
    for y in 0..height {
        for x in 0..width {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = (px / w + py / h) / 2.0;
            let mut rgb = [0.0; 3];
            for c in 0..3 {
                rgb[c] = base[c] + grad[c] * (t - 0.5);
            }
            for (shape, color) in &layers {
                let alpha = match *shape {
                    Shape2d::Rect { x0, y0, x1, y1 } => {
                        (px >= x0 && px < x1 && py >= y0 && py < y1) as u8 as f64
                    }
                    Shape2d::Disc { cx, cy, r } => {
                        ((px - cx).powi(2) + (py - cy).powi(2) < r * r) as u8 as f64
                    }
                    Shape2d::Stripes { angle, period } => {
                        let inside = px > w * 0.25 && px < w * 0.75 && py > h * 0.25 && py < h * 0.75;
                        let u = px * angle.cos() + py * angle.sin();
                        (inside && (u / period).rem_euclid(1.0) < 0.5) as u8 as f64
                    }
                };
                for c in 0..3 {
                    rgb[c] += alpha * (color[c] - rgb[c]);
                }
            }
            data.extend_from_slice(&rgb);
        }
    }
    Image::new(width, height, 3, data)
}
