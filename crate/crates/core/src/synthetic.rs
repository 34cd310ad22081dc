//! Procedural piecewise-smooth test images: a shaded background, oriented
//! gratings and a handful of flat-colored rectangles and disks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::evaluation::{image_rng, ImageBuffer};

/// Sample range after normalization; keeps clipped noisy inputs close to
/// their unclipped statistics.
pub const TEXTURE_RANGE: (f64, f64) = (0.2, 0.8);

enum Shape {
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Disk { cy: f64, cx: f64, r: f64 },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
            Shape::Disk { cy, cx, r } => (y - cy).powi(2) + (x - cx).powi(2) < r * r,
        }
    }
}

struct Grating {
    ky: f64,
    kx: f64,
    phase: f64,
    amp: Vec<f64>,
}

pub fn texture_image(height: usize, width: usize, channels: usize, rng: &mut ChaCha8Rng) -> ImageBuffer {
    let (h, w) = (height as f64, width as f64);
    let chan = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| -> Vec<f64> {
        let base = rng.gen_range(lo..hi);
        (0..channels).map(|_| base + rng.gen_range(-0.1..0.1) * (hi - lo)).collect()
    };
    let offset = chan(rng, 0.3, 0.7);
    let slope_y = rng.gen_range(-0.3..0.3) / h;
    let slope_x = rng.gen_range(-0.3..0.3) / w;

    let gratings: Vec<Grating> = (0..rng.gen_range(1..=2))
        .map(|_| {
            let period = rng.gen_range(5.0..18.0);
            let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            let k = 2.0 * std::f64::consts::PI / period;
            Grating {
                ky: k * theta.sin(),
                kx: k * theta.cos(),
                phase: rng.gen_range(0.0..std::f64::consts::TAU),
                amp: chan(rng, 0.03, 0.12),
            }
        })
        .collect();

    let shapes: Vec<(Shape, Vec<f64>)> = (0..rng.gen_range(3..=6))
        .map(|_| {
            let shape = if rng.gen_bool(0.5) {
                let (y0, x0) = (rng.gen_range(-0.2 * h..h), rng.gen_range(-0.2 * w..w));
                Shape::Rect {
                    y0,
                    x0,
                    y1: y0 + rng.gen_range(0.15 * h..0.6 * h),
                    x1: x0 + rng.gen_range(0.15 * w..0.6 * w),
                }
            } else {
                Shape::Disk {
                    cy: rng.gen_range(0.0..h),
                    cx: rng.gen_range(0.0..w),
                    r: rng.gen_range(0.08..0.3) * h.min(w),
                }
            };
            (shape, chan(rng, 0.1, 0.9))
        })
        .collect();

    let mut values = vec![0.0; height * width * channels];
    for y in 0..height {
        for x in 0..width {
            let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
            for c in 0..channels {
                // The last shape drawn wins.
                let mut v = shapes
                    .iter()
                    .rev()
                    .find(|(s, _)| s.contains(fy, fx))
                    .map(|(_, color)| color[c])
                    .unwrap_or(offset[c] + slope_y * fy + slope_x * fx);
                for g in &gratings {
                    v += g.amp[c] * (g.ky * fy + g.kx * fx + g.phase).sin();
                }
                values[(y * width + x) * channels + c] = v;
            }
        }
    }

    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-9);
    let (a, b) = TEXTURE_RANGE;
    let samples = values
        .iter()
        .map(|v| ((a + (v - lo) / span * (b - a)) * 255.0).round() as u8)
        .collect();
    ImageBuffer::new(width, height, channels, samples).expect("consistent dimensions")
}

/// `count` images; image `i` depends only on `(seed, i)`.
pub fn texture_set(count: usize, height: usize, width: usize, channels: usize, seed: u64) -> Vec<ImageBuffer> {
    (0..count)
        .map(|i| texture_image(height, width, channels, &mut image_rng(seed, i)))
        .collect()
}
