//! Procedural test images with smooth gradients, sharp edges and fine texture.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Size in pixels of one layout unit; shapes and noise are defined per unit so
/// larger images hold proportionally more content.
const UNIT: f32 = 128.0;

struct ValueNoise {
    grid: Vec<f32>,
    cols: usize,
    rows: usize,
    cells_per_unit: f32,
}

impl ValueNoise {
    fn new(rng: &mut ChaCha8Rng, cells_per_unit: f32, extent: (f32, f32)) -> Self {
        let cols = (extent.0 * cells_per_unit).ceil() as usize + 2;
        let rows = (extent.1 * cells_per_unit).ceil() as usize + 2;
        let grid = (0..cols * rows).map(|_| rng.gen::<f32>()).collect();
        ValueNoise { grid, cols, rows, cells_per_unit }
    }

    fn at(&self, u: f32, v: f32) -> f32 {
        let (x, y) = (u * self.cells_per_unit, v * self.cells_per_unit);
        let (x0, y0) = ((x.floor() as usize).min(self.cols - 1), (y.floor() as usize).min(self.rows - 1));
        let (x1, y1) = ((x0 + 1).min(self.cols - 1), (y0 + 1).min(self.rows - 1));
        let smooth = |t: f32| t * t * (3.0 - 2.0 * t);
        let (fx, fy) = (smooth(x - x0 as f32), smooth(y - y0 as f32));
        let g = |xx: usize, yy: usize| self.grid[yy * self.cols + xx];
        let top = g(x0, y0) * (1.0 - fx) + g(x1, y0) * fx;
        let bot = g(x0, y1) * (1.0 - fx) + g(x1, y1) * fx;
        top * (1.0 - fy) + bot * fy
    }
}

enum Shape {
    Disc { cx: f32, cy: f32, r: f32 },
    Rect { x0: f32, y0: f32, x1: f32, y1: f32 },
    Stripes { freq: f32, angle: f32, cx: f32, cy: f32, r: f32 },
}

/// Fill of one pixel by a shape.
enum Cover {
    Outside,
    Full,
    /// Darker band of a striped disc.
    Shade,
}

impl Shape {
    fn random(rng: &mut ChaCha8Rng, extent: (f32, f32)) -> Self {
        let cx = rng.gen::<f32>() * extent.0;
        let cy = rng.gen::<f32>() * extent.1;
        match rng.gen_range(0..3) {
            0 => Shape::Disc { cx, cy, r: rng.gen_range(0.05..0.3) },
            1 => {
                let (w, h) = (rng.gen_range(0.1..0.5), rng.gen_range(0.1..0.5));
                Shape::Rect { x0: cx - w / 2.0, y0: cy - h / 2.0, x1: cx + w / 2.0, y1: cy + h / 2.0 }
            }
            _ => Shape::Stripes {
                freq: rng.gen_range(8.0..30.0),
                angle: rng.gen_range(0.0..std::f32::consts::PI),
                cx,
                cy,
                r: rng.gen_range(0.1..0.35),
            },
        }
    }

    fn covers(&self, u: f32, v: f32) -> Cover {
        let inside = match *self {
            Shape::Disc { cx, cy, r } | Shape::Stripes { cx, cy, r, .. } => (u - cx).powi(2) + (v - cy).powi(2) <= r * r,
            Shape::Rect { x0, y0, x1, y1 } => u >= x0 && u <= x1 && v >= y0 && v <= y1,
        };
        match *self {
            _ if !inside => Cover::Outside,
            Shape::Stripes { freq, angle, .. } if ((u * angle.cos() + v * angle.sin()) * freq).rem_euclid(1.0) < 0.5 => {
                Cover::Shade
            }
            _ => Cover::Full,
        }
    }
}

/// Deterministic `width x height` RGB image for `seed`: multi-octave value noise,
/// flat discs and rectangles, striped discs (two tones of one hue) and grain.
/// Content density is per 128x128 pixels, independent of the image size.
pub fn synthetic_image(seed: u64, width: u32, height: u32) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1a6e);
    let extent = (width as f32 / UNIT, height as f32 / UNIT);
    let octaves: Vec<(ValueNoise, f32)> = [(4.0, 0.55), (9.0, 0.28), (23.0, 0.12), (61.0, 0.05)]
        .into_iter()
        .map(|(s, a)| (ValueNoise::new(&mut rng, s, extent), a))
        .collect();
    let base: [f32; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let tint: [f32; 3] = [rng.gen_range(0.3..1.0), rng.gen_range(0.3..1.0), rng.gen_range(0.3..1.0)];
    let area = (extent.0 * extent.1).max(1.0);
    let count = (rng.gen_range(4..9) as f32 * area).round() as usize;
    let shapes: Vec<(Shape, [f32; 3])> = (0..count)
        .map(|_| (Shape::random(&mut rng, extent), [rng.gen(), rng.gen(), rng.gen()]))
        .collect();
    let grain = rng.gen_range(0.0..0.04f32);
    let mut img = RgbImage::new(width, height);
    for y in 0..height {
        for x in 0..width {
            let (u, v) = (x as f32 / UNIT, y as f32 / UNIT);
            let n: f32 = octaves.iter().map(|(o, a)| o.at(u, v) * a).sum();
            let mut px = [0f32; 3];
            for c in 0..3 {
                px[c] = 0.5 * base[c] + 0.6 * tint[c] * (n - 0.5) + 0.25;
            }
            for (shape, color) in &shapes {
                let k = match shape.covers(u, v) {
                    Cover::Outside => continue,
                    Cover::Full => 1.0,
                    Cover::Shade => 0.6,
                };
                for c in 0..3 {
                    px[c] = 0.35 * px[c] + 0.65 * k * color[c];
                }
            }
            let g = grain * (rng.gen::<f32>() - 0.5);
            img.put_pixel(x, y, Rgb(px.map(|p| ((p + g).clamp(0.0, 1.0) * 255.0).round() as u8)));
        }
    }
    img
}

/// Writes `count` PNG images named `synth_XXXX.png` into `dir`.
pub fn write_synthetic_corpus(dir: &Path, count: usize, width: u32, height: u32, seed: u64) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    (0..count)
        .map(|i| {
            let path = dir.join(format!("synth_{i:04}.png"));
            synthetic_image(seed.wrapping_add(i as u64), width, height)
                .save_with_format(&path, image::ImageFormat::Png)?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_varied() {
        let a = synthetic_image(1, 32, 24);
        assert_eq!(a, synthetic_image(1, 32, 24));
        assert_ne!(a, synthetic_image(2, 32, 24));
        assert_eq!(a.dimensions(), (32, 24));
        let distinct: std::collections::HashSet<_> = a.pixels().map(|p| p.0).collect();
        assert!(distinct.len() > 20);
    }
}
