use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

const W: u32 = 480;
const H: u32 = 360;
const MARGIN: u32 = 40;

fn span(v: &[f64]) -> (f64, f64) {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

/// Scatter plot (no text) of `xs` against `ys`, written as PNG.
pub fn scatter_plot(xs: &[f64], ys: &[f64], path: &Path) -> Result<()> {
    if xs.len() != ys.len() {
        return Err(Error::Dimension(format!("{} x values vs {} y values", xs.len(), ys.len())));
    }
    let pts: Vec<(f64, f64)> = xs
        .iter()
        .zip(ys)
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .map(|(&x, &y)| (x, y))
        .collect();
    if pts.is_empty() {
        return Err(Error::Input("nothing to plot".into()));
    }
    let (x0, x1) = span(&pts.iter().map(|p| p.0).collect::<Vec<_>>());
    let (y0, y1) = span(&pts.iter().map(|p| p.1).collect::<Vec<_>>());
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let axis = Rgb([60, 60, 60]);
    for x in MARGIN..W - MARGIN / 2 {
        img.put_pixel(x, H - MARGIN, axis);
    }
    for y in MARGIN / 2..=H - MARGIN {
        img.put_pixel(MARGIN, y, axis);
    }
    let (pw, ph) = ((W - MARGIN - MARGIN / 2) as f64, (H - MARGIN - MARGIN / 2) as f64);
    for (x, y) in pts {
        let px = MARGIN as f64 + (x - x0) / (x1 - x0) * pw;
        let py = (H - MARGIN) as f64 - (y - y0) / (y1 - y0) * ph;
        let (cx, cy) = (px.round() as i64, py.round() as i64);
        for dy in -2..=2 {
            for dx in -2..=2 {
                let (u, v) = (cx + dx, cy + dy);
                if u >= 0 && v >= 0 && (u as u32) < W && (v as u32) < H {
                    img.put_pixel(u as u32, v as u32, Rgb([200, 40, 40]));
                }
            }
        }
    }
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}
