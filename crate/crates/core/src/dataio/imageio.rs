//! Conversions between 8-bit RGB images on disk and `[0, 1]` tensors.

use std::path::Path;

use image::RgbImage;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Decodes any supported image file into a `(1, 3, H, W)` tensor.
pub fn load_image(path: &Path) -> Result<Tensor> {
    Ok(rgb_to_tensor(&load_rgb(path)?))
}

/// Missing or unreadable files are I/O errors; undecodable ones are input errors.
pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    match image::open(path) {
        Ok(img) => Ok(img.to_rgb8()),
        Err(image::ImageError::IoError(e)) => Err(Error::io(format!("reading {}", path.display()), e)),
        Err(e) => Err(Error::Input(format!("{}: {e}", path.display()))),
    }
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn([1, 3, h, w], |_, c, y, x| raw[(y * w + x) * 3 + c] as f32 / 255.0)
}

/// Quantises batch item `index` to 8-bit RGB (values are clamped to `[0, 1]` first).
pub fn tensor_to_rgb(t: &Tensor, index: usize) -> Result<RgbImage> {
    let [n, c, h, w] = t.shape();
    if index >= n || c != 3 {
        return Err(Error::Dimension(format!(
            "cannot take RGB item {index} from {:?}",
            t.shape()
        )));
    }
    let mut buf = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                buf.push(quantize(t.get(index, ch, y, x)));
            }
        }
    }
    Ok(RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer sized to image"))
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_png(t: &Tensor, path: &Path) -> Result<()> {
    tensor_to_rgb(t, 0)?.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Extracts an `h x w` window at `(top, left)` from batch item 0.
pub fn crop_window(t: &Tensor, top: usize, left: usize, h: usize, w: usize) -> Tensor {
    let c = t.channels();
    Tensor::from_fn([1, c, h, w], |_, ch, y, x| t.get(0, ch, top + y, left + x))
}

pub fn is_image_file(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref(),
        Some("png" | "jpg" | "jpeg" | "bmp" | "tif" | "tiff")
    )
}
