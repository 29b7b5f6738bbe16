//! Baseline JPEG round trips used to synthesise compressed inputs.
//!
//! Encoding uses ITU-T T.81 Annex K quantisation tables scaled by the libjpeg
//! quality formula, 4:2:0 chroma subsampling with box-averaged chroma and
//! standard Huffman tables.

use image::RgbImage;
use jpeg_encoder::{ChromaSubsamplingMethod, ColorType, Encoder, SamplingFactor};

use super::imageio::{rgb_to_tensor, tensor_to_rgb};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Identifies the codec in run metadata.
pub const CODEC_ID: &str = "jpeg-encoder 0.7 baseline (annex-k tables, libjpeg quality scaling, 4:2:0 average) / zune-jpeg decode";

pub fn encode_jpeg(img: &RgbImage, qf: u8) -> Result<Vec<u8>> {
    if !(1..=100).contains(&qf) {
        return Err(Error::Codec(format!("quality factor {qf} outside 1..=100")));
    }
    let (w, h) = (img.width(), img.height());
    let (w16, h16) = (
        u16::try_from(w).map_err(|_| Error::Codec(format!("width {w} too large for JPEG")))?,
        u16::try_from(h).map_err(|_| Error::Codec(format!("height {h} too large for JPEG")))?,
    );
    let mut out = Vec::new();
    let mut enc = Encoder::new(&mut out, qf);
    enc.set_sampling_factor(SamplingFactor::R_4_2_0);
    enc.set_chroma_subsampling_method(ChromaSubsamplingMethod::Average);
    enc.encode(img.as_raw(), w16, h16, ColorType::Rgb)
        .map_err(|e| Error::Codec(e.to_string()))?;
    Ok(out)
}

pub fn decode_jpeg(bytes: &[u8]) -> Result<RgbImage> {
    image::load_from_memory_with_format(bytes, image::ImageFormat::Jpeg)
        .map(|i| i.to_rgb8())
        .map_err(|e| Error::Codec(e.to_string()))
}

/// Compresses and decompresses an 8-bit image at quality `qf`.
pub fn jpeg_round_trip(img: &RgbImage, qf: u8) -> Result<RgbImage> {
    let decoded = decode_jpeg(&encode_jpeg(img, qf)?)?;
    if decoded.dimensions() != img.dimensions() {
        return Err(Error::Codec(format!(
            "decoder returned {:?} for a {:?} image",
            decoded.dimensions(),
            img.dimensions()
        )));
    }
    Ok(decoded)
}

/// JPEG round trip of a `(1, 3, H, W)` tensor in `[0, 1]`. The input is
/// quantised to 8 bits before encoding.
pub fn distort_jpeg(image: &Tensor, qf: u32) -> Result<Tensor> {
    if image.batch() != 1 || image.channels() != 3 {
        return Err(Error::Dimension(format!(
            "distort_jpeg expects a single RGB image, got {:?}",
            image.shape()
        )));
    }
    let qf = u8::try_from(qf).map_err(|_| Error::Codec(format!("quality factor {qf} outside 1..=100")))?;
    let rgb = tensor_to_rgb(image, 0)?;
    Ok(rgb_to_tensor(&jpeg_round_trip(&rgb, qf)?))
}
