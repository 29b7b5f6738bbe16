//! Full-reference fidelity metrics: PSNR, SSIM and PSNR-B.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::{ssim_index, SsimParams};
use crate::tensor::Tensor;

/// Which planes a metric looks at.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelMode {
    /// Every channel, averaged.
    #[default]
    RgbMean,
    /// ITU-R BT.601 luma only.
    LumaBt601,
}

impl ChannelMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ChannelMode::RgbMean => "rgb_mean",
            ChannelMode::LumaBt601 => "luma_bt601",
        }
    }
}

impl std::str::FromStr for ChannelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb_mean" => Ok(ChannelMode::RgbMean),
            "luma_bt601" => Ok(ChannelMode::LumaBt601),
            other => Err(Error::Config(format!("unknown channel mode `{other}`"))),
        }
    }
}

/// BT.601 luma. Written as `r + 0.587 (g - r) + 0.114 (b - r)` so grey pixels map
/// to themselves exactly. Single-channel input is returned unchanged.
pub fn to_luma(image: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = image.shape();
    match c {
        1 => Ok(image.clone()),
        3 => {
            let hw = h * w;
            let mut out = Vec::with_capacity(n * hw);
            for b in 0..n {
                let s = image.sample(b);
                for p in 0..hw {
                    let (r, g, bl) = (s[p] as f64, s[hw + p] as f64, s[2 * hw + p] as f64);
                    out.push((r + 0.587 * (g - r) + 0.114 * (bl - r)) as f32);
                }
            }
            Tensor::from_vec([n, 1, h, w], out)
        }
        _ => Err(Error::Dimension(format!("cannot derive luma from {c} channels"))),
    }
}

fn select(image: &Tensor, mode: ChannelMode) -> Result<Tensor> {
    match mode {
        ChannelMode::RgbMean => Ok(image.clone()),
        ChannelMode::LumaBt601 => to_luma(image),
    }
}

/// Mean squared error over every element.
pub fn mse(reference: &Tensor, test: &Tensor) -> Result<f64> {
    reference.ensure_same_shape(test, "mse")?;
    if reference.is_empty() {
        return Err(Error::Input("mse of empty images".into()));
    }
    let sum: f64 = reference
        .data()
        .iter()
        .zip(test.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    Ok(sum / reference.len() as f64)
}

fn db(max_val: f64, mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (max_val * max_val / mse).log10()
    }
}

/// `10 log10(max_val^2 / MSE)` over all channels; `+inf` for identical images.
pub fn psnr(reference: &Tensor, test: &Tensor, max_val: f64) -> Result<f64> {
    Ok(db(max_val, mse(reference, test)?))
}

pub fn psnr_mode(reference: &Tensor, test: &Tensor, max_val: f64, mode: ChannelMode) -> Result<f64> {
    psnr(&select(reference, mode)?, &select(test, mode)?, max_val)
}

/// SSIM with the default window and constants under the given channel convention.
pub fn ssim_eval(reference: &Tensor, test: &Tensor, mode: ChannelMode) -> Result<f64> {
    ssim_index(&select(reference, mode)?, &select(test, mode)?, &SsimParams::default())
}

/// Blocking effect factor of one plane.
///
/// For each direction, `D_b` is the mean squared difference over adjacent pixel
/// pairs straddling a block boundary and `D_bc` the same over all other adjacent
/// pairs. `eta = log2(block) / log2(min(h, w))` applies only when `D_b > D_bc`.
/// The factor is the sum of `eta * (D_b - D_bc)` over both directions.
pub fn blocking_effect_factor(plane: &[f32], h: usize, w: usize, block: usize) -> f64 {
    let eta_scale = (block as f64).log2() / (h.min(w) as f64).log2();
    let dir = |boundary: (f64, usize), inner: (f64, usize)| -> f64 {
        let db = if boundary.1 > 0 { boundary.0 / boundary.1 as f64 } else { 0.0 };
        let dbc = if inner.1 > 0 { inner.0 / inner.1 as f64 } else { 0.0 };
        if db > dbc {
            eta_scale * (db - dbc)
        } else {
            0.0
        }
    };
    // Horizontal neighbours (x, x + 1): boundary when x + 1 is a multiple of `block`.
    let (mut hb, mut hbc) = ((0.0, 0), (0.0, 0));
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..w - 1 {
            let d = row[x] as f64 - row[x + 1] as f64;
            let acc = if (x + 1) % block == 0 { &mut hb } else { &mut hbc };
            acc.0 += d * d;
            acc.1 += 1;
        }
    }
    let (mut vb, mut vbc) = ((0.0, 0), (0.0, 0));
    for y in 0..h - 1 {
        let acc = if (y + 1) % block == 0 { &mut vb } else { &mut vbc };
        for x in 0..w {
            let d = plane[y * w + x] as f64 - plane[(y + 1) * w + x] as f64;
            acc.0 += d * d;
            acc.1 += 1;
        }
    }
    dir(hb, hbc) + dir(vb, vbc)
}

/// PSNR-B: `10 log10(max_val^2 / (MSE + BEF(test)))`. The MSE is the same
/// all-channel MSE used by [`psnr`]; the BEF is measured on the luma of `test`
/// (or its single channel) and averaged over the batch.
pub fn psnr_b(reference: &Tensor, test: &Tensor, block_size: usize, max_val: f64) -> Result<f64> {
    reference.ensure_same_shape(test, "psnr_b")?;
    let [n, _, h, w] = test.shape();
    if block_size < 2 {
        return Err(Error::Input("PSNR-B block size must be at least 2".into()));
    }
    if h.min(w) <= block_size {
        return Err(Error::Input(format!(
            "image {h}x{w} too small for PSNR-B with {block_size}x{block_size} blocks"
        )));
    }
    let err = mse(reference, test)?;
    let luma = to_luma(test)?;
    let bef = (0..n)
        .map(|b| blocking_effect_factor(luma.plane(b, 0), h, w, block_size))
        .sum::<f64>()
        / n as f64;
    Ok(db(max_val, err + bef))
}
