//! Training objective: `L1 + (1 - SSIM)` with unit weights.
//!
//! SSIM uses a normalised Gaussian window evaluated at "valid" positions only
//! (no border padding), per channel, averaged over batch, channels and
//! positions. All accumulation happens in `f64`; gradients are returned as
//! `f32` tensors shaped like the prediction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SsimParams {
    pub window_size: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            window_size: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl SsimParams {
    pub fn validate(&self) -> Result<()> {
        if self.window_size == 0 || self.window_size % 2 == 0 {
            return Err(Error::Config(format!("SSIM window size {} must be odd", self.window_size)));
        }
        if !(self.sigma > 0.0) || !(self.dynamic_range > 0.0) {
            return Err(Error::Config("SSIM sigma and dynamic range must be positive".into()));
        }
        Ok(())
    }

    /// 1-D Gaussian taps normalised to sum to one; the 2-D window is their outer product.
    pub fn window_1d(&self) -> Vec<f64> {
        let half = (self.window_size / 2) as f64;
        let raw: Vec<f64> = (0..self.window_size)
            .map(|i| {
                let d = i as f64 - half;
                (-(d * d) / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let sum: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / sum).collect()
    }

    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub l1: f64,
    /// `1 - mean_ssim`
    pub ssim_term: f64,
    pub mean_ssim: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.l1.is_finite() && self.ssim_term.is_finite()
    }
}

/// Mean absolute difference over all elements.
pub fn l1_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    pred.ensure_same_shape(target, "l1_loss")?;
    if pred.is_empty() {
        return Err(Error::Input("l1_loss of empty tensors".into()));
    }
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| (p as f64 - t as f64).abs())
        .sum();
    Ok(sum / pred.len() as f64)
}

pub fn l1_loss_with_grad(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    let loss = l1_loss(pred, target)?;
    let scale = 1.0 / pred.len() as f64;
    let grad: Vec<f32> = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p as f64 - t as f64;
            if d > 0.0 {
                scale as f32
            } else if d < 0.0 {
                -scale as f32
            } else {
                0.0
            }
        })
        .collect();
    Ok((loss, Tensor::from_vec(pred.shape(), grad)?))
}

/// Valid-mode separable filtering of an `h x w` plane.
fn filter_valid(src: &[f64], h: usize, w: usize, taps: &[f64], tmp: &mut Vec<f64>, out: &mut Vec<f64>) {
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    tmp.clear();
    tmp.resize(h * ow, 0.0);
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        let dst = &mut tmp[y * ow..(y + 1) * ow];
        for (x, d) in dst.iter_mut().enumerate() {
            *d = taps.iter().zip(&row[x..x + k]).map(|(a, b)| a * b).sum();
        }
    }
    out.clear();
    out.resize(oh * ow, 0.0);
    for y in 0..oh {
        for (t, &g) in taps.iter().enumerate() {
            let src_row = &tmp[(y + t) * ow..(y + t + 1) * ow];
            let dst = &mut out[y * ow..(y + 1) * ow];
            for (d, s) in dst.iter_mut().zip(src_row) {
                *d += g * s;
            }
        }
    }
}

/// Adjoint of [`filter_valid`]: spreads an `oh x ow` map back onto `h x w`.
fn filter_valid_adjoint(grad: &[f64], h: usize, w: usize, taps: &[f64], tmp: &mut Vec<f64>, out: &mut [f64]) {
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    tmp.clear();
    tmp.resize(h * ow, 0.0);
    for y in 0..oh {
        let src = &grad[y * ow..(y + 1) * ow];
        for (t, &g) in taps.iter().enumerate() {
            let dst = &mut tmp[(y + t) * ow..(y + t + 1) * ow];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += g * s;
            }
        }
    }
    out.iter_mut().for_each(|v| *v = 0.0);
    for y in 0..h {
        let src = &tmp[y * ow..(y + 1) * ow];
        let dst = &mut out[y * w..(y + 1) * w];
        for (x, &s) in src.iter().enumerate() {
            for (t, &g) in taps.iter().enumerate() {
                dst[x + t] += g * s;
            }
        }
    }
}

fn check_ssim_inputs(pred: &Tensor, target: &Tensor, params: &SsimParams) -> Result<()> {
    params.validate()?;
    pred.ensure_same_shape(target, "ssim")?;
    if pred.height() < params.window_size || pred.width() < params.window_size {
        return Err(Error::Input(format!(
            "image {}x{} is smaller than the {}x{} SSIM window",
            pred.height(),
            pred.width(),
            params.window_size,
            params.window_size
        )));
    }
    if pred.batch() == 0 || pred.channels() == 0 {
        return Err(Error::Input("ssim of empty tensors".into()));
    }
    Ok(())
}

/// Mean local SSIM over every valid window position of every plane.
pub fn ssim_index(pred: &Tensor, target: &Tensor, params: &SsimParams) -> Result<f64> {
    ssim_impl(pred, target, params, false).map(|(v, _)| v)
}

/// Mean SSIM and its gradient with respect to `pred`.
pub fn ssim_with_grad(pred: &Tensor, target: &Tensor, params: &SsimParams) -> Result<(f64, Tensor)> {
    ssim_impl(pred, target, params, true).map(|(v, g)| (v, g.expect("gradient requested")))
}

fn ssim_impl(pred: &Tensor, target: &Tensor, params: &SsimParams, want_grad: bool) -> Result<(f64, Option<Tensor>)> {
    check_ssim_inputs(pred, target, params)?;
    let [n, c, h, w] = pred.shape();
    let taps = params.window_1d();
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let (c1, c2) = (params.c1(), params.c2());
    let positions = (n * c * oh * ow) as f64;

    let mut grad = want_grad.then(|| vec![0.0f32; pred.len()]);
    let mut tmp = Vec::new();
    let mut mu_x = Vec::new();
    let mut mu_y = Vec::new();
    let mut s_xx = Vec::new();
    let mut s_yy = Vec::new();
    let mut s_xy = Vec::new();
    let mut g_a = vec![0.0; oh * ow];
    let mut g_xx = vec![0.0; oh * ow];
    let mut g_xy = vec![0.0; oh * ow];
    let mut back = vec![0.0; h * w];
    let mut total = 0.0f64;

    for b in 0..n {
        for ch in 0..c {
            let x: Vec<f64> = pred.plane(b, ch).iter().map(|&v| v as f64).collect();
            let y: Vec<f64> = target.plane(b, ch).iter().map(|&v| v as f64).collect();
            let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
            let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
            let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
            filter_valid(&x, h, w, &taps, &mut tmp, &mut mu_x);
            filter_valid(&y, h, w, &taps, &mut tmp, &mut mu_y);
            filter_valid(&xx, h, w, &taps, &mut tmp, &mut s_xx);
            filter_valid(&yy, h, w, &taps, &mut tmp, &mut s_yy);
            filter_valid(&xy, h, w, &taps, &mut tmp, &mut s_xy);

            let mut plane_sum = 0.0;
            for i in 0..oh * ow {
                let (a, bb) = (mu_x[i], mu_y[i]);
                let n1 = 2.0 * a * bb + c1;
                let n2 = 2.0 * (s_xy[i] - a * bb) + c2;
                let d1 = a * a + bb * bb + c1;
                let d2 = s_xx[i] - a * a + s_yy[i] - bb * bb + c2;
                let s = n1 * n2 / (d1 * d2);
                plane_sum += s;
                if want_grad {
                    let scale = 1.0 / positions;
                    g_a[i] = scale * (2.0 * bb * (n2 - n1) / (d1 * d2) - 2.0 * a * s * (1.0 / d1 - 1.0 / d2));
                    g_xx[i] = scale * (-s / d2);
                    g_xy[i] = scale * (2.0 * n1 / (d1 * d2));
                }
            }
            total += plane_sum;

            if let Some(grad) = grad.as_mut() {
                let start = (b * c + ch) * h * w;
                let dst = &mut grad[start..start + h * w];
                filter_valid_adjoint(&g_a, h, w, &taps, &mut tmp, &mut back);
                let mut acc: Vec<f64> = back.clone();
                filter_valid_adjoint(&g_xx, h, w, &taps, &mut tmp, &mut back);
                for (a, (bk, xv)) in acc.iter_mut().zip(back.iter().zip(&x)) {
                    *a += 2.0 * xv * bk;
                }
                filter_valid_adjoint(&g_xy, h, w, &taps, &mut tmp, &mut back);
                for (a, (bk, yv)) in acc.iter_mut().zip(back.iter().zip(&y)) {
                    *a += yv * bk;
                }
                for (d, a) in dst.iter_mut().zip(acc) {
                    *d = a as f32;
                }
            }
        }
    }
    let grad = match grad {
        Some(g) => Some(Tensor::from_vec(pred.shape(), g)?),
        None => None,
    };
    Ok((total / positions, grad))
}

/// Unit-weighted `L1 + (1 - SSIM)`.
pub fn total_loss(pred: &Tensor, target: &Tensor, params: &SsimParams) -> Result<LossReport> {
    let l1 = l1_loss(pred, target)?;
    let mean_ssim = ssim_index(pred, target, params)?;
    Ok(report(l1, mean_ssim))
}

/// [`total_loss`] plus its gradient with respect to `pred`.
pub fn total_loss_with_grad(pred: &Tensor, target: &Tensor, params: &SsimParams) -> Result<(LossReport, Tensor)> {
    let (l1, mut grad) = l1_loss_with_grad(pred, target)?;
    let (mean_ssim, g_ssim) = ssim_with_grad(pred, target, params)?;
    for (g, s) in grad.data_mut().iter_mut().zip(g_ssim.data()) {
        *g -= *s;
    }
    Ok((report(l1, mean_ssim), grad))
}

fn report(l1: f64, mean_ssim: f64) -> LossReport {
    let ssim_term = 1.0 - mean_ssim;
    LossReport {
        total: l1 + ssim_term,
        l1,
        ssim_term,
        mean_ssim,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_is_normalised_and_symmetric() {
        let w = SsimParams::default().window_1d();
        assert_eq!(w.len(), 11);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..5 {
            assert!((w[i] - w[10 - i]).abs() < 1e-15);
        }
    }

    #[test]
    fn even_window_rejected() {
        let p = SsimParams { window_size: 10, ..Default::default() };
        let x = Tensor::zeros([1, 1, 16, 16]);
        assert!(matches!(ssim_index(&x, &x, &p), Err(Error::Config(_))));
    }

    #[test]
    fn small_image_is_input_error() {
        let x = Tensor::full([1, 3, 8, 8], 0.3);
        assert!(matches!(ssim_index(&x, &x, &SsimParams::default()), Err(Error::Input(_))));
    }

    #[test]
    fn l1_examples() {
        let t = Tensor::from_fn([1, 3, 4, 4], |_, c, y, x| (c + y + x) as f32 / 10.0);
        assert_eq!(l1_loss(&t, &t).unwrap(), 0.0);
        let mut p = t.clone();
        p.map_inplace(|v| v + 0.1);
        assert!((l1_loss(&p, &t).unwrap() - 0.1).abs() < 1e-6);
        assert!(matches!(l1_loss(&p, &Tensor::zeros([1, 3, 4, 5])), Err(Error::Dimension(_))));
    }

    #[test]
    fn filter_adjoint_identity() {
        // <F x, g> == <x, F^T g>
        let taps = SsimParams { window_size: 5, ..Default::default() }.window_1d();
        let (h, w) = (9, 7);
        let x: Vec<f64> = (0..h * w).map(|i| ((i * 37 % 11) as f64).sin()).collect();
        let g: Vec<f64> = (0..(h - 4) * (w - 4)).map(|i| ((i * 13 % 7) as f64).cos()).collect();
        let mut tmp = Vec::new();
        let mut fx = Vec::new();
        filter_valid(&x, h, w, &taps, &mut tmp, &mut fx);
        let mut ftg = vec![0.0; h * w];
        filter_valid_adjoint(&g, h, w, &taps, &mut tmp, &mut ftg);
        let lhs: f64 = fx.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&ftg).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
