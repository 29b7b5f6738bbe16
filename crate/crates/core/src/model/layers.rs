//! Convolution primitives with explicit backward passes.
//!
//! Every layer reads its weights from a [`ParameterSet`] by id and writes
//! weight gradients into a second, identically laid out set. Batch items are
//! processed in order and weight gradients are accumulated in that order, so
//! results are bitwise reproducible.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParameterSet};
use crate::tensor::{sgemm, Tensor};

/// Registers parameters in declaration order and draws their initial values.
pub(crate) struct ParamBuilder {
    pub params: ParameterSet,
    rng: ChaCha8Rng,
}

impl ParamBuilder {
    pub fn new(rng: ChaCha8Rng) -> Self {
        ParamBuilder {
            params: ParameterSet::new(),
            rng,
        }
    }

    fn uniform(&mut self, name: String, shape: Vec<usize>, bound: f32) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..=bound)).collect();
        self.params.push(name, shape, data)
    }

    fn zeros(&mut self, name: String, shape: Vec<usize>) -> ParamId {
        let n: usize = shape.iter().product();
        self.params.push(name, shape, vec![0.0; n])
    }

    /// Square convolution with fan-in scaled uniform weights and bias.
    pub fn conv(&mut self, name: &str, in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Conv2d {
        let bound = 1.0 / ((in_ch * kernel * kernel) as f32).sqrt();
        let weight = self.uniform(format!("{name}.weight"), vec![out_ch, in_ch, kernel, kernel], bound);
        let bias = self.uniform(format!("{name}.bias"), vec![out_ch], bound);
        Conv2d {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad: kernel / 2,
            weight,
            bias,
        }
    }

    /// Like [`ParamBuilder::conv`] but with the bias initialised to zero.
    pub fn conv_zero_bias(&mut self, name: &str, in_ch: usize, out_ch: usize, kernel: usize) -> Conv2d {
        let bound = 1.0 / ((in_ch * kernel * kernel) as f32).sqrt();
        let weight = self.uniform(format!("{name}.weight"), vec![out_ch, in_ch, kernel, kernel], bound);
        let bias = self.zeros(format!("{name}.bias"), vec![out_ch]);
        Conv2d {
            in_ch,
            out_ch,
            kernel,
            stride: 1,
            pad: kernel / 2,
            weight,
            bias,
        }
    }

    /// 2x2 stride-2 transposed convolution. Each output pixel receives exactly
    /// `in_ch` products, which is the fan-in used for scaling.
    pub fn upconv(&mut self, name: &str, in_ch: usize, out_ch: usize) -> UpConv2x {
        let bound = 1.0 / (in_ch as f32).sqrt();
        let weight = self.uniform(format!("{name}.weight"), vec![in_ch, out_ch, 2, 2], bound);
        let bias = self.uniform(format!("{name}.bias"), vec![out_ch], bound);
        UpConv2x {
            in_ch,
            out_ch,
            weight,
            bias,
        }
    }
}

/// Zero-padded square convolution (`pad = kernel / 2`).
#[derive(Clone, Debug)]
pub(crate) struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv2d {
    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    pub fn param_count(&self) -> usize {
        self.out_ch * self.in_ch * self.kernel * self.kernel + self.out_ch
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn forward(&self, params: &ParameterSet, x: &Tensor) -> Tensor {
        let [n, c, h, w] = x.shape();
        assert_eq!(c, self.in_ch, "conv input channels");
        let (oh, ow) = self.output_size(h, w);
        let ohw = oh * ow;
        let rows = self.in_ch * self.kernel * self.kernel;
        let weight = params.get(self.weight);
        let bias = params.get(self.bias);
        let mut out = Tensor::zeros([n, self.out_ch, oh, ow]);
        let mut col = if self.is_pointwise() { Vec::new() } else { vec![0.0; rows * ohw] };
        for b in 0..n {
            let y = out.sample_mut(b);
            for (o, chunk) in y.chunks_exact_mut(ohw).enumerate() {
                chunk.fill(bias[o]);
            }
            let src: &[f32] = if self.is_pointwise() {
                x.sample(b)
            } else {
                im2col(x.sample(b), c, h, w, self.kernel, self.stride, self.pad, oh, ow, &mut col);
                &col
            };
            sgemm(self.out_ch, rows, ohw, 1.0, weight, false, src, false, 1.0, y);
        }
        out
    }

    /// Accumulates weight/bias gradients into `grads` and returns the input gradient
    /// when `need_input_grad` is set.
    pub fn backward(
        &self,
        params: &ParameterSet,
        x: &Tensor,
        dy: &Tensor,
        grads: &mut ParameterSet,
        need_input_grad: bool,
    ) -> Option<Tensor> {
        let [n, c, h, w] = x.shape();
        let [_, _, oh, ow] = dy.shape();
        let ohw = oh * ow;
        let rows = self.in_ch * self.kernel * self.kernel;
        let weight = params.get(self.weight);
        let mut col = if self.is_pointwise() { Vec::new() } else { vec![0.0; rows * ohw] };
        let mut dcol = if need_input_grad && !self.is_pointwise() {
            vec![0.0; rows * ohw]
        } else {
            Vec::new()
        };
        let mut dx = need_input_grad.then(|| Tensor::zeros(x.shape()));
        for b in 0..n {
            let dys = dy.sample(b);
            {
                let db = grads.get_mut(self.bias);
                for (o, chunk) in dys.chunks_exact(ohw).enumerate() {
                    db[o] += chunk.iter().sum::<f32>();
                }
            }
            let src: &[f32] = if self.is_pointwise() {
                x.sample(b)
            } else {
                im2col(x.sample(b), c, h, w, self.kernel, self.stride, self.pad, oh, ow, &mut col);
                &col
            };
            sgemm(self.out_ch, ohw, rows, 1.0, dys, false, src, true, 1.0, grads.get_mut(self.weight));
            if let Some(dx) = dx.as_mut() {
                if self.is_pointwise() {
                    sgemm(rows, self.out_ch, ohw, 1.0, weight, true, dys, false, 0.0, dx.sample_mut(b));
                } else {
                    sgemm(rows, self.out_ch, ohw, 1.0, weight, true, dys, false, 0.0, &mut dcol);
                    col2im(&dcol, c, h, w, self.kernel, self.stride, self.pad, oh, ow, dx.sample_mut(b));
                }
            }
        }
        dx
    }
}

/// Transposed convolution with a 2x2 kernel and stride 2 (exact 2x upsampling).
#[derive(Clone, Debug)]
pub(crate) struct UpConv2x {
    pub in_ch: usize,
    pub out_ch: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl UpConv2x {
    pub fn param_count(&self) -> usize {
        self.in_ch * self.out_ch * 4 + self.out_ch
    }

    pub fn forward(&self, params: &ParameterSet, x: &Tensor) -> Tensor {
        let [n, c, h, w] = x.shape();
        assert_eq!(c, self.in_ch, "upconv input channels");
        let hw = h * w;
        let cols = self.out_ch * 4;
        let weight = params.get(self.weight);
        let bias = params.get(self.bias);
        let mut out = Tensor::zeros([n, self.out_ch, 2 * h, 2 * w]);
        let mut tmp = vec![0.0f32; cols * hw];
        for b in 0..n {
            // tmp[(o, a, b), pixel] = sum_c W[c, (o, a, b)] * x[c, pixel]
            sgemm(cols, c, hw, 1.0, weight, true, x.sample(b), false, 0.0, &mut tmp);
            let y = out.sample_mut(b);
            for o in 0..self.out_ch {
                let plane = &mut y[o * 4 * hw..(o + 1) * 4 * hw];
                for a in 0..2 {
                    for bb in 0..2 {
                        let src = &tmp[(o * 4 + a * 2 + bb) * hw..(o * 4 + a * 2 + bb + 1) * hw];
                        for i in 0..h {
                            let row = &mut plane[(2 * i + a) * 2 * w..(2 * i + a + 1) * 2 * w];
                            let s = &src[i * w..(i + 1) * w];
                            for j in 0..w {
                                row[2 * j + bb] = s[j] + bias[o];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn backward(&self, params: &ParameterSet, x: &Tensor, dy: &Tensor, grads: &mut ParameterSet) -> Tensor {
        let [n, c, h, w] = x.shape();
        let hw = h * w;
        let cols = self.out_ch * 4;
        let weight = params.get(self.weight);
        let mut gathered = vec![0.0f32; cols * hw];
        let mut dx = Tensor::zeros(x.shape());
        for b in 0..n {
            let dys = dy.sample(b);
            {
                let db = grads.get_mut(self.bias);
                for o in 0..self.out_ch {
                    db[o] += dys[o * 4 * hw..(o + 1) * 4 * hw].iter().sum::<f32>();
                }
            }
            for o in 0..self.out_ch {
                let plane = &dys[o * 4 * hw..(o + 1) * 4 * hw];
                for a in 0..2 {
                    for bb in 0..2 {
                        let dst = &mut gathered[(o * 4 + a * 2 + bb) * hw..(o * 4 + a * 2 + bb + 1) * hw];
                        for i in 0..h {
                            let row = &plane[(2 * i + a) * 2 * w..(2 * i + a + 1) * 2 * w];
                            for j in 0..w {
                                dst[i * w + j] = row[2 * j + bb];
                            }
                        }
                    }
                }
            }
            sgemm(c, hw, cols, 1.0, x.sample(b), false, &gathered, true, 1.0, grads.get_mut(self.weight));
            sgemm(c, cols, hw, 1.0, weight, false, &gathered, false, 0.0, dx.sample_mut(b));
        }
        dx
    }
}

pub(crate) fn relu_inplace(t: &mut Tensor) {
    t.map_inplace(|v| v.max(0.0));
}

pub(crate) fn relu(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    relu_inplace(&mut out);
    out
}

/// Zeroes `grad` wherever the pre-activation was not positive.
pub(crate) fn relu_backward_inplace(pre: &Tensor, grad: &mut Tensor) {
    for (g, &p) in grad.data_mut().iter_mut().zip(pre.data()) {
        if p <= 0.0 {
            *g = 0.0;
        }
    }
}

pub(crate) fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f32],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    col: &mut [f32],
) {
    let ohw = oh * ow;
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ch * k + ky) * k + kx) * ohw..((ch * k + ky) * k + kx + 1) * ohw];
                for oy in 0..oh {
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    if stride == 1 {
                        // ix = ox + kx - pad; copy the in-bounds run in one go.
                        let shift = kx as isize - pad as isize;
                        let lo = (-shift).max(0) as usize;
                        let hi = ((w as isize - shift).min(ow as isize)).max(lo as isize) as usize;
                        dst[..lo].fill(0.0);
                        dst[lo..hi].copy_from_slice(&src[(lo as isize + shift) as usize..(hi as isize + shift) as usize]);
                        dst[hi..].fill(0.0);
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            *d = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    col: &[f32],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    dx: &mut [f32],
) {
    let ohw = oh * ow;
    dx.fill(0.0);
    for ch in 0..c {
        let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ch * k + ky) * k + kx) * ohw..((ch * k + ky) * k + kx + 1) * ohw];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src = &row[oy * ow..(oy + 1) * ow];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn naive_conv(x: &Tensor, wt: &[f32], bias: &[f32], out_ch: usize, k: usize, s: usize, p: usize) -> Tensor {
        let [n, c, h, w] = x.shape();
        let oh = (h + 2 * p - k) / s + 1;
        let ow = (w + 2 * p - k) / s + 1;
        Tensor::from_fn([n, out_ch, oh, ow], |b, o, oy, ox| {
            let mut acc = bias[o];
            for ch in 0..c {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * s + ky) as isize - p as isize;
                        let ix = (ox * s + kx) as isize - p as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            acc += wt[((o * c + ch) * k + ky) * k + kx] * x.get(b, ch, iy as usize, ix as usize);
                        }
                    }
                }
            }
            acc
        })
    }

    fn random_tensor(shape: [usize; 4], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
    }

    fn assert_close(a: &Tensor, b: &Tensor, tol: f32) {
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= tol, "{x} vs {y}");
        }
    }

    #[test]
    fn conv_forward_matches_direct_loops() {
        for (k, s, hh, ww) in [(3, 1, 7, 5), (3, 2, 8, 6), (3, 2, 7, 9), (1, 1, 4, 4)] {
            let mut pb = ParamBuilder::new(ChaCha8Rng::seed_from_u64(1));
            let conv = pb.conv("c", 3, 4, k, s);
            let x = random_tensor([2, 3, hh, ww], 2);
            let y = conv.forward(&pb.params, &x);
            let expect = naive_conv(&x, pb.params.get(conv.weight), pb.params.get(conv.bias), 4, k, s, k / 2);
            assert_close(&y, &expect, 1e-5);
        }
    }

    // Central differences on a scalar objective sum(dy * f(x)).
    fn check_grads<F>(mut params: ParameterSet, x: &Tensor, dy: &Tensor, fwd: F, grads: &ParameterSet, dx: &Tensor)
    where
        F: Fn(&ParameterSet, &Tensor) -> Tensor,
    {
        let obj = |p: &ParameterSet, x: &Tensor| -> f64 {
            fwd(p, x).data().iter().zip(dy.data()).map(|(a, b)| *a as f64 * *b as f64).sum()
        };
        let h = 1e-2f32;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (obj(&params, &xp) - obj(&params, &xm)) / (2.0 * h as f64);
            assert!((fd - dx.data()[i] as f64).abs() < 2e-3, "dx[{i}] {fd} vs {}", dx.data()[i]);
        }
        let names: Vec<String> = params.iter().map(|p| p.name.clone()).collect();
        for name in names {
            let n = params.find(&name).unwrap().data.len();
            for i in 0..n {
                let orig = params.find(&name).unwrap().data[i];
                params.find_mut(&name).unwrap().data[i] = orig + h;
                let fp = obj(&params, x);
                params.find_mut(&name).unwrap().data[i] = orig - h;
                let fm = obj(&params, x);
                params.find_mut(&name).unwrap().data[i] = orig;
                let fd = (fp - fm) / (2.0 * h as f64);
                let an = grads.find(&name).unwrap().data[i] as f64;
                assert!((fd - an).abs() < 2e-3, "{name}[{i}] {fd} vs {an}");
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        for (k, s) in [(3, 1), (3, 2), (1, 1)] {
            let mut pb = ParamBuilder::new(ChaCha8Rng::seed_from_u64(3));
            let conv = pb.conv("c", 2, 3, k, s);
            let x = random_tensor([2, 2, 5, 6], 4);
            let y = conv.forward(&pb.params, &x);
            let dy = random_tensor(y.shape(), 5);
            let mut grads = pb.params.zeros_like();
            let dx = conv.backward(&pb.params, &x, &dy, &mut grads, true).unwrap();
            let c2 = conv.clone();
            check_grads(pb.params.clone(), &x, &dy, move |p, x| c2.forward(p, x), &grads, &dx);
        }
    }

    #[test]
    fn upconv_backward_matches_finite_differences() {
        let mut pb = ParamBuilder::new(ChaCha8Rng::seed_from_u64(6));
        let up = pb.upconv("u", 3, 2);
        let x = random_tensor([2, 3, 3, 4], 7);
        let y = up.forward(&pb.params, &x);
        assert_eq!(y.shape(), [2, 2, 6, 8]);
        let dy = random_tensor(y.shape(), 8);
        let mut grads = pb.params.zeros_like();
        let dx = up.backward(&pb.params, &x, &dy, &mut grads);
        let u2 = up.clone();
        check_grads(pb.params.clone(), &x, &dy, move |p, x| u2.forward(p, x), &grads, &dx);
    }

    #[test]
    fn upconv_places_kernel_taps() {
        let mut pb = ParamBuilder::new(ChaCha8Rng::seed_from_u64(9));
        let up = pb.upconv("u", 1, 1);
        pb.params.get_mut(up.weight).copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
        pb.params.get_mut(up.bias)[0] = 0.5;
        let x = Tensor::from_vec([1, 1, 1, 2], vec![1.0, 10.0]).unwrap();
        let y = up.forward(&pb.params, &x);
        assert_eq!(y.data(), &[1.5, 2.5, 10.5, 20.5, 3.5, 4.5, 30.5, 40.5]);
    }
}
