//! Residual quality attention: a small convolutional autoencoder looks at the
//! encoder skip features and the upsampled decoder features together and emits a
//! single-channel gate `gamma` in `[0, 1]`. The block output is the convex blend
//! `gamma * skip + (1 - gamma) * decoder`, with `gamma` shared by every channel.

use super::layers::{relu, relu_backward_inplace, sigmoid, Conv2d, ParamBuilder, UpConv2x};
use super::params::ParameterSet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub(crate) struct RqAttention {
    pub channels: usize,
    reduce: Conv2d,
    downs: Vec<Conv2d>,
    ups: Vec<UpConv2x>,
    out: Conv2d,
}

struct AutoencoderTrace {
    z: Tensor,
    reduce_pre: Tensor,
    down_in: Vec<Tensor>,
    down_pre: Vec<Tensor>,
    up_in: Vec<Tensor>,
    up_pre: Vec<Tensor>,
    out_in: Tensor,
}

pub(crate) struct AttentionTrace {
    skip: Tensor,
    decoder: Tensor,
    gamma: Tensor,
    inner: Option<AutoencoderTrace>,
}

impl AttentionTrace {
    pub fn gamma(&self) -> &Tensor {
        &self.gamma
    }
}

impl RqAttention {
    pub fn new(pb: &mut ParamBuilder, prefix: &str, channels: usize, hidden: usize, depth: usize) -> Self {
        let reduce = pb.conv(&format!("{prefix}.conv0"), 2 * channels, hidden, 1, 1);
        let downs = (0..depth)
            .map(|i| pb.conv(&format!("{prefix}.down{i}"), hidden, hidden, 3, 2))
            .collect();
        let ups = (0..depth)
            .map(|i| pb.upconv(&format!("{prefix}.up{i}"), hidden, hidden))
            .collect();
        let out = pb.conv_zero_bias(&format!("{prefix}.conv1"), hidden, 1, 3);
        RqAttention {
            channels,
            reduce,
            downs,
            ups,
            out,
        }
    }

    pub fn param_count(&self) -> usize {
        self.reduce.param_count()
            + self.downs.iter().map(Conv2d::param_count).sum::<usize>()
            + self.ups.iter().map(UpConv2x::param_count).sum::<usize>()
            + self.out.param_count()
    }

    fn check_inputs(&self, skip: &Tensor, decoder: &Tensor) -> Result<()> {
        skip.ensure_same_shape(decoder, "attention inputs")?;
        if skip.channels() != self.channels {
            return Err(Error::Dimension(format!(
                "attention block expects {} channels, got {}",
                self.channels,
                skip.channels()
            )));
        }
        Ok(())
    }

    fn gate_map(&self, params: &ParameterSet, skip: &Tensor, decoder: &Tensor, trace: bool) -> (Tensor, Option<AutoencoderTrace>) {
        let z = Tensor::concat_channels(skip, decoder).expect("shapes checked");
        let reduce_pre = self.reduce.forward(params, &z);
        let mut r = relu(&reduce_pre);
        let mut sizes = vec![(r.height(), r.width())];
        let mut down_in = Vec::new();
        let mut down_pre = Vec::new();
        for d in &self.downs {
            let pre = d.forward(params, &r);
            let next = relu(&pre);
            sizes.push((next.height(), next.width()));
            if trace {
                down_in.push(r);
                down_pre.push(pre);
            }
            r = next;
        }
        let mut up_in = Vec::new();
        let mut up_pre = Vec::new();
        for (i, u) in self.ups.iter().enumerate() {
            let (th, tw) = sizes[self.downs.len() - 1 - i];
            let pre = u.forward(params, &r).crop(th, tw);
            let next = relu(&pre);
            if trace {
                up_in.push(r);
                up_pre.push(pre);
            }
            r = next;
        }
        let mut gamma = self.out.forward(params, &r);
        gamma.map_inplace(sigmoid);
        let t = trace.then(|| AutoencoderTrace {
            z,
            reduce_pre,
            down_in,
            down_pre,
            up_in,
            up_pre,
            out_in: r,
        });
        (gamma, t)
    }

    /// Returns the blended features and the gate map. A `gate_override` replaces the
    /// learned gate by a constant map.
    pub fn forward(
        &self,
        params: &ParameterSet,
        skip: &Tensor,
        decoder: &Tensor,
        gate_override: Option<f32>,
    ) -> Result<(Tensor, Tensor)> {
        self.check_inputs(skip, decoder)?;
        let gamma = match gate_override {
            Some(g) => constant_gate(skip, g)?,
            None => self.gate_map(params, skip, decoder, false).0,
        };
        Ok((blend(skip, decoder, &gamma)?, gamma))
    }

    pub fn forward_trace(
        &self,
        params: &ParameterSet,
        skip: Tensor,
        decoder: Tensor,
        gate_override: Option<f32>,
    ) -> Result<(Tensor, AttentionTrace)> {
        self.check_inputs(&skip, &decoder)?;
        let (gamma, inner) = match gate_override {
            Some(g) => (constant_gate(&skip, g)?, None),
            None => self.gate_map(params, &skip, &decoder, true),
        };
        let out = blend(&skip, &decoder, &gamma)?;
        Ok((
            out,
            AttentionTrace {
                skip,
                decoder,
                gamma,
                inner,
            },
        ))
    }

    /// Returns `(d_skip, d_decoder)` and accumulates parameter gradients.
    pub fn backward(&self, params: &ParameterSet, trace: &AttentionTrace, grad: &Tensor, grads: &mut ParameterSet) -> (Tensor, Tensor) {
        let (mut d_skip, mut d_dec, d_gamma) = blend_backward(&trace.skip, &trace.decoder, &trace.gamma, grad);
        let Some(inner) = &trace.inner else {
            return (d_skip, d_dec);
        };
        let mut d_logits = d_gamma;
        for (g, &y) in d_logits.data_mut().iter_mut().zip(trace.gamma.data()) {
            *g *= y * (1.0 - y);
        }
        let mut dr = self
            .out
            .backward(params, &inner.out_in, &d_logits, grads, true)
            .expect("input grad requested");
        for (i, u) in self.ups.iter().enumerate().rev() {
            relu_backward_inplace(&inner.up_pre[i], &mut dr);
            let full_h = inner.up_in[i].height() * 2;
            let full_w = inner.up_in[i].width() * 2;
            let d_full = dr.zero_extend(full_h, full_w);
            dr = u.backward(params, &inner.up_in[i], &d_full, grads);
        }
        for (i, d) in self.downs.iter().enumerate().rev() {
            relu_backward_inplace(&inner.down_pre[i], &mut dr);
            dr = d
                .backward(params, &inner.down_in[i], &dr, grads, true)
                .expect("input grad requested");
        }
        relu_backward_inplace(&inner.reduce_pre, &mut dr);
        let dz = self
            .reduce
            .backward(params, &inner.z, &dr, grads, true)
            .expect("input grad requested");
        let (dzs, dzd) = dz.split_channels(self.channels);
        d_skip.add_assign(&dzs);
        d_dec.add_assign(&dzd);
        (d_skip, d_dec)
    }
}

fn constant_gate(like: &Tensor, value: f32) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&value) {
        return Err(Error::Config(format!("gate override {value} outside [0, 1]")));
    }
    let [n, _, h, w] = like.shape();
    Ok(Tensor::full([n, 1, h, w], value))
}

/// `gamma * skip + (1 - gamma) * decoder`, broadcasting the single-channel `gamma`
/// over every channel.
pub fn blend(skip: &Tensor, decoder: &Tensor, gamma: &Tensor) -> Result<Tensor> {
    skip.ensure_same_shape(decoder, "gate inputs")?;
    let [n, c, h, w] = skip.shape();
    if gamma.shape() != [n, 1, h, w] {
        return Err(Error::Dimension(format!(
            "gate map {:?} does not fit features {:?}",
            gamma.shape(),
            skip.shape()
        )));
    }
    let hw = h * w;
    let mut out = Tensor::zeros(skip.shape());
    for b in 0..n {
        let g = gamma.sample(b);
        let s = skip.sample(b);
        let d = decoder.sample(b);
        let o = out.sample_mut(b);
        for ch in 0..c {
            for p in 0..hw {
                let i = ch * hw + p;
                o[i] = g[p] * s[i] + (1.0 - g[p]) * d[i];
            }
        }
    }
    Ok(out)
}

/// Gradients of [`blend`] with respect to `(skip, decoder, gamma)`.
pub fn blend_backward(skip: &Tensor, decoder: &Tensor, gamma: &Tensor, grad: &Tensor) -> (Tensor, Tensor, Tensor) {
    let [n, c, h, w] = skip.shape();
    let hw = h * w;
    let mut d_skip = Tensor::zeros(skip.shape());
    let mut d_dec = Tensor::zeros(skip.shape());
    let mut d_gamma = Tensor::zeros([n, 1, h, w]);
    for b in 0..n {
        let g = gamma.sample(b);
        let s = skip.sample(b);
        let d = decoder.sample(b);
        let up = grad.sample(b);
        let dg = d_gamma.sample_mut(b);
        for ch in 0..c {
            for p in 0..hw {
                let i = ch * hw + p;
                dg[p] += up[i] * (s[i] - d[i]);
            }
        }
        let ds = d_skip.sample_mut(b);
        for ch in 0..c {
            for p in 0..hw {
                ds[ch * hw + p] = g[p] * up[ch * hw + p];
            }
        }
        let dd = d_dec.sample_mut(b);
        for ch in 0..c {
            for p in 0..hw {
                dd[ch * hw + p] = (1.0 - g[p]) * up[ch * hw + p];
            }
        }
    }
    (d_skip, d_dec, d_gamma)
}
