//! The restoration network: a residual U-Net trunk whose decoder merge points
//! are gated by residual quality attention blocks.
//!
//! Layout for `num_scales = S` and widths `C_i = base_channels * 2^i`:
//!
//! ```text
//! head    3x3 conv  in -> C_0
//! encoder stage i < S-1:  R residual blocks at C_i, skip_i, 3x3 stride-2 conv C_i -> C_{i+1}
//! bottleneck              R residual blocks at C_{S-1}
//! decoder stage i (deepest first):
//!         2x2 stride-2 transposed conv C_{i+1} -> C_i
//!         attention_i(skip_i, upsampled)  -> gated features, gamma_{i+1}
//!         R residual blocks at C_i
//! tail    3x3 conv  C_0 -> in   (+ input when `global_input_residual`)
//! ```
//!
//! A residual block is `x + conv(relu(conv(x)))` with 3x3 convolutions and no
//! normalisation.

mod attention;
mod layers;
pub mod params;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use attention::{blend, blend_backward};
use attention::{AttentionTrace, RqAttention};
use layers::{relu, relu_backward_inplace, Conv2d, ParamBuilder, UpConv2x};
pub use params::{Param, ParameterSet};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub base_channels: usize,
    pub num_scales: usize,
    pub res_blocks_per_stage: usize,
    pub attention_channels: usize,
    pub attention_depth: usize,
    pub global_input_residual: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_channels: 3,
            base_channels: 64,
            num_scales: 4,
            res_blocks_per_stage: 4,
            attention_channels: 16,
            attention_depth: 2,
            global_input_residual: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.input_channels == 0 {
            return fail("input_channels must be at least 1");
        }
        if self.base_channels == 0 {
            return fail("base_channels must be at least 1");
        }
        if self.num_scales < 2 {
            return fail("num_scales must be at least 2");
        }
        if self.num_scales > 12 {
            return fail("num_scales above 12 is not supported");
        }
        if self.res_blocks_per_stage == 0 {
            return fail("res_blocks_per_stage must be at least 1");
        }
        if self.attention_channels == 0 {
            return fail("attention_channels must be at least 1");
        }
        Ok(())
    }

    /// Number of gate maps (`gamma_1 .. gamma_{S-1}`).
    pub fn num_attention_maps(&self) -> usize {
        self.num_scales - 1
    }

    /// Spatial multiple the trunk needs (`2^(S-1)`).
    pub fn size_multiple(&self) -> usize {
        1 << (self.num_scales - 1)
    }

    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// Gate maps ordered from the full-resolution merge (`gamma_1`) to the deepest.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMapSet {
    pub maps: Vec<Tensor>,
}

impl AttentionMapSet {
    /// One-based access matching the `gamma_n` numbering.
    pub fn get(&self, index: usize) -> Option<&Tensor> {
        index.checked_sub(1).and_then(|i| self.maps.get(i))
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RestorationOutput {
    pub restored: Tensor,
    pub attention: AttentionMapSet,
}

/// Extends `image` on the bottom/right by edge replication so both spatial sizes
/// are multiples of `factor`. Returns the padded tensor and the original `(h, w)`.
pub fn pad_to_multiple(image: &Tensor, factor: usize) -> Result<(Tensor, (usize, usize))> {
    if factor == 0 {
        return Err(Error::Dimension("padding factor must be at least 1".into()));
    }
    let (h, w) = (image.height(), image.width());
    if h == 0 || w == 0 {
        return Err(Error::Dimension("cannot pad an empty image".into()));
    }
    let ph = h.div_ceil(factor) * factor;
    let pw = w.div_ceil(factor) * factor;
    Ok((image.replicate_extend(ph, pw), (h, w)))
}

/// Crops a padded output back to `original` size.
pub fn crop_back(padded: &Tensor, original: (usize, usize)) -> Result<Tensor> {
    let (h, w) = original;
    if h > padded.height() || w > padded.width() {
        return Err(Error::Dimension(format!(
            "cannot crop {}x{} to {h}x{w}",
            padded.height(),
            padded.width()
        )));
    }
    Ok(padded.crop(h, w))
}

#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

struct ResTrace {
    x: Tensor,
    pre: Tensor,
}

impl ResBlock {
    fn new(pb: &mut ParamBuilder, prefix: &str, ch: usize) -> Self {
        ResBlock {
            conv1: pb.conv(&format!("{prefix}.conv0"), ch, ch, 3, 1),
            conv2: pb.conv(&format!("{prefix}.conv1"), ch, ch, 3, 1),
        }
    }

    fn forward(&self, p: &ParameterSet, x: Tensor) -> Tensor {
        let mut h = self.conv1.forward(p, &x);
        layers::relu_inplace(&mut h);
        let mut y = self.conv2.forward(p, &h);
        y.add_assign(&x);
        y
    }

    fn forward_trace(&self, p: &ParameterSet, x: Tensor) -> (Tensor, ResTrace) {
        let pre = self.conv1.forward(p, &x);
        let mut y = self.conv2.forward(p, &relu(&pre));
        y.add_assign(&x);
        (y, ResTrace { x, pre })
    }

    fn backward(&self, p: &ParameterSet, t: &ResTrace, dy: Tensor, g: &mut ParameterSet) -> Tensor {
        let mut dh = self
            .conv2
            .backward(p, &relu(&t.pre), &dy, g, true)
            .expect("input grad requested");
        relu_backward_inplace(&t.pre, &mut dh);
        let mut dx = self.conv1.backward(p, &t.x, &dh, g, true).expect("input grad requested");
        dx.add_assign(&dy);
        dx
    }
}

#[derive(Clone, Debug)]
struct Stage {
    blocks: Vec<ResBlock>,
}

impl Stage {
    fn new(pb: &mut ParamBuilder, prefix: &str, ch: usize, count: usize) -> Self {
        Stage {
            blocks: (0..count)
                .map(|j| ResBlock::new(pb, &format!("{prefix}.block{j}"), ch))
                .collect(),
        }
    }

    fn forward(&self, p: &ParameterSet, mut x: Tensor) -> Tensor {
        for b in &self.blocks {
            x = b.forward(p, x);
        }
        x
    }

    fn forward_trace(&self, p: &ParameterSet, mut x: Tensor) -> (Tensor, Vec<ResTrace>) {
        let mut traces = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, t) = b.forward_trace(p, x);
            traces.push(t);
            x = y;
        }
        (x, traces)
    }

    fn backward(&self, p: &ParameterSet, traces: &[ResTrace], mut dy: Tensor, g: &mut ParameterSet) -> Tensor {
        for (b, t) in self.blocks.iter().zip(traces).rev() {
            dy = b.backward(p, t, dy, g);
        }
        dy
    }
}

#[derive(Clone, Debug)]
struct DecoderStage {
    up: UpConv2x,
    attention: RqAttention,
    stage: Stage,
}

#[derive(Clone, Debug)]
struct Architecture {
    head: Conv2d,
    encoder: Vec<(Stage, Conv2d)>,
    bottleneck: Stage,
    /// Indexed by level; level 0 is full resolution.
    decoder: Vec<DecoderStage>,
    tail: Conv2d,
}

impl Architecture {
    fn declare(cfg: &ModelConfig, pb: &mut ParamBuilder) -> Self {
        let r = cfg.res_blocks_per_stage;
        let levels = cfg.num_scales - 1;
        let head = pb.conv("head.conv0", cfg.input_channels, cfg.channels_at(0), 3, 1);
        let encoder = (0..levels)
            .map(|i| {
                let c = cfg.channels_at(i);
                let stage = Stage::new(pb, &format!("encoder.stage{i}"), c, r);
                let down = pb.conv(&format!("encoder.stage{i}.down"), c, cfg.channels_at(i + 1), 3, 2);
                (stage, down)
            })
            .collect();
        let bottleneck = Stage::new(pb, &format!("bottleneck.stage{levels}"), cfg.channels_at(levels), r);
        let mut decoder: Vec<DecoderStage> = (0..levels)
            .rev()
            .map(|i| {
                let c = cfg.channels_at(i);
                let up = pb.upconv(&format!("decoder.stage{i}.up"), cfg.channels_at(i + 1), c);
                let attention = RqAttention::new(
                    pb,
                    &format!("decoder.stage{i}.attention"),
                    c,
                    cfg.attention_channels,
                    cfg.attention_depth,
                );
                let stage = Stage::new(pb, &format!("decoder.stage{i}"), c, r);
                DecoderStage { up, attention, stage }
            })
            .collect();
        decoder.reverse();
        let tail = pb.conv("tail.conv0", cfg.channels_at(0), cfg.input_channels, 3, 1);
        Architecture {
            head,
            encoder,
            bottleneck,
            decoder,
            tail,
        }
    }

    fn param_count(&self) -> usize {
        let stage = |s: &Stage| -> usize {
            s.blocks.iter().map(|b| b.conv1.param_count() + b.conv2.param_count()).sum()
        };
        self.head.param_count()
            + self.encoder.iter().map(|(s, d)| stage(s) + d.param_count()).sum::<usize>()
            + stage(&self.bottleneck)
            + self
                .decoder
                .iter()
                .map(|d| d.up.param_count() + d.attention.param_count() + stage(&d.stage))
                .sum::<usize>()
            + self.tail.param_count()
    }
}

/// Everything the backward pass needs from one training forward pass.
pub struct ForwardTrace {
    input_padded: Tensor,
    original: (usize, usize),
    head_in: Tensor,
    encoder: Vec<(Vec<ResTrace>, Tensor)>,
    bottleneck: Vec<ResTrace>,
    decoder: Vec<(Tensor, AttentionTrace, Vec<ResTrace>)>,
    tail_in: Tensor,
}

impl ForwardTrace {
    /// Gate maps at padded resolution, full-resolution first.
    pub fn gamma(&self, index: usize) -> Option<&Tensor> {
        index.checked_sub(1).and_then(|i| self.decoder.get(i)).map(|d| d.1.gamma())
    }
}

/// Network definition plus parameters.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    arch: Architecture,
    params: ParameterSet,
    gate_override: Option<f32>,
}

impl Model {
    /// Builds a model with parameters drawn deterministically from `seed`.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut pb = ParamBuilder::new(ChaCha8Rng::seed_from_u64(seed));
        let arch = Architecture::declare(&config, &mut pb);
        debug_assert_eq!(arch.param_count(), pb.params.num_elements());
        Ok(Model {
            config,
            arch,
            params: pb.params,
            gate_override: None,
        })
    }

    /// Wraps existing parameters, checking names and shapes against `config`.
    pub fn from_parameters(config: ModelConfig, params: ParameterSet) -> Result<Self> {
        let mut model = Model::build(config, 0)?;
        model.params.check_layout(&params)?;
        let mut ordered = model.params.clone();
        for p in ordered.iter_mut() {
            p.data = params.find(&p.name).expect("layout checked").data.clone();
        }
        model.params = ordered;
        Ok(model)
    }

    /// Test hook: replaces every learned gate with the constant `value`.
    pub fn with_gate_override(mut self, value: Option<f32>) -> Result<Self> {
        if let Some(v) = value {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("gate override {v} outside [0, 1]")));
            }
        }
        self.gate_override = value;
        Ok(self)
    }

    pub fn gate_override(&self) -> Option<f32> {
        self.gate_override
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn parameters(&self) -> &ParameterSet {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.num_elements()
    }

    /// Sets the tail convolution to zero, making the network an exact identity
    /// when `global_input_residual` is on.
    pub fn zero_output_layer(&mut self) {
        self.params.get_mut(self.arch.tail.weight).fill(0.0);
        self.params.get_mut(self.arch.tail.bias).fill(0.0);
    }

    fn check_input(&self, batch: &Tensor) -> Result<()> {
        if batch.channels() != self.config.input_channels {
            return Err(Error::Dimension(format!(
                "expected {} input channels, got {}",
                self.config.input_channels,
                batch.channels()
            )));
        }
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        if !batch.all_finite() {
            return Err(Error::Input("input contains non-finite values".into()));
        }
        Ok(())
    }

    /// Applies one attention block (`level` 0 is the full-resolution merge).
    pub fn rq_attention_forward(
        &self,
        level: usize,
        x_skip: &Tensor,
        x_decoder: &Tensor,
        gate_override: Option<f32>,
    ) -> Result<(Tensor, Tensor)> {
        let stage = self
            .arch
            .decoder
            .get(level)
            .ok_or_else(|| Error::Config(format!("no attention block at level {level}")))?;
        stage.attention.forward(&self.params, x_skip, x_decoder, gate_override)
    }

    /// Restores a batch and returns the gate maps. Any spatial size is accepted;
    /// the input is edge-padded to the trunk's multiple and the outputs are cropped
    /// back (gate map `n` to `ceil(H / 2^(n-1)) x ceil(W / 2^(n-1))`).
    pub fn forward(&self, batch: &Tensor) -> Result<RestorationOutput> {
        self.check_input(batch)?;
        let p = &self.params;
        let (x, original) = pad_to_multiple(batch, self.config.size_multiple())?;
        let mut f = self.arch.head.forward(p, &x);
        let mut skips = Vec::with_capacity(self.arch.encoder.len());
        for (stage, down) in &self.arch.encoder {
            f = stage.forward(p, f);
            let next = down.forward(p, &f);
            skips.push(f);
            f = next;
        }
        f = self.arch.bottleneck.forward(p, f);
        let mut maps = vec![Tensor::zeros([0, 0, 0, 0]); self.arch.decoder.len()];
        for (level, dec) in self.arch.decoder.iter().enumerate().rev() {
            let up = dec.up.forward(p, &f);
            let skip = skips.pop().expect("one skip per level");
            let (merged, gamma) = dec.attention.forward(p, &skip, &up, self.gate_override)?;
            maps[level] = gamma;
            f = dec.stage.forward(p, merged);
        }
        let mut out = self.arch.tail.forward(p, &f);
        if self.config.global_input_residual {
            out.add_assign(&x);
        }
        let restored = crop_back(&out, original)?;
        let maps = maps
            .into_iter()
            .enumerate()
            .map(|(level, m)| {
                let h = original.0.div_ceil(1 << level);
                let w = original.1.div_ceil(1 << level);
                m.crop(h, w)
            })
            .collect();
        Ok(RestorationOutput {
            restored,
            attention: AttentionMapSet { maps },
        })
    }

    /// Training forward pass: returns the (unclamped) restoration cropped to the
    /// input size together with the trace needed by [`Model::backward`].
    pub fn forward_trace(&self, batch: &Tensor) -> Result<(Tensor, ForwardTrace)> {
        self.check_input(batch)?;
        let p = &self.params;
        let (x, original) = pad_to_multiple(batch, self.config.size_multiple())?;
        let head_in = x.clone();
        let mut f = self.arch.head.forward(p, &head_in);
        let mut skips = Vec::new();
        let mut enc_traces = Vec::new();
        for (stage, down) in &self.arch.encoder {
            let (y, tr) = stage.forward_trace(p, f);
            f = down.forward(p, &y);
            skips.push(y.clone());
            enc_traces.push((tr, y));
        }
        let (y, bottleneck) = self.arch.bottleneck.forward_trace(p, f);
        f = y;
        let mut dec_traces: Vec<Option<(Tensor, AttentionTrace, Vec<ResTrace>)>> =
            (0..self.arch.decoder.len()).map(|_| None).collect();
        for (level, dec) in self.arch.decoder.iter().enumerate().rev() {
            let up_in = f;
            let up = dec.up.forward(p, &up_in);
            let skip = skips.pop().expect("one skip per level");
            let (merged, at) = dec.attention.forward_trace(p, skip, up, self.gate_override)?;
            let (y, st) = dec.stage.forward_trace(p, merged);
            dec_traces[level] = Some((up_in, at, st));
            f = y;
        }
        let mut out = self.arch.tail.forward(p, &f);
        if self.config.global_input_residual {
            out.add_assign(&x);
        }
        let restored = crop_back(&out, original)?;
        Ok((
            restored,
            ForwardTrace {
                input_padded: x,
                original,
                head_in,
                encoder: enc_traces,
                bottleneck,
                decoder: dec_traces.into_iter().map(|t| t.expect("every level traced")).collect(),
                tail_in: f,
            },
        ))
    }

    /// Accumulates d(loss)/d(parameters) into `grads` given d(loss)/d(restored).
    pub fn backward(&self, trace: &ForwardTrace, d_restored: &Tensor, grads: &mut ParameterSet) {
        let p = &self.params;
        let [_, _, ph, pw] = trace.input_padded.shape();
        debug_assert_eq!((d_restored.height(), d_restored.width()), trace.original);
        let d_out = d_restored.zero_extend(ph, pw);
        let mut df = self
            .arch
            .tail
            .backward(p, &trace.tail_in, &d_out, grads, true)
            .expect("input grad requested");
        let mut d_skips: Vec<Option<Tensor>> = (0..self.arch.decoder.len()).map(|_| None).collect();
        for (level, dec) in self.arch.decoder.iter().enumerate() {
            let (up_in, at, st) = &trace.decoder[level];
            let d_merged = dec.stage.backward(p, st, df, grads);
            let (d_skip, d_up) = dec.attention.backward(p, at, &d_merged, grads);
            d_skips[level] = Some(d_skip);
            df = dec.up.backward(p, up_in, &d_up, grads);
        }
        df = self.arch.bottleneck.backward(p, &trace.bottleneck, df, grads);
        for (level, (stage, down)) in self.arch.encoder.iter().enumerate().rev() {
            let (tr, y) = &trace.encoder[level];
            let mut dy = down.backward(p, y, &df, grads, true).expect("input grad requested");
            dy.add_assign(d_skips[level].as_ref().expect("skip gradient"));
            df = stage.backward(p, tr, dy, grads);
        }
        self.arch.head.backward(p, &trace.head_in, &df, grads, false);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            input_channels: 3,
            base_channels: 4,
            num_scales: 3,
            res_blocks_per_stage: 1,
            attention_channels: 3,
            attention_depth: 2,
            global_input_residual: true,
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            ModelConfig { num_scales: 1, ..Default::default() },
            ModelConfig { base_channels: 0, ..Default::default() },
            ModelConfig { res_blocks_per_stage: 0, ..Default::default() },
        ] {
            assert!(matches!(Model::build(cfg, 0), Err(Error::Config(_))));
        }
    }

    #[test]
    fn pad_and_crop_sizes() {
        let t = Tensor::zeros([1, 3, 33, 47]);
        let (p, orig) = pad_to_multiple(&t, 8).unwrap();
        assert_eq!((p.height(), p.width()), (40, 48));
        assert_eq!(orig, (33, 47));
        assert_eq!(crop_back(&p, orig).unwrap().shape(), [1, 3, 33, 47]);
        let t = Tensor::zeros([1, 3, 96, 96]);
        let (p, _) = pad_to_multiple(&t, 8).unwrap();
        assert_eq!(p, t);
        let t = Tensor::zeros([1, 3, 481, 321]);
        let (p, _) = pad_to_multiple(&t, 8).unwrap();
        assert_eq!((p.height(), p.width()), (488, 328));
        assert!(pad_to_multiple(&t, 0).is_err());
    }

    #[test]
    fn from_parameters_rejects_wrong_layout() {
        let m = Model::build(tiny_config(), 1).unwrap();
        let other = ModelConfig { base_channels: 5, ..tiny_config() };
        let err = Model::from_parameters(other, m.parameters().clone()).unwrap_err();
        match err {
            Error::ShapeMismatch { name, .. } => assert_eq!(name, "head.conv0.weight"),
            e => panic!("unexpected {e}"),
        }
        let again = Model::from_parameters(tiny_config(), m.parameters().clone()).unwrap();
        assert!(again.parameters().bitwise_eq(m.parameters()));
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let m = Model::build(tiny_config(), 1).unwrap();
        let mut x = Tensor::full([1, 3, 16, 16], 0.5);
        x.set(0, 1, 3, 3, f32::NAN);
        assert!(matches!(m.forward(&x), Err(Error::Input(_))));
    }

    #[test]
    fn zeroed_output_layer_is_identity() {
        let mut m = Model::build(tiny_config(), 2).unwrap();
        m.zero_output_layer();
        let x = Tensor::from_fn([2, 3, 13, 19], |b, c, y, x| ((b + c * 3 + y * 7 + x) % 11) as f32 / 10.0);
        let out = m.forward(&x).unwrap();
        assert_eq!(out.restored, x);
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let conv = |k: usize, i: usize, o: usize| k * k * i * o + o;
        let up = |i: usize, o: usize| 4 * i * o + o;
        for cfg in [tiny_config(), ModelConfig::default()] {
            let (b, s, r, a, d, ch) = (
                cfg.base_channels,
                cfg.num_scales,
                cfg.res_blocks_per_stage,
                cfg.attention_channels,
                cfg.attention_depth,
                cfg.input_channels,
            );
            let c = |i: usize| b << i;
            let res = |i: usize| r * 2 * conv(3, c(i), c(i));
            let att = |i: usize| conv(1, 2 * c(i), a) + d * conv(3, a, a) + d * up(a, a) + conv(3, a, 1);
            let mut expected = conv(3, ch, c(0)) + conv(3, c(0), ch) + res(s - 1);
            for i in 0..s - 1 {
                expected += res(i) + conv(3, c(i), c(i + 1));
                expected += up(c(i + 1), c(i)) + att(i) + res(i);
            }
            let m = Model::build(cfg, 0).unwrap();
            assert_eq!(m.param_count(), expected);
            assert_eq!(m.arch.param_count(), expected);
        }
    }

    #[test]
    fn parameter_names_follow_scheme() {
        let m = Model::build(tiny_config(), 0).unwrap();
        let names: Vec<&str> = m.parameters().iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names[0], "head.conv0.weight");
        assert!(names.contains(&"encoder.stage0.block0.conv1.bias"));
        assert!(names.contains(&"bottleneck.stage2.block0.conv0.weight"));
        assert!(names.contains(&"decoder.stage1.attention.down1.weight"));
        assert!(names.contains(&"decoder.stage0.up.weight"));
        assert_eq!(*names.last().unwrap(), "tail.conv0.bias");
    }
}
