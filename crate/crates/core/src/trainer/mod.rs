//! Adam training with step-decayed learning rate, checkpoints and resumable runs.

mod checkpoint;
mod fit;

use serde::{Deserialize, Serialize};

pub use checkpoint::{
    load_checkpoint, load_model, load_model_with_config, save_checkpoint, CheckpointMeta, FORMAT_VERSION,
};
pub use fit::{fit, FitSummary, LoggingConfig, RunConfig, RunDataConfig, Trainer, ValRecord};

use crate::error::{Error, Result};
use crate::model::{Model, ParameterSet};
use crate::objective::{total_loss_with_grad, LossReport, SsimParams};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr0: f64,
    pub halving_period: u64,
    pub lr_floor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub total_steps: u64,
    /// Global gradient-norm limit; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr0: 2e-4,
            halving_period: 10_000,
            lr_floor: 1.25e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            total_steps: 500_000,
            grad_clip: None,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_floor > 0.0 && self.lr0 >= self.lr_floor) {
            return Err(Error::Config(format!(
                "learning rates must satisfy lr0 >= lr_floor > 0 (got {} and {})",
                self.lr0, self.lr_floor
            )));
        }
        if self.halving_period == 0 {
            return Err(Error::Config("halving_period must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return Err(Error::Config("Adam betas must lie in [0, 1) and epsilon must be positive".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("grad_clip {c} must be positive")));
            }
        }
        Ok(())
    }
}

/// `max(lr0 * 0.5^floor(step / halving_period), lr_floor)`.
pub fn lr_at_step(step: u64, cfg: &OptimizerConfig) -> f64 {
    let halvings = step / cfg.halving_period.max(1);
    let decayed = if halvings >= 1100 {
        0.0
    } else {
        cfg.lr0 * 0.5f64.powi(halvings as i32)
    };
    decayed.max(cfg.lr_floor)
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug)]
pub struct TrainState {
    /// Completed optimisation steps; batch `step` is the next one drawn.
    pub step: u64,
    pub model: Model,
    pub first_moment: ParameterSet,
    pub second_moment: ParameterSet,
    /// Seed of the training data stream (batch `i` depends only on this and `i`).
    pub data_seed: u64,
    pub init_seed: u64,
    pub best_val_loss: Option<f64>,
}

impl TrainState {
    pub fn new(model: Model, init_seed: u64, data_seed: u64) -> Self {
        let zeros = model.parameters().zeros_like();
        TrainState {
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
            model,
            data_seed,
            init_seed,
            best_val_loss: None,
        }
    }

    /// Bitwise equality of step, seeds, parameters and moments.
    pub fn bitwise_eq(&self, other: &TrainState) -> bool {
        self.step == other.step
            && self.data_seed == other.data_seed
            && self.init_seed == other.init_seed
            && self.best_val_loss.map(f64::to_bits) == other.best_val_loss.map(f64::to_bits)
            && self.model.config() == other.model.config()
            && self.model.parameters().bitwise_eq(other.model.parameters())
            && self.first_moment.bitwise_eq(&other.first_moment)
            && self.second_moment.bitwise_eq(&other.second_moment)
    }
}

fn global_norm(grads: &ParameterSet) -> f64 {
    grads
        .iter()
        .flat_map(|p| p.data.iter())
        .map(|&g| (g as f64) * (g as f64))
        .sum::<f64>()
        .sqrt()
}

/// Computes the loss gradient for one batch and applies one Adam update at
/// `lr_at_step(state.step)`. `batch_label` identifies the batch in diagnostics.
pub fn train_step(
    state: &mut TrainState,
    opt: &OptimizerConfig,
    loss: &SsimParams,
    input: &Tensor,
    target: &Tensor,
    batch_label: &str,
) -> Result<LossReport> {
    input.ensure_same_shape(target, "training target")?;
    let lr = lr_at_step(state.step, opt);
    let non_finite = |state: &TrainState| Error::NonFiniteLoss {
        step: state.step,
        lr,
        batch: batch_label.to_string(),
    };
    let (pred, trace) = state.model.forward_trace(input)?;
    let (report, d_pred) = total_loss_with_grad(&pred, target, loss)?;
    if !report.is_finite() {
        return Err(non_finite(state));
    }
    let mut grads = state.model.parameters().zeros_like();
    state.model.backward(&trace, &d_pred, &mut grads);
    let mut scale = 1.0f32;
    if let Some(limit) = opt.grad_clip {
        let norm = global_norm(&grads);
        if !norm.is_finite() {
            return Err(non_finite(state));
        }
        if norm > limit {
            scale = (limit / norm) as f32;
        }
    }

    let t = (state.step + 1) as i32;
    let (b1, b2) = (opt.beta1 as f32, opt.beta2 as f32);
    let bc1 = (1.0 - opt.beta1.powi(t)) as f32;
    let bc2 = (1.0 - opt.beta2.powi(t)) as f32;
    let (lr32, eps) = (lr as f32, opt.epsilon as f32);
    let params = state.model.parameters_mut().iter_mut();
    let moments = state.first_moment.iter_mut().zip(state.second_moment.iter_mut());
    for ((p, g), (m, v)) in params.zip(grads.iter()).zip(moments) {
        for i in 0..p.data.len() {
            let gi = g.data[i] * scale;
            m.data[i] = b1 * m.data[i] + (1.0 - b1) * gi;
            v.data[i] = b2 * v.data[i] + (1.0 - b2) * gi * gi;
            let m_hat = m.data[i] / bc1;
            let v_hat = v.data[i] / bc2;
            p.data[i] -= lr32 * m_hat / (v_hat.sqrt() + eps);
        }
    }
    if !state.model.parameters().iter().all(|p| p.data.iter().all(|v| v.is_finite())) {
        return Err(non_finite(state));
    }
    state.step += 1;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny() -> ModelConfig {
        ModelConfig {
            base_channels: 4,
            num_scales: 2,
            res_blocks_per_stage: 1,
            attention_channels: 2,
            attention_depth: 1,
            ..Default::default()
        }
    }

    fn batch() -> (Tensor, Tensor) {
        let target = Tensor::from_fn([2, 3, 16, 16], |n, c, y, x| {
            0.5 + 0.3 * (((x + 2 * y) as f32 * 0.4 + c as f32 + n as f32).sin())
        });
        let input = Tensor::from_fn([2, 3, 16, 16], |n, c, y, x| {
            let t = target.get(n, c, y, x);
            let q = if (x / 4 + y / 4) % 2 == 0 { 0.08 } else { -0.06 };
            t + q
        });
        (input, target)
    }

    #[test]
    fn schedule_examples() {
        let cfg = OptimizerConfig::default();
        assert_eq!(lr_at_step(0, &cfg), 2e-4);
        assert_eq!(lr_at_step(9_999, &cfg), 2e-4);
        assert_eq!(lr_at_step(10_000, &cfg), 1e-4);
        assert_eq!(lr_at_step(40_000, &cfg), 1.25e-5);
        assert_eq!(lr_at_step(u64::MAX, &cfg), 1.25e-5);
    }

    #[test]
    fn invalid_optimizer_configs() {
        let bad = OptimizerConfig { lr0: 1e-6, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = OptimizerConfig { halving_period: 0, ..Default::default() };
        assert!(bad.validate().is_err());
        assert!(OptimizerConfig::default().validate().is_ok());
    }

    #[test]
    fn step_counter_and_moment_shapes() {
        let model = Model::build(tiny(), 1).unwrap();
        let mut state = TrainState::new(model, 1, 2);
        let (x, y) = batch();
        let opt = OptimizerConfig::default();
        train_step(&mut state, &opt, &SsimParams::default(), &x, &y, "b0").unwrap();
        assert_eq!(state.step, 1);
        state.model.parameters().check_layout(&state.first_moment).unwrap();
        state.model.parameters().check_layout(&state.second_moment).unwrap();
    }

    #[test]
    fn identical_runs_are_bitwise_identical() {
        let (x, y) = batch();
        let opt = OptimizerConfig::default();
        let run = || {
            let mut s = TrainState::new(Model::build(tiny(), 4).unwrap(), 4, 0);
            for i in 0..3 {
                train_step(&mut s, &opt, &SsimParams::default(), &x, &y, &format!("b{i}")).unwrap();
            }
            s
        };
        assert!(run().bitwise_eq(&run()));
    }

    #[test]
    fn zero_gradient_batch_barely_moves_parameters() {
        let mut model = Model::build(tiny(), 5).unwrap().with_gate_override(Some(0.5)).unwrap();
        model.zero_output_layer();
        let before = model.parameters().clone();
        let mut state = TrainState::new(model, 5, 0);
        let (_, y) = batch();
        let opt = OptimizerConfig::default();
        train_step(&mut state, &opt, &SsimParams::default(), &y, &y, "identity").unwrap();
        let lr = lr_at_step(0, &opt) as f32;
        for (a, b) in before.iter().zip(state.model.parameters().iter()) {
            for (u, v) in a.data.iter().zip(&b.data) {
                assert!((u - v).abs() <= lr * 1.0001, "{}: moved {}", a.name, (u - v).abs());
            }
        }
    }

    #[test]
    fn overfits_one_batch() {
        let (x, y) = batch();
        let opt = OptimizerConfig { lr0: 1e-3, lr_floor: 1e-3, ..Default::default() };
        let mut state = TrainState::new(Model::build(tiny(), 7).unwrap(), 7, 0);
        let losses: Vec<f64> = (0..50)
            .map(|i| train_step(&mut state, &opt, &SsimParams { window_size: 7, ..Default::default() }, &x, &y, &i.to_string()).unwrap().total)
            .collect();
        let decreasing = losses.windows(2).filter(|w| w[1] < w[0]).count();
        assert!(decreasing as f64 >= 0.8 * 49.0, "{decreasing}/49 decreasing: {losses:?}");
    }

    #[test]
    fn non_finite_loss_aborts_with_diagnostics() {
        let mut state = TrainState::new(Model::build(tiny(), 1).unwrap(), 1, 0);
        let (x, mut y) = batch();
        y.data_mut()[0] = f32::NAN;
        let err = train_step(&mut state, &OptimizerConfig::default(), &SsimParams::default(), &x, &y, "bad-batch").unwrap_err();
        match err {
            Error::NonFiniteLoss { step, batch, .. } => {
                assert_eq!(step, 0);
                assert_eq!(batch, "bad-batch");
            }
            e => panic!("unexpected {e}"),
        }
        assert_eq!(state.step, 0);
    }
}
