//! Evaluation metrics: image fidelity, gate-map pooling and correlation statistics.

mod correlation;
mod fidelity;
mod pooling;

pub use correlation::{average_ranks, kendall, pearson, spearman, CorrelationReport, Logistic4};
pub use fidelity::{
    blocking_effect_factor, mse, psnr, psnr_b, psnr_mode, ssim_eval, to_luma, ChannelMode,
};
pub use pooling::{minkowski_pool, PoolingSpec, QualityEstimate};

/// Pairwise (cascade) summation with a fixed split order, so that aggregates are
/// reproducible regardless of how the inputs were produced.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        n if n <= 8 => values.iter().sum(),
        n => {
            let (a, b) = values.split_at(n / 2);
            pairwise_sum(a) + pairwise_sum(b)
        }
    }
}

/// Mean via [`pairwise_sum`]; `NaN` for an empty slice.
pub fn pairwise_mean(values: &[f64]) -> f64 {
    pairwise_sum(values) / values.len() as f64
}
