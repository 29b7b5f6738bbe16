//! Attention-gated residual U-Net for JPEG artifact removal, whose gates double
//! as no-reference quality maps, with training and evaluation tooling.

pub mod bench;
pub mod dataio;
pub mod error;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{AttentionMapSet, Model, ModelConfig, RestorationOutput};
pub use tensor::Tensor;
