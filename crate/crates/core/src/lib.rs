//! RaFormer: a redundancy-aware transformer for video question answering,
//! built on a small reverse-mode autodiff engine over `f64` tensors.
//!
//! Start with [`RunConfig`] and [`train::train`], or see the `examples/`
//! directory for each component in isolation.

pub mod attention;
pub mod autodiff;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod fuser;
pub mod layers;
pub mod model;
pub mod params;
pub mod synthetic;
pub mod tensor;
pub mod text;
pub mod train;

pub use attention::{AttentionConfig, AttentionMask, MultiHeadAttention};
pub use autodiff::{Tape, Var};
pub use config::RunConfig;
pub use decoder::TaskMode;
pub use encoder::{EncoderConfig, EncoderVariant, VideoEncoder, VideoFeatures};
pub use error::{Error, Result};
pub use fuser::{SampleSelection, SamplerMode};
pub use model::{ModelConfig, RaFormer};
pub use params::{Adam, Graph, ParamStore};
pub use synthetic::{Dataset, SyntheticConfig, SyntheticSample};
pub use tensor::Tensor;
pub use train::{Ablation, EvalMetrics, TrainOutcome};
