//! Differentiable perception stack: a convolutional feature pyramid, a
//! connector into a small causal language model, dynamic query selection
//! driven by the model's summary token, and a deformable set-prediction
//! decoder with shared similarity/box/mask heads plus denoising queries.
//!
//! Everything runs on a scalar `f64` tape (see `percept_autograd`), so all
//! forward passes here build graph nodes and stay differentiable end to end.

pub mod attention;
pub mod config;
pub mod decoder;
pub mod denoising;
pub mod encoder;
pub mod lm;
pub mod model;
pub mod queries;
pub mod tokenizer;

pub use config::ModelConfig;
pub use decoder::{DecodePhase, LayerPrediction, PredictionSet};
pub use denoising::{DenoisingBatch, DenoisingConfig};
pub use encoder::EncodedImage;
pub use lm::{Granularity, LmOutput};
pub use model::{Model, ModelError};
pub use queries::{QueryProvenance, QuerySet};
pub use tokenizer::{build_prompt, TokenSequence, Tokenizer, SUMMARY_TOKEN_TEXT};
