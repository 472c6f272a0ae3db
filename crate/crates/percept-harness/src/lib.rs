//! Training harness for the perception stack: stage presets and schedules,
//! dataset mixing, the two-stage optimization loop with frozen-component
//! contracts, binary checkpoints with exact resume, greedy inference with
//! panoptic assembly, and dataset-level evaluation.
//!
//! Everything is deterministic given the seeds: random state lives in three
//! named ChaCha streams (mix sampling, data/curation picks, denoising noise)
//! whose positions are checkpointed alongside parameters and optimizer
//! moments.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod overlay;
pub mod sampler;
pub mod trainer;

pub use checkpoint::{Checkpoint, CheckpointError, RngStreams};
pub use config::{make_stage_configs, ConfigError, Scale, Schedule, Source, StageConfig, TrainableSet};
pub use data::{
    build_corpus, prompt_labels, stage1_sample, stage2_sample, target_instances, CaptionSample,
    Corpus, Split, TrainSample, LABEL_BUDGET, STAGE1_TASK_DESCRIPTION,
};
pub use eval::{evaluate, infer_sentence, infer_word, EvalReport, InferOptions, SentenceInference, WordInference};
pub use sampler::MixSampler;
pub use trainer::{EncodingCache, RunState, TrainJob};

use std::path::PathBuf;
use thiserror::Error;

/// Top-level error for harness operations; wraps every layer below.
#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] percept_model::ModelError),
    #[error(transparent)]
    Tokenize(#[from] percept_model::tokenizer::TokenizeError),
    #[error(transparent)]
    Objective(#[from] percept_objective::ObjectiveError),
    #[error(transparent)]
    Curation(#[from] percept_curation::CurationError),
    #[error(transparent)]
    Synth(#[from] percept_metrics::SynthError),
    #[error(transparent)]
    Metric(#[from] percept_metrics::MetricError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Mask(#[from] percept_core::MaskError),
    #[error(transparent)]
    Geometry(#[from] percept_core::GeometryError),
    #[error(transparent)]
    Annotation(#[from] percept_core::AnnotationError),
    #[error(transparent)]
    Image(#[from] percept_core::ImageError),
    #[error("dataset has no {0}")]
    EmptyDataset(&'static str),
    #[error("target phrase {phrase:?} is not among the instruction labels")]
    LabelNotListed { phrase: String },
    #[error("stage {stage} cannot draw training data from source {source}")]
    BadSource { stage: u8, source: Source },
    #[error(
        "training diverged at step {step} (loss {loss}); last good state: {}",
        checkpoint.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "not saved (no output directory)".into())
    )]
    Diverged { step: usize, loss: f64, checkpoint: Option<PathBuf> },
    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
}

impl HarnessError {
    pub(crate) fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> Self {
        let context = context.into();
        move |source| Self::Io { context, source }
    }
}
