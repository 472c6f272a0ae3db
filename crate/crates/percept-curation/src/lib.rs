//! Dataset unification: converts labeled images into the chain-of-thought
//! supervised-finetuning format shared by the word-based and sentence-based
//! perception tasks, with pluggable auto-captioning and caption refinement.

pub mod caption;
pub mod io;
pub mod sample;

pub use caption::{
    refine_captions, request_captions, CaptionEntry, CaptionError, CaptionRecord, CaptionSource,
    HttpCaptioner, MockCaptioner, RefineConfig, BANNED_WORDS,
};
pub use io::{read_sft, write_sft, SftIoError};
pub use sample::{
    build_sentence_sample, build_word_sample, render_response, shuffle_and_sample, CurationError,
    SftSample, TaskKind, SENTENCE_TASK_DESCRIPTION, SUMMARY_TOKEN, WORD_TASK_DESCRIPTION,
};
