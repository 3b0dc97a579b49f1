//! Concept-conditioned caption decoder and caption generation.

mod config;
mod generate;
mod model;

pub use config::DecoderConfig;
pub use generate::{
    argmax, generate, generate_beam, generate_sample, log_softmax, sample_token, DecoderScorer,
    GenerationRequest, Hypothesis, StepScorer, Strategy,
};
pub use model::{CaptionDecoder, DecoderLayer};
