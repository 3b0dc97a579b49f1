//! Synthetic data, two-phase training, checkpoints and evaluation.

mod checkpoint;
mod config;
mod evaluate;
mod model;
mod synth;
mod train;

pub use checkpoint::{Manifest, ParamEntry, TrainedModel, FORMAT_VERSION};
pub use config::{AfsConfig, Phase, PhaseConfig, TrainConfig};
pub use evaluate::{evaluate_records, score_predictions, Evaluation, Prediction};
pub use model::{CaptionModel, SampleLoss, HEAD_PREFIX};
pub use synth::{
    generate_synthetic_dataset, plan_dataset, render_video, Color, Motion, Shape, SyntheticSpec,
    VideoPlan, MAX_TEMPLATES,
};
pub use train::{
    batch_loss, clip_gradients, harmonic_mean, select_best, train, BatchLoss, EvalPoint, Sample,
    StepLog, Trainer, TrainingData,
};
