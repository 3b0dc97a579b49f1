use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::afs::Metric;
use crate::decoder::{DecoderConfig, GenerationRequest};
use crate::encoder::EncoderConfig;
use crate::text::Split;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Only the concept head learns, from the BCE term alone.
    SemanticPretrain,
    /// Every parameter learns from `CE + λ·BCE`.
    EndToEnd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    pub phase: Phase,
    pub steps: usize,
    /// Dropout inside the concept head during this phase.
    pub head_dropout: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AfsConfig {
    pub frames: usize,
    pub metric: Metric,
    pub dedupe: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    /// Weight of the BCE term.
    pub lambda: f64,
    pub lr: f64,
    pub weight_decay: f64,
    /// (video, sampled caption) pairs per step.
    pub batch_size: usize,
    /// Global gradient-norm ceiling.
    pub grad_clip: f64,
    pub seed: u64,
    pub phases: Vec<PhaseConfig>,
    pub afs: AfsConfig,
    /// Captions are truncated to this many words.
    pub max_caption_len: usize,
    pub min_freq: usize,
    /// Steps between evaluations during `end_to_end`; 0 evaluates only at
    /// the end.
    pub eval_every: usize,
    pub eval_split: Split,
    pub decode: GenerationRequest,
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            encoder: EncoderConfig::desk(),
            decoder: DecoderConfig::desk(0),
            lambda: 0.1,
            lr: 1e-3,
            weight_decay: 0.01,
            batch_size: 8,
            grad_clip: 0.05,
            seed: 0,
            phases: vec![
                PhaseConfig {
                    phase: Phase::SemanticPretrain,
                    steps: 300,
                    head_dropout: 0.5,
                },
                PhaseConfig {
                    phase: Phase::EndToEnd,
                    steps: 1500,
                    head_dropout: 0.1,
                },
            ],
            afs: AfsConfig {
                frames: 8,
                metric: Metric::Mad,
                dedupe: false,
            },
            max_caption_len: 20,
            min_freq: 1,
            eval_every: 0,
            eval_split: Split::Val,
            decode: GenerationRequest::default(),
        }
    }

    /// Memorization preset for a 16-video single-template corpus.
    pub fn overfit() -> Self {
        let mut c = Self::desk();
        c.encoder.concept_count = 8;
        c.decoder.dropout = 0.0;
        c.phases = vec![
            PhaseConfig {
                phase: Phase::SemanticPretrain,
                steps: 400,
                head_dropout: 0.0,
            },
            PhaseConfig {
                phase: Phase::EndToEnd,
                steps: 800,
                head_dropout: 0.0,
            },
        ];
        c.eval_split = Split::Train;
        c
    }

    /// Full-size reference sizes and the fine-tuning learning rate.
    pub fn full_scale() -> Self {
        Self {
            encoder: EncoderConfig::full_scale(),
            decoder: DecoderConfig::full_scale(0),
            lr: 1e-5,
            ..Self::desk()
        }
    }

    pub fn total_steps(&self) -> usize {
        self.phases.iter().map(|p| p.steps).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.encoder.validate()?;
        if self.encoder.token_dim != self.decoder.hidden {
            return bad(format!(
                "encoder token width {} differs from decoder hidden width {}",
                self.encoder.token_dim, self.decoder.hidden
            ));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !self.grad_clip.is_finite() || self.grad_clip <= 0.0 {
            return bad(format!("grad_clip must be > 0, got {}", self.grad_clip));
        }
        if self.lr.is_nan()
            || self.lr <= 0.0
            || self.weight_decay.is_nan()
            || self.weight_decay < 0.0
        {
            return bad("lr must be > 0 and weight_decay >= 0".into());
        }
        if self.batch_size == 0 || self.afs.frames == 0 || self.max_caption_len == 0 {
            return bad("batch_size, afs.frames and max_caption_len must be >= 1".into());
        }
        if self.max_caption_len + 2 > self.decoder.max_positions {
            return bad(format!(
                "max_caption_len {} does not fit {} decoder positions",
                self.max_caption_len, self.decoder.max_positions
            ));
        }
        if self.phases.is_empty() {
            return bad("at least one phase is required".into());
        }
        let order: Vec<Phase> = self.phases.iter().map(|p| p.phase).collect();
        if !matches!(
            order.as_slice(),
            [_] | [Phase::SemanticPretrain, Phase::EndToEnd]
        ) {
            return bad(format!(
                "phases must be semantic_pretrain then end_to_end, got {order:?}"
            ));
        }
        for p in &self.phases {
            if !(0.0..1.0).contains(&p.head_dropout) {
                return bad(format!("head_dropout {} outside [0, 1)", p.head_dropout));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let config: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }
}
