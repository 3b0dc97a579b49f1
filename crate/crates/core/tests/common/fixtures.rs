//! Small configurations that train in seconds.

use vidcap::afs::Metric;
use vidcap::decoder::DecoderConfig;
use vidcap::encoder::EncoderConfig;
use vidcap::harness::{AfsConfig, Phase, PhaseConfig, SyntheticSpec, TrainConfig};
use vidcap::text::Split;

pub fn tiny_config(pretrain: usize, end_to_end: usize) -> TrainConfig {
    let encoder = EncoderConfig {
        depths: vec![1, 1],
        heads: vec![1, 2],
        embed_dim: 8,
        token_dim: 16,
        concept_hidden: [16, 16],
        concept_count: 6,
        ..EncoderConfig::desk()
    };
    let decoder = DecoderConfig {
        hidden: 16,
        layers: 1,
        heads: 2,
        ffn: 32,
        dropout: 0.0,
        ..DecoderConfig::desk(0)
    };
    TrainConfig {
        encoder,
        decoder,
        batch_size: 4,
        phases: vec![
            PhaseConfig {
                phase: Phase::SemanticPretrain,
                steps: pretrain,
                head_dropout: 0.0,
            },
            PhaseConfig {
                phase: Phase::EndToEnd,
                steps: end_to_end,
                head_dropout: 0.0,
            },
        ],
        afs: AfsConfig {
            frames: 8,
            metric: Metric::Mad,
            dedupe: false,
        },
        eval_split: Split::Val,
        ..TrainConfig::desk()
    }
}

pub fn tiny_spec(videos: usize, seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        videos,
        frames: 12,
        templates: 2,
        seed,
        val: 2,
        test: 1,
        ..SyntheticSpec::default()
    }
}
