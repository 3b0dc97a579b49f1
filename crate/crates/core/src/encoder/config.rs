use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Shape and width schedule of the video encoder and concept head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Input channels.
    pub channels: usize,
    /// Patch extent `(t, h, w)`.
    pub patch: [usize; 3],
    /// Attention window extent `(t, h, w)` in tokens.
    pub window: [usize; 3],
    /// Blocks per stage; blocks alternate plain/shifted windows.
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub embed_dim: usize,
    /// Width of the output tokens (the decoder hidden width).
    pub token_dim: usize,
    pub mlp_ratio: usize,
    pub rel_bias: bool,
    pub ln_eps: f64,
    /// Concept head: per-token width and post-pool hidden width.
    pub concept_hidden: [usize; 2],
    pub concept_count: usize,
}

impl EncoderConfig {
    /// Small preset that exercises windows, shifts, merging and pooling.
    pub fn desk() -> Self {
        Self {
            channels: 3,
            patch: [2, 4, 4],
            window: [2, 2, 2],
            depths: vec![2, 2],
            heads: vec![2, 4],
            embed_dim: 16,
            token_dim: 32,
            mlp_ratio: 4,
            rel_bias: true,
            ln_eps: 1e-5,
            concept_hidden: [32, 64],
            concept_count: 16,
        }
    }

    /// Swin-B reference sizes. Constructible, not meant for CPU training.
    pub fn full_scale() -> Self {
        Self {
            channels: 3,
            patch: [2, 4, 4],
            window: [8, 7, 7],
            depths: vec![2, 2, 18, 2],
            heads: vec![4, 8, 16, 32],
            embed_dim: 128,
            token_dim: 768,
            mlp_ratio: 4,
            rel_bias: true,
            ln_eps: 1e-5,
            concept_hidden: [1024, 2048],
            concept_count: 768,
        }
    }

    /// Channel width at stage `s`.
    pub fn stage_width(&self, s: usize) -> usize {
        self.embed_dim << s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch.contains(&0) || self.window.contains(&0) {
            return bad("patch and window extents must be positive".into());
        }
        if self.depths.is_empty() || self.depths.contains(&0) {
            return bad(format!(
                "every stage depth must be >= 1, got {:?}",
                self.depths
            ));
        }
        if self.heads.len() != self.depths.len() {
            return bad(format!(
                "{} head counts for {} stages",
                self.heads.len(),
                self.depths.len()
            ));
        }
        for (s, &h) in self.heads.iter().enumerate() {
            if h == 0 || !self.stage_width(s).is_multiple_of(h) {
                return bad(format!(
                    "stage {s} width {} not divisible by {h} heads",
                    self.stage_width(s)
                ));
            }
        }
        if self.embed_dim == 0 || self.token_dim == 0 || self.channels == 0 || self.mlp_ratio == 0 {
            return bad("widths must be positive".into());
        }
        if self.concept_count == 0 || self.concept_hidden.contains(&0) {
            return bad("concept head sizes must be positive".into());
        }
        if self.ln_eps.is_nan() || self.ln_eps <= 0.0 {
            return bad("ln_eps must be positive".into());
        }
        Ok(())
    }
}
