use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Caption decoder sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    /// Hidden width `D`; must match the encoder token width.
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    /// Output vocabulary size. Zero in a training config means "take it from
    /// the vocabulary built on the training split".
    #[serde(default)]
    pub vocab_size: usize,
    pub max_positions: usize,
    pub dropout: f64,
    pub ln_eps: f64,
    /// Learned `K -> D` map for the concept vector. Required when `K != D`.
    pub adapter: bool,
}

impl DecoderConfig {
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            hidden: 32,
            layers: 2,
            heads: 4,
            ffn: 128,
            vocab_size,
            max_positions: 32,
            dropout: 0.3,
            ln_eps: 1e-12,
            adapter: true,
        }
    }

    /// BERT-base sizes with the concept vector fed in directly (`K = D = 768`).
    pub fn full_scale(vocab_size: usize) -> Self {
        Self {
            hidden: 768,
            layers: 12,
            heads: 12,
            ffn: 3072,
            vocab_size,
            max_positions: 512,
            dropout: 0.3,
            ln_eps: 1e-12,
            adapter: false,
        }
    }

    pub fn validate(&self, concepts: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return bad(format!(
                "hidden width {} not divisible by {} heads",
                self.hidden, self.heads
            ));
        }
        if self.layers == 0 || self.ffn == 0 || self.vocab_size == 0 {
            return bad("layers, ffn and vocab_size must be positive".into());
        }
        if self.max_positions < 2 {
            return bad(format!(
                "max_positions {} leaves no room for words",
                self.max_positions
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.ln_eps.is_nan() || self.ln_eps <= 0.0 {
            return bad("ln_eps must be positive".into());
        }
        if concepts != self.hidden && !self.adapter {
            return bad(format!(
                "{concepts} concepts but hidden width {} and no adapter",
                self.hidden
            ));
        }
        Ok(())
    }
}
