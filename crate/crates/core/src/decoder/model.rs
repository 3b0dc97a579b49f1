use rand::Rng;

use crate::attention::{self, causal_mask};
use crate::tensor::{Graph, LayerNorm, Linear, ParamId, ParamStore, Tensor, Var};
use crate::{Error, Result, Scalar};

use super::DecoderConfig;

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub norm_self: LayerNorm,
    pub self_qkv: Linear,
    pub self_out: Linear,
    pub norm_cross: LayerNorm,
    pub cross_q: Linear,
    pub cross_kv: Linear,
    pub cross_out: Linear,
    pub norm_ffn: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl DecoderLayer {
    fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &DecoderConfig,
        rng: &mut R,
    ) -> Self {
        let d = cfg.hidden;
        let eps = cfg.ln_eps;
        Self {
            norm_self: LayerNorm::new(store, &format!("{name}.norm_self"), d, eps),
            self_qkv: Linear::new(store, &format!("{name}.self_qkv"), d, 3 * d, true, rng),
            self_out: Linear::new(store, &format!("{name}.self_out"), d, d, true, rng),
            norm_cross: LayerNorm::new(store, &format!("{name}.norm_cross"), d, eps),
            cross_q: Linear::new(store, &format!("{name}.cross_q"), d, d, true, rng),
            cross_kv: Linear::new(store, &format!("{name}.cross_kv"), d, 2 * d, true, rng),
            cross_out: Linear::new(store, &format!("{name}.cross_out"), d, d, true, rng),
            norm_ffn: LayerNorm::new(store, &format!("{name}.norm_ffn"), d, eps),
            fc1: Linear::new(store, &format!("{name}.fc1"), d, cfg.ffn, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), cfg.ffn, d, true, rng),
        }
    }

    fn forward<T: Scalar>(
        &self,
        g: &Graph<'_, T>,
        x: Var,
        memory: Var,
        mask: Var,
        cfg: &DecoderConfig,
    ) -> Result<Var> {
        let d = cfg.hidden;
        let h = self.norm_self.forward(g, x)?;
        let qkv = self.self_qkv.forward(g, h);
        let (q, k, v) = (
            g.tape.narrow(qkv, 1, 0, d),
            g.tape.narrow(qkv, 1, d, d),
            g.tape.narrow(qkv, 1, 2 * d, d),
        );
        let a = attention::multi_head(g, q, k, v, cfg.heads, None, Some(mask), 0.0)?;
        let x = g
            .tape
            .add(x, g.dropout(self.self_out.forward(g, a), cfg.dropout));

        let h = self.norm_cross.forward(g, x)?;
        let q = self.cross_q.forward(g, h);
        let kv = self.cross_kv.forward(g, memory);
        let (k, v) = (g.tape.narrow(kv, 1, 0, d), g.tape.narrow(kv, 1, d, d));
        let a = attention::multi_head(g, q, k, v, cfg.heads, None, None, 0.0)?;
        let x = g
            .tape
            .add(x, g.dropout(self.cross_out.forward(g, a), cfg.dropout));

        let h = self.norm_ffn.forward(g, x)?;
        let h = self.fc2.forward(g, g.tape.gelu(self.fc1.forward(g, h)));
        Ok(g.tape.add(x, g.dropout(h, cfg.dropout)))
    }
}

/// Causal transformer decoder whose first position is the concept vector.
#[derive(Clone, Debug)]
pub struct CaptionDecoder {
    pub config: DecoderConfig,
    pub concepts: usize,
    pub token_embed: ParamId,
    pub pos_embed: ParamId,
    pub adapter: Option<Linear>,
    pub layers: Vec<DecoderLayer>,
    pub norm: LayerNorm,
    pub head: Linear,
}

impl CaptionDecoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        config: &DecoderConfig,
        concepts: usize,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate(concepts)?;
        let d = config.hidden;
        let token_embed = store.add(
            "decoder.token_embed",
            Tensor::randn(vec![config.vocab_size, d], 0.02, rng),
        );
        let pos_embed = store.add(
            "decoder.pos_embed",
            Tensor::randn(vec![config.max_positions, d], 0.02, rng),
        );
        let adapter = config
            .adapter
            .then(|| Linear::new(store, "decoder.adapter", concepts, d, true, rng));
        let layers = (0..config.layers)
            .map(|l| DecoderLayer::new(store, &format!("decoder.layer{l}"), config, rng))
            .collect();
        let norm = LayerNorm::new(store, "decoder.norm", d, config.ln_eps);
        let head = Linear::new(store, "decoder.head", d, config.vocab_size, true, rng);
        Ok(Self {
            config: config.clone(),
            concepts,
            token_embed,
            pos_embed,
            adapter,
            layers,
            norm,
            head,
        })
    }

    /// Input states `[1 + tokens.len(), D]`: the (adapted) concept vector at
    /// position 0, token embeddings after it, plus positional embeddings.
    pub fn embed<T: Scalar>(
        &self,
        g: &Graph<'_, T>,
        semantic: Var,
        tokens: &[usize],
    ) -> Result<Var> {
        let len = tokens.len() + 1;
        if len > self.config.max_positions {
            return Err(Error::Shape(format!(
                "sequence of {len} positions, limit {}",
                self.config.max_positions
            )));
        }
        let shape = g.tape.shape(semantic);
        if shape.iter().product::<usize>() != self.concepts {
            return Err(Error::Shape(format!(
                "concept vector {shape:?}, expected {} entries",
                self.concepts
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::TargetOutOfRange {
                target: bad,
                vocab: self.config.vocab_size,
            });
        }
        let s = g.tape.reshape(semantic, &[1, self.concepts]);
        let first = match &self.adapter {
            Some(a) => a.forward(g, s),
            None => s,
        };
        let rows = if tokens.is_empty() {
            first
        } else {
            let words = g.tape.gather_rows(g.param(self.token_embed), tokens);
            g.tape.concat(&[first, words], 0)
        };
        let positions: Vec<usize> = (0..len).collect();
        let pos = g.tape.gather_rows(g.param(self.pos_embed), &positions);
        Ok(g.dropout(g.tape.add(rows, pos), self.config.dropout))
    }

    /// Next-token logits `[1 + tokens.len(), V]`; row `i` predicts token `i`.
    pub fn forward<T: Scalar>(
        &self,
        g: &Graph<'_, T>,
        semantic: Var,
        tokens: &[usize],
        memory: Var,
    ) -> Result<Var> {
        let mem_shape = g.tape.shape(memory);
        if mem_shape.len() != 2 || mem_shape[0] == 0 || mem_shape[1] != self.config.hidden {
            return Err(Error::Shape(format!(
                "encoder tokens {mem_shape:?}, expected [n > 0, {}]",
                self.config.hidden
            )));
        }
        let mut x = self.embed(g, semantic, tokens)?;
        let mask = g.constant(causal_mask(tokens.len() + 1));
        for layer in &self.layers {
            x = layer.forward(g, x, memory, mask, &self.config)?;
        }
        let x = self.norm.forward(g, x)?;
        Ok(self.head.forward(g, x))
    }
}
