//! Shifted-window 3D attention video encoder and the semantic concept head.

mod concept;
mod config;
mod grid;
mod window;

pub use concept::{ConceptHead, ConceptOutput};
pub use config::EncoderConfig;
pub use grid::{flatten_patches, PatchEmbed, PatchGrid, PatchMerge};
pub use window::{
    allowed_pairs, relative_index, shift_amounts, window_groups, SwinBlock, WindowAttention,
    WindowGroup,
};

use rand::Rng;

use crate::tensor::{Graph, LayerNorm, Linear, ParamStore, Var};
use crate::video::VideoClip;
use crate::{Result, Scalar};

#[derive(Clone, Debug)]
pub struct Stage {
    pub blocks: Vec<SwinBlock>,
    /// Merge applied after this stage's blocks (absent on the last stage).
    pub merge: Option<PatchMerge>,
}

/// `T'` visual tokens of width `D`, `[T', D]`.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    pub tokens: Var,
    pub count: usize,
    pub width: usize,
}

#[derive(Clone, Debug)]
pub struct VideoEncoder {
    pub config: EncoderConfig,
    pub embed: PatchEmbed,
    pub stages: Vec<Stage>,
    pub norm: LayerNorm,
    pub proj: Linear,
}

impl VideoEncoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        config: &EncoderConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let embed = PatchEmbed::new(
            store,
            "encoder.embed",
            config.patch,
            config.channels,
            config.embed_dim,
            rng,
        );
        let mut stages = Vec::with_capacity(config.depths.len());
        for (s, &depth) in config.depths.iter().enumerate() {
            let width = config.stage_width(s);
            let blocks = (0..depth)
                .map(|b| {
                    SwinBlock::new(
                        store,
                        &format!("encoder.stage{s}.block{b}"),
                        width,
                        config.heads[s],
                        config.window,
                        config.mlp_ratio,
                        config.rel_bias,
                        config.ln_eps,
                        b % 2 == 1,
                        rng,
                    )
                })
                .collect();
            let merge = (s + 1 < config.depths.len()).then(|| {
                PatchMerge::new(
                    store,
                    &format!("encoder.stage{s}.merge"),
                    width,
                    config.ln_eps,
                    rng,
                )
            });
            stages.push(Stage { blocks, merge });
        }
        let last = config.stage_width(config.depths.len() - 1);
        let norm = LayerNorm::new(store, "encoder.norm", last, config.ln_eps);
        let proj = Linear::new(store, "encoder.proj", last, config.token_dim, true, rng);
        Ok(Self {
            config: config.clone(),
            embed,
            stages,
            norm,
            proj,
        })
    }

    /// Runs every stage and returns the final token grid, before pooling.
    pub fn features<T: Scalar>(&self, g: &Graph<'_, T>, clip: &VideoClip) -> Result<PatchGrid> {
        let mut grid = self.embed.forward(g, clip)?;
        for stage in &self.stages {
            for block in &stage.blocks {
                grid = block.forward(g, &grid)?;
            }
            if let Some(merge) = &stage.merge {
                grid = merge.forward(g, &grid)?;
            }
        }
        Ok(grid)
    }

    /// Final norm, mean over `(H', W')` per time step, projection to `D`.
    pub fn encode<T: Scalar>(&self, g: &Graph<'_, T>, clip: &VideoClip) -> Result<EncoderOutput> {
        let grid = self.features(g, clip)?;
        let normed = self.norm.forward(g, grid.tokens)?;
        let [t, h, w] = grid.dims;
        let spatial = g.tape.reshape(normed, &[t, h * w, grid.width]);
        let pooled = g.tape.mean_axis(spatial, 1);
        let tokens = self.proj.forward(g, pooled);
        Ok(EncoderOutput {
            tokens,
            count: t,
            width: self.config.token_dim,
        })
    }
}
