//! Token grids: 3D patch partition, edge-replication padding, patch merging.

use rand::Rng;

use crate::tensor::{Graph, LayerNorm, Linear, ParamStore, Tensor, Var};
use crate::video::VideoClip;
use crate::{Error, Result, Scalar};

/// Tokens laid out row-major over `(t, h, w)`, shape `[T'·H'·W', width]`.
#[derive(Clone, Copy, Debug)]
pub struct PatchGrid {
    pub dims: [usize; 3],
    pub width: usize,
    pub tokens: Var,
}

fn grid_index(dims: [usize; 3], t: usize, h: usize, w: usize) -> usize {
    (t * dims[1] + h) * dims[2] + w
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Pads every axis up to a multiple of `multiple` by repeating edge tokens.
    pub fn pad_to_multiple<T: Scalar>(&self, g: &Graph<'_, T>, multiple: [usize; 3]) -> PatchGrid {
        let padded: [usize; 3] =
            std::array::from_fn(|a| self.dims[a].div_ceil(multiple[a]) * multiple[a]);
        if padded == self.dims {
            return *self;
        }
        let mut index = Vec::with_capacity(padded.iter().product());
        for t in 0..padded[0] {
            for h in 0..padded[1] {
                for w in 0..padded[2] {
                    let c = [
                        t.min(self.dims[0] - 1),
                        h.min(self.dims[1] - 1),
                        w.min(self.dims[2] - 1),
                    ];
                    index.push(grid_index(self.dims, c[0], c[1], c[2]));
                }
            }
        }
        PatchGrid {
            dims: padded,
            width: self.width,
            tokens: g.tape.gather_rows(self.tokens, &index),
        }
    }

    /// Keeps the leading `dims` block of a padded grid.
    pub fn crop<T: Scalar>(&self, g: &Graph<'_, T>, dims: [usize; 3]) -> PatchGrid {
        if dims == self.dims {
            return *self;
        }
        let mut index = Vec::with_capacity(dims.iter().product());
        for t in 0..dims[0] {
            for h in 0..dims[1] {
                for w in 0..dims[2] {
                    index.push(grid_index(self.dims, t, h, w));
                }
            }
        }
        PatchGrid {
            dims,
            width: self.width,
            tokens: g.tape.gather_rows(self.tokens, &index),
        }
    }
}

/// Flattened `(dt, dy, dx, c)` patches of a clip, edge-padded to patch
/// multiples. Returns the patch matrix along with the grid geometry.
pub fn flatten_patches<T: Scalar>(
    clip: &VideoClip,
    patch: [usize; 3],
) -> Result<(Tensor<T>, [usize; 3], [usize; 3])> {
    if clip.frames == 0 || clip.height == 0 || clip.width == 0 || clip.channels == 0 {
        return Err(Error::EmptyVideo);
    }
    let extent = [clip.frames, clip.height, clip.width];
    let padded: [usize; 3] = std::array::from_fn(|a| extent[a].div_ceil(patch[a]) * patch[a]);
    let dims: [usize; 3] = std::array::from_fn(|a| padded[a] / patch[a]);
    let pdim = patch.iter().product::<usize>() * clip.channels;
    let mut data = Vec::with_capacity(dims.iter().product::<usize>() * pdim);
    for gt in 0..dims[0] {
        for gh in 0..dims[1] {
            for gw in 0..dims[2] {
                for dt in 0..patch[0] {
                    let t = (gt * patch[0] + dt).min(clip.frames - 1);
                    for dy in 0..patch[1] {
                        let y = (gh * patch[1] + dy).min(clip.height - 1);
                        for dx in 0..patch[2] {
                            let x = (gw * patch[2] + dx).min(clip.width - 1);
                            for c in 0..clip.channels {
                                data.push(T::lit(clip.at(t, y, x, c) as f64));
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(vec![dims.iter().product(), pdim], data),
        dims,
        padded,
    ))
}

/// Linear embedding of non-overlapping 3D patches.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub patch: [usize; 3],
}

impl PatchEmbed {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        patch: [usize; 3],
        channels: usize,
        embed_dim: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = patch.iter().product::<usize>() * channels;
        Self {
            proj: Linear::new(store, &format!("{name}.proj"), fan_in, embed_dim, true, rng),
            patch,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<'_, T>, clip: &VideoClip) -> Result<PatchGrid> {
        let (patches, dims, _) = flatten_patches::<T>(clip, self.patch)?;
        if patches.shape()[1] != self.proj.fan_in {
            return Err(Error::Shape(format!(
                "patch vector of {} values, embedding expects {}",
                patches.shape()[1],
                self.proj.fan_in
            )));
        }
        let x = g.constant(patches);
        Ok(PatchGrid {
            dims,
            width: self.proj.fan_out,
            tokens: self.proj.forward(g, x),
        })
    }
}

/// Concatenates each 2×2 spatial token group and reduces `4C -> 2C`.
#[derive(Clone, Debug)]
pub struct PatchMerge {
    pub norm: LayerNorm,
    pub reduce: Linear,
}

impl PatchMerge {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        ln_eps: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), 4 * width, ln_eps),
            reduce: Linear::new(
                store,
                &format!("{name}.reduce"),
                4 * width,
                2 * width,
                false,
                rng,
            ),
        }
    }

    /// Spatial concatenation order: `(0,0), (1,0), (0,1), (1,1)` in `(dh, dw)`.
    pub fn gather_index(dims: [usize; 3]) -> ([Vec<usize>; 4], [usize; 3]) {
        let out = [dims[0], dims[1] / 2, dims[2] / 2];
        let offsets = [(0, 0), (1, 0), (0, 1), (1, 1)];
        let index = offsets.map(|(dh, dw)| {
            let mut v = Vec::with_capacity(out.iter().product());
            for t in 0..out[0] {
                for h in 0..out[1] {
                    for w in 0..out[2] {
                        v.push(grid_index(dims, t, 2 * h + dh, 2 * w + dw));
                    }
                }
            }
            v
        });
        (index, out)
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<'_, T>, grid: &PatchGrid) -> Result<PatchGrid> {
        let padded = grid.pad_to_multiple(g, [1, 2, 2]);
        let (index, dims) = Self::gather_index(padded.dims);
        let parts: Vec<Var> = index
            .iter()
            .map(|ix| g.tape.gather_rows(padded.tokens, ix))
            .collect();
        let cat = g.tape.concat(&parts, 1);
        let normed = self.norm.forward(g, cat)?;
        Ok(PatchGrid {
            dims,
            width: 2 * grid.width,
            tokens: self.reduce.forward(g, normed),
        })
    }
}
