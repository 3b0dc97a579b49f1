//! Windowed 3D self-attention with optional cyclic shift.

use rand::Rng;

use super::grid::PatchGrid;
use crate::attention::{self, MASKED};
use crate::tensor::{Graph, LayerNorm, Linear, ParamId, ParamStore, Tensor, Var};
use crate::{Error, Result, Scalar};

/// Tokens of one attention window.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowGroup {
    /// Grid indices (row-major over `(t, h, w)`), in window-local order.
    pub tokens: Vec<usize>,
    /// Region label per token; only equal labels may attend to each other.
    pub region: Vec<usize>,
}

/// Per-axis cyclic shift used by the shifted variant: half a window, or zero
/// along axes the window already covers.
pub fn shift_amounts(dims: [usize; 3], window: [usize; 3]) -> [usize; 3] {
    std::array::from_fn(|a| {
        if dims[a] <= window[a] {
            0
        } else {
            window[a] / 2
        }
    })
}

/// Partitions a grid (dims must be window multiples) into windows, after a
/// cyclic shift by `shift` tokens toward the origin.
///
/// The region label of a position is the band it falls into along each axis
/// of the shifted grid: `[0, G-w)`, `[G-w, G-s)` or `[G-s, G)`. The last band
/// holds tokens that wrapped around, which must not attend to the others.
pub fn window_groups(dims: [usize; 3], window: [usize; 3], shift: [usize; 3]) -> Vec<WindowGroup> {
    let counts: [usize; 3] = std::array::from_fn(|a| dims[a] / window[a]);
    let band = |a: usize, p: usize| {
        if shift[a] == 0 || p < dims[a] - window[a] {
            0
        } else if p < dims[a] - shift[a] {
            1
        } else {
            2
        }
    };
    let mut groups = Vec::with_capacity(counts.iter().product());
    for wt in 0..counts[0] {
        for wh in 0..counts[1] {
            for ww in 0..counts[2] {
                let n = window.iter().product();
                let mut tokens = Vec::with_capacity(n);
                let mut region = Vec::with_capacity(n);
                for i in 0..window[0] {
                    for j in 0..window[1] {
                        for k in 0..window[2] {
                            let p = [wt * window[0] + i, wh * window[1] + j, ww * window[2] + k];
                            let o: [usize; 3] =
                                std::array::from_fn(|a| (p[a] + shift[a]) % dims[a]);
                            tokens.push((o[0] * dims[1] + o[1]) * dims[2] + o[2]);
                            region.push(band(0, p[0]) * 9 + band(1, p[1]) * 3 + band(2, p[2]));
                        }
                    }
                }
                groups.push(WindowGroup { tokens, region });
            }
        }
    }
    groups
}

/// Row-major `[P, P]` matrix of which token pairs may attend, assembled from
/// the window groups.
pub fn allowed_pairs(dims: [usize; 3], window: [usize; 3], shift: [usize; 3]) -> Vec<bool> {
    let p: usize = dims.iter().product();
    let mut allowed = vec![false; p * p];
    for g in window_groups(dims, window, shift) {
        for (a, &i) in g.tokens.iter().enumerate() {
            for (b, &j) in g.tokens.iter().enumerate() {
                allowed[i * p + j] = g.region[a] == g.region[b];
            }
        }
    }
    allowed
}

/// Index into the relative-position table for every ordered pair of
/// window-local positions.
pub fn relative_index(window: [usize; 3]) -> Vec<usize> {
    let n: usize = window.iter().product();
    let span: [usize; 3] = std::array::from_fn(|a| 2 * window[a] - 1);
    let coord = |i: usize| {
        [
            i / (window[1] * window[2]),
            (i / window[2]) % window[1],
            i % window[2],
        ]
    };
    let mut idx = Vec::with_capacity(n * n);
    for i in 0..n {
        let ci = coord(i);
        for j in 0..n {
            let cj = coord(j);
            let off: [usize; 3] = std::array::from_fn(|a| ci[a] + window[a] - 1 - cj[a]);
            idx.push((off[0] * span[1] + off[1]) * span[2] + off[2]);
        }
    }
    idx
}

/// Multi-head self-attention inside 3D windows.
#[derive(Clone, Debug)]
pub struct WindowAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub rel_table: Option<ParamId>,
    pub heads: usize,
    pub window: [usize; 3],
    pub width: usize,
}

impl WindowAttention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        heads: usize,
        window: [usize; 3],
        rel_bias: bool,
        rng: &mut R,
    ) -> Self {
        let qkv = Linear::new(store, &format!("{name}.qkv"), width, 3 * width, true, rng);
        let proj = Linear::new(store, &format!("{name}.proj"), width, width, true, rng);
        let rel_table = rel_bias.then(|| {
            let entries: usize = window.iter().map(|w| 2 * w - 1).product();
            store.add(
                format!("{name}.rel_bias"),
                Tensor::randn(vec![entries, heads], 0.02, rng),
            )
        });
        Self {
            qkv,
            proj,
            rel_table,
            heads,
            window,
            width,
        }
    }

    /// Attention over `x` (`[P, C]`, grid dims already window multiples).
    pub fn forward<T: Scalar>(
        &self,
        g: &Graph<'_, T>,
        x: Var,
        dims: [usize; 3],
        shifted: bool,
    ) -> Result<Var> {
        let shift = if shifted {
            shift_amounts(dims, self.window)
        } else {
            [0; 3]
        };
        let groups = window_groups(dims, self.window, shift);
        let n: usize = self.window.iter().product();
        let qkv = self.qkv.forward(g, x);

        let bias: Option<Vec<Var>> = self.rel_table.map(|table| {
            let all = g
                .tape
                .gather_rows(g.param(table), &relative_index(self.window));
            (0..self.heads)
                .map(|h| {
                    let col = g.tape.narrow(all, 1, h, 1);
                    g.tape.reshape(col, &[n, n])
                })
                .collect()
        });

        let mut outputs = Vec::with_capacity(groups.len());
        let mut order = Vec::with_capacity(dims.iter().product());
        for group in &groups {
            let rows = g.tape.gather_rows(qkv, &group.tokens);
            let q = g.tape.narrow(rows, 1, 0, self.width);
            let k = g.tape.narrow(rows, 1, self.width, self.width);
            let v = g.tape.narrow(rows, 1, 2 * self.width, self.width);
            let mask = if group.region.iter().all(|&r| r == group.region[0]) {
                None
            } else {
                let mut m = vec![T::zero(); n * n];
                for a in 0..n {
                    for b in 0..n {
                        if group.region[a] != group.region[b] {
                            m[a * n + b] = T::lit(MASKED);
                        }
                    }
                }
                Some(g.constant(Tensor::new(vec![n, n], m)))
            };
            outputs.push(attention::multi_head(
                g,
                q,
                k,
                v,
                self.heads,
                bias.as_deref(),
                mask,
                0.0,
            )?);
            order.extend_from_slice(&group.tokens);
        }
        let stacked = g.tape.concat(&outputs, 0);
        let mut inverse = vec![0; order.len()];
        for (pos, &tok) in order.iter().enumerate() {
            inverse[tok] = pos;
        }
        let restored = g.tape.gather_rows(stacked, &inverse);
        Ok(self.proj.forward(g, restored))
    }
}

/// Pre-norm transformer block: windowed attention and a GELU MLP, each with a
/// residual connection.
#[derive(Clone, Debug)]
pub struct SwinBlock {
    pub norm1: LayerNorm,
    pub attn: WindowAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub shifted: bool,
}

impl SwinBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        heads: usize,
        window: [usize; 3],
        mlp_ratio: usize,
        rel_bias: bool,
        ln_eps: f64,
        shifted: bool,
        rng: &mut R,
    ) -> Self {
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), width, ln_eps),
            attn: WindowAttention::new(
                store,
                &format!("{name}.attn"),
                width,
                heads,
                window,
                rel_bias,
                rng,
            ),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), width, ln_eps),
            fc1: Linear::new(
                store,
                &format!("{name}.fc1"),
                width,
                mlp_ratio * width,
                true,
                rng,
            ),
            fc2: Linear::new(
                store,
                &format!("{name}.fc2"),
                mlp_ratio * width,
                width,
                true,
                rng,
            ),
            shifted,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<'_, T>, grid: &PatchGrid) -> Result<PatchGrid> {
        let window = self.attn.window;
        if (0..3).any(|a| window[a] > grid.dims[a]) {
            return Err(Error::Shape(format!(
                "window {window:?} larger than token grid {:?}",
                grid.dims
            )));
        }
        let padded = grid.pad_to_multiple(g, window);
        let h = self.norm1.forward(g, padded.tokens)?;
        let a = self.attn.forward(g, h, padded.dims, self.shifted)?;
        let x = g.tape.add(padded.tokens, a);
        let h = self.norm2.forward(g, x)?;
        let h = g.tape.gelu(self.fc1.forward(g, h));
        let x = g.tape.add(x, self.fc2.forward(g, h));
        Ok(PatchGrid {
            tokens: x,
            ..padded
        }
        .crop(g, grid.dims))
    }
}
