//! Multi-head scaled dot-product attention on the tape.

use crate::tensor::{Graph, Tensor, Var};
use crate::{Result, Scalar};

/// Additive score for disallowed pairs; `exp` of it underflows to exactly 0.
pub const MASKED: f64 = -1e9;

/// Attention of `q` (`[n, C]`) over `k`, `v` (`[m, C]`) split into `heads`
/// column groups. `bias` adds a per-head `[n, m]` term, `mask` a shared one.
/// Returns the concatenated head outputs `[n, C]`.
#[allow(clippy::too_many_arguments)]
pub fn multi_head<T: Scalar>(
    g: &Graph<'_, T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    bias: Option<&[Var]>,
    mask: Option<Var>,
    dropout: f64,
) -> Result<Var> {
    let width = g.tape.shape(q)[1];
    assert_eq!(
        width % heads,
        0,
        "width {width} not divisible by {heads} heads"
    );
    let dh = width / heads;
    let scale = T::one() / T::from_usize_lossy(dh).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.tape.narrow(q, 1, h * dh, dh);
        let kh = g.tape.narrow(k, 1, h * dh, dh);
        let vh = g.tape.narrow(v, 1, h * dh, dh);
        let p = probabilities(g, qh, kh, scale, bias.map(|b| b[h]), mask)?;
        let p = g.dropout(p, dropout);
        outs.push(g.tape.matmul(p, vh));
    }
    Ok(if heads == 1 {
        outs[0]
    } else {
        g.tape.concat(&outs, 1)
    })
}

/// Row-stochastic `[n, m]` weights `softmax(scale·q·kᵀ + bias + mask)`.
pub fn probabilities<T: Scalar>(
    g: &Graph<'_, T>,
    q: Var,
    k: Var,
    scale: T,
    bias: Option<Var>,
    mask: Option<Var>,
) -> Result<Var> {
    let kt = g.tape.transpose(k);
    let mut s = g.tape.scale(g.tape.matmul(q, kt), scale);
    if let Some(b) = bias {
        s = g.tape.add(s, b);
    }
    if let Some(m) = mask {
        s = g.tape.add(s, m);
    }
    g.tape.softmax(s, 1)
}

/// `[n, n]` additive mask letting position `i` see positions `j <= i`.
pub fn causal_mask<T: Scalar>(n: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); n * n];
    for i in 0..n {
        for j in i + 1..n {
            data[i * n + j] = T::lit(MASKED);
        }
    }
    Tensor::new(vec![n, n], data)
}
