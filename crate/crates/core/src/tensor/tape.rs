//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every primitive appends one node holding its forward value and whatever it
//! needs for the backward rule. Node ids are assigned in creation order, so the
//! tape is already topologically sorted and the backward sweep is a single
//! reverse scan.

use std::cell::{Ref, RefCell};

use rand::Rng;

use super::dense::{split_axis, Tensor};
use crate::{Error, Result, Scalar};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Gather {
        table: Var,
        index: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        input: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Mean {
        input: Var,
        axis: usize,
    },
    Max {
        input: Var,
        axis: usize,
        argmax: Vec<usize>,
    },
    SumAll(Var),
    Dropout {
        input: Var,
        mask: Vec<T>,
    },
    Softmax {
        input: Var,
        axis: usize,
    },
    LayerNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        normed: Vec<T>,
        rstd: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<T>,
        count: usize,
    },
    Bce {
        logits: Var,
        targets: Vec<T>,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _) | Op::Transpose(a) | Op::Relu(a) | Op::Gelu(a) | Op::Sigmoid(a) => {
                vec![*a]
            }
            Op::Reshape(a) | Op::SumAll(a) => vec![*a],
            Op::Gather { table, .. } => vec![*table],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Narrow { input, .. }
            | Op::Mean { input, .. }
            | Op::Max { input, .. }
            | Op::Dropout { input, .. }
            | Op::Softmax { input, .. } => vec![*input],
            Op::LayerNorm {
                input, gamma, beta, ..
            } => vec![*input, *gamma, *beta],
            Op::CrossEntropy { logits, .. } | Op::Bce { logits, .. } => vec![*logits],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients of a scalar loss with respect to every leaf that requested them.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Record of primitive applications.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.044_715;

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    let s = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let c = T::lit(GELU_C);
    let half = T::lit(0.5);
    let u = s * (x + c * x * x * x);
    let th = u.tanh();
    let y = half * x * (T::one() + th);
    let dy = half * (T::one() + th)
        + half * x * (T::one() - th * th) * s * (T::one() + T::lit(3.0) * c * x * x);
    (y, dy)
}

fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

fn transpose_raw<T: Scalar>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

fn is_scalar_shape(shape: &[usize]) -> bool {
    shape.iter().product::<usize>() == 1
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor<T>, op: Op<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = op.inputs().iter().any(|v| nodes[v.0].needs_grad);
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Records an input tensor. Gradients are reported only for leaves created
    /// with `requires_grad`.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(nodes.len() - 1)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn value_ref(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    fn binary(&self, a: Var, b: Var, f: impl Fn(T, T) -> T, name: &str) -> Tensor<T> {
        let nodes = self.nodes.borrow();
        let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
        if x.shape() == y.shape() {
            let data = x
                .data()
                .iter()
                .zip(y.data())
                .map(|(&p, &q)| f(p, q))
                .collect();
            Tensor::new(x.shape().to_vec(), data)
        } else if is_scalar_shape(y.shape()) {
            let q = y.data()[0];
            x.map(|p| f(p, q))
        } else if is_scalar_shape(x.shape()) {
            let p = x.data()[0];
            y.map(|q| f(p, q))
        } else {
            panic!(
                "{name}: shapes {:?} and {:?} are neither equal nor scalar",
                x.shape(),
                y.shape()
            );
        }
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |p, q| p + q, "add");
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |p, q| p - q, "sub");
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |p, q| p * q, "mul");
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&self, a: Var, c: T) -> Var {
        let v = self.nodes.borrow()[a.0].value.map(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    /// Adds a vector to every last-axis slice of `x` (bias broadcast).
    pub fn add_row(&self, x: Var, row: Var) -> Var {
        let v = {
            let nodes = self.nodes.borrow();
            let (xv, rv) = (&nodes[x.0].value, &nodes[row.0].value);
            let n = *xv.shape().last().expect("add_row on a 0-d tensor");
            assert_eq!(
                rv.len(),
                n,
                "add_row: row length {} vs last axis {n}",
                rv.len()
            );
            let data = xv
                .data()
                .chunks(n)
                .flat_map(|c| c.iter().zip(rv.data()).map(|(&p, &q)| p + q))
                .collect();
            Tensor::new(xv.shape().to_vec(), data)
        };
        self.push(v, Op::AddRow(x, row))
    }

    /// 2-D matrix product `[m,k] x [k,n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let v = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            assert!(
                x.ndim() == 2 && y.ndim() == 2,
                "matmul needs 2-D operands, got {:?} x {:?}",
                x.shape(),
                y.shape()
            );
            let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[1]);
            assert_eq!(
                k,
                y.shape()[0],
                "matmul inner dims {:?} x {:?}",
                x.shape(),
                y.shape()
            );
            Tensor::new(vec![m, n], matmul_raw(x.data(), y.data(), m, k, n))
        };
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&self, a: Var) -> Var {
        let v = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            assert_eq!(x.ndim(), 2, "transpose needs a 2-D operand");
            let (m, n) = (x.shape()[0], x.shape()[1]);
            Tensor::new(vec![n, m], transpose_raw(x.data(), m, n))
        };
        self.push(v, Op::Transpose(a))
    }

    pub fn relu(&self, a: Var) -> Var {
        let v = self.nodes.borrow()[a.0].value.map(|x| x.max(T::zero()));
        self.push(v, Op::Relu(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, a: Var) -> Var {
        let v = self.nodes.borrow()[a.0].value.map(|x| gelu_parts(x).0);
        self.push(v, Op::Gelu(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let v = self.nodes.borrow()[a.0].value.map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    /// Row lookup `table[index[i]]`; doubles as embedding lookup and as the
    /// permutation/replication primitive for windowing and padding.
    pub fn gather_rows(&self, table: Var, index: &[usize]) -> Var {
        let v = {
            let nodes = self.nodes.borrow();
            let t = &nodes[table.0].value;
            assert_eq!(t.ndim(), 2, "gather_rows needs a 2-D table");
            let (rows, d) = (t.shape()[0], t.shape()[1]);
            let mut data = Vec::with_capacity(index.len() * d);
            for &i in index {
                assert!(i < rows, "gather_rows: index {i} out of {rows} rows");
                data.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
            }
            Tensor::new(vec![index.len(), d], data)
        };
        self.push(
            v,
            Op::Gather {
                table,
                index: index.to_vec(),
            },
        )
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&self, inputs: &[Var], axis: usize) -> Var {
        assert!(!inputs.is_empty(), "concat of nothing");
        let v = {
            let nodes = self.nodes.borrow();
            let first = nodes[inputs[0].0].value.shape().to_vec();
            let mut out_shape = first.clone();
            out_shape[axis] = 0;
            for v in inputs {
                let s = nodes[v.0].value.shape();
                assert_eq!(s.len(), first.len(), "concat rank mismatch");
                for (d, (&p, &q)) in s.iter().zip(&first).enumerate() {
                    assert!(
                        d == axis || p == q,
                        "concat: shapes {s:?} and {first:?} differ off-axis"
                    );
                }
                out_shape[axis] += s[axis];
            }
            let (outer, _, inner) = split_axis(&out_shape, axis);
            let mut data = Vec::with_capacity(out_shape.iter().product());
            for o in 0..outer {
                for v in inputs {
                    let t = &nodes[v.0].value;
                    let chunk = t.shape()[axis] * inner;
                    data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            Tensor::new(out_shape, data)
        };
        self.push(
            v,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, input: Var, axis: usize, start: usize, len: usize) -> Var {
        let v = {
            let nodes = self.nodes.borrow();
            let t = &nodes[input.0].value;
            let (outer, n, inner) = split_axis(t.shape(), axis);
            assert!(
                start + len <= n,
                "narrow [{start}, {}) beyond axis length {n}",
                start + len
            );
            let mut shape = t.shape().to_vec();
            shape[axis] = len;
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = o * n * inner + start * inner;
                data.extend_from_slice(&t.data()[base..base + len * inner]);
            }
            Tensor::new(shape, data)
        };
        self.push(v, Op::Narrow { input, axis, start })
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let v = self.nodes.borrow()[a.0]
            .value
            .clone()
            .reshaped(shape.to_vec());
        self.push(v, Op::Reshape(a))
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(&self, input: Var, axis: usize) -> Var {
        let v = {
            let nodes = self.nodes.borrow();
            let t = &nodes[input.0].value;
            let (outer, n, inner) = split_axis(t.shape(), axis);
            assert!(n > 0, "mean over empty axis");
            let inv = T::one() / T::from_usize_lossy(n);
            let mut data = vec![T::zero(); outer * inner];
            for o in 0..outer {
                for k in 0..n {
                    let src = &t.data()[(o * n + k) * inner..(o * n + k + 1) * inner];
                    for (d, &s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *d = *d + s;
                    }
                }
            }
            data.iter_mut().for_each(|d| *d = *d * inv);
            let mut shape = t.shape().to_vec();
            shape.remove(axis);
            Tensor::new(shape, data)
        };
        self.push(v, Op::Mean { input, axis })
    }

    /// Max over `axis`, which is removed from the shape. The gradient flows to
    /// the first maximal entry.
    pub fn max_axis(&self, input: Var, axis: usize) -> Var {
        let (v, argmax) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[input.0].value;
            let (outer, n, inner) = split_axis(t.shape(), axis);
            assert!(n > 0, "max over empty axis");
            let mut data = Vec::with_capacity(outer * inner);
            let mut argmax = Vec::with_capacity(outer * inner);
            for o in 0..outer {
                for i in 0..inner {
                    let mut best = 0;
                    let mut bv = t.data()[o * n * inner + i];
                    for k in 1..n {
                        let x = t.data()[(o * n + k) * inner + i];
                        if x > bv {
                            bv = x;
                            best = k;
                        }
                    }
                    data.push(bv);
                    argmax.push(best);
                }
            }
            let mut shape = t.shape().to_vec();
            shape.remove(axis);
            (Tensor::new(shape, data), argmax)
        };
        self.push(
            v,
            Op::Max {
                input,
                axis,
                argmax,
            },
        )
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let s = self.nodes.borrow()[a.0].value.sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    /// Inverted dropout: zeroes each entry with probability `p` and rescales
    /// the survivors by `1/(1-p)`. The keep pattern is stored for backward.
    pub fn dropout<R: Rng + ?Sized>(&self, input: Var, p: f64, rng: &mut R) -> Var {
        assert!((0.0..1.0).contains(&p), "dropout rate {p} outside [0, 1)");
        if p == 0.0 {
            return input;
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let (v, mask) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[input.0].value;
            let mask: Vec<T> = (0..t.len())
                .map(|_| {
                    if rng.random::<f64>() < p {
                        T::zero()
                    } else {
                        keep
                    }
                })
                .collect();
            let data = t.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
            (Tensor::new(t.shape().to_vec(), data), mask)
        };
        self.push(v, Op::Dropout { input, mask })
    }

    /// Softmax along `axis`, max-subtracted.
    pub fn softmax(&self, input: Var, axis: usize) -> Result<Var> {
        let v = {
            let nodes = self.nodes.borrow();
            let t = &nodes[input.0].value;
            if !t.all_finite() {
                return Err(Error::NonFiniteInput);
            }
            softmax_raw(t, axis)
        };
        Ok(self.push(v, Op::Softmax { input, axis }))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (v, normed, rstd) = {
            let nodes = self.nodes.borrow();
            let (x, g, b) = (
                &nodes[input.0].value,
                &nodes[gamma.0].value,
                &nodes[beta.0].value,
            );
            let n = x.shape().last().copied().unwrap_or(0);
            if n == 0 {
                return Err(Error::ZeroLengthAxis);
            }
            if g.len() != n || b.len() != n {
                return Err(Error::Shape(format!(
                    "layer_norm affine length {} / {} vs axis {n}",
                    g.len(),
                    b.len()
                )));
            }
            let nt = T::from_usize_lossy(n);
            let eps = T::lit(eps);
            let rows = x.len() / n;
            let mut normed = Vec::with_capacity(x.len());
            let mut out = Vec::with_capacity(x.len());
            let mut rstd = Vec::with_capacity(rows);
            for row in x.data().chunks(n) {
                let mean = row.iter().copied().sum::<T>() / nt;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nt;
                let r = T::one() / (var + eps).sqrt();
                rstd.push(r);
                for (j, &v) in row.iter().enumerate() {
                    let z = (v - mean) * r;
                    normed.push(z);
                    out.push(z * g.data()[j] + b.data()[j]);
                }
            }
            (Tensor::new(x.shape().to_vec(), out), normed, rstd)
        };
        Ok(self.push(
            v,
            Op::LayerNorm {
                input,
                gamma,
                beta,
                normed,
                rstd,
            },
        ))
    }

    /// Mean token cross-entropy over rows of `[L, V]` logits, skipping rows
    /// whose target equals `ignore_id`.
    pub fn cross_entropy_masked(
        &self,
        logits: Var,
        targets: &[usize],
        ignore_id: usize,
    ) -> Result<Var> {
        let (loss, probs, kept, count) = {
            let nodes = self.nodes.borrow();
            let z = &nodes[logits.0].value;
            if z.ndim() != 2 || z.shape()[0] != targets.len() {
                return Err(Error::Shape(format!(
                    "logits {:?} vs {} targets",
                    z.shape(),
                    targets.len()
                )));
            }
            let vocab = z.shape()[1];
            let mut kept = Vec::with_capacity(targets.len());
            for &t in targets {
                if t == ignore_id {
                    kept.push(None);
                } else if t >= vocab {
                    return Err(Error::TargetOutOfRange { target: t, vocab });
                } else {
                    kept.push(Some(t));
                }
            }
            let count = kept.iter().flatten().count();
            if count == 0 {
                return Err(Error::EmptyLoss);
            }
            if !z.all_finite() {
                return Err(Error::NonFiniteInput);
            }
            let probs = softmax_raw(z, 1);
            let mut total = T::zero();
            for (i, t) in kept.iter().enumerate() {
                if let Some(t) = t {
                    let row = z.row(i);
                    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<T>().ln();
                    total = total + lse - row[*t];
                }
            }
            (
                total / T::from_usize_lossy(count),
                probs.into_data(),
                kept,
                count,
            )
        };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: kept,
                probs,
                count,
            },
        ))
    }

    /// Mean binary cross-entropy on logits in the stable form
    /// `max(z,0) - z·t + ln(1 + e^{-|z|})`.
    pub fn bce_with_logits(&self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        let loss = {
            let nodes = self.nodes.borrow();
            let z = &nodes[logits.0].value;
            if z.len() != targets.len() || z.is_empty() {
                return Err(Error::Shape(format!(
                    "logits {:?} vs targets {:?}",
                    z.shape(),
                    targets.shape()
                )));
            }
            if let Some(&bad) = targets
                .data()
                .iter()
                .find(|&&t| t != T::zero() && t != T::one())
            {
                return Err(Error::NonBinaryTarget(bad.as_f64()));
            }
            let total: T = z
                .data()
                .iter()
                .zip(targets.data())
                .map(|(&z, &t)| z.max(T::zero()) - z * t + (-z.abs()).exp().ln_1p())
                .sum();
            total / T::from_usize_lossy(z.len())
        };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                logits,
                targets: targets.data().to_vec(),
            },
        ))
    }

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let shape = nodes[loss.0].value.shape();
        if !is_scalar_shape(shape) {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(shape.to_vec(), vec![T::one()]));

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let mut acc = |v: Var, t: Tensor<T>| {
                if !nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            };
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    acc(*a, reduce_to(&g, val(*a).shape()));
                    acc(*b, reduce_to(&g, val(*b).shape()));
                }
                Op::Sub(a, b) => {
                    acc(*a, reduce_to(&g, val(*a).shape()));
                    acc(*b, reduce_to(&g.map(|x| -x), val(*b).shape()));
                }
                Op::Mul(a, b) => {
                    let (x, y) = (val(*a), val(*b));
                    if nodes[a.0].needs_grad {
                        acc(*a, reduce_to(&broadcast_mul(&g, y), x.shape()));
                    }
                    if nodes[b.0].needs_grad {
                        acc(*b, reduce_to(&broadcast_mul(&g, x), y.shape()));
                    }
                }
                Op::Scale(a, c) => acc(*a, g.map(|x| x * *c)),
                Op::AddRow(x, row) => {
                    let n = val(*row).len();
                    let mut rg = vec![T::zero(); n];
                    for chunk in g.data().chunks(n) {
                        for (r, &v) in rg.iter_mut().zip(chunk) {
                            *r = *r + v;
                        }
                    }
                    acc(*row, Tensor::new(val(*row).shape().to_vec(), rg));
                    acc(*x, g);
                }
                Op::MatMul(a, b) => {
                    let (x, y) = (val(*a), val(*b));
                    let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[1]);
                    if nodes[a.0].needs_grad {
                        let yt = transpose_raw(y.data(), k, n);
                        acc(
                            *a,
                            Tensor::new(vec![m, k], matmul_raw(g.data(), &yt, m, n, k)),
                        );
                    }
                    if nodes[b.0].needs_grad {
                        let xt = transpose_raw(x.data(), m, k);
                        acc(
                            *b,
                            Tensor::new(vec![k, n], matmul_raw(&xt, g.data(), k, m, n)),
                        );
                    }
                }
                Op::Transpose(a) => {
                    let (m, n) = (g.shape()[0], g.shape()[1]);
                    acc(*a, Tensor::new(vec![n, m], transpose_raw(g.data(), m, n)));
                }
                Op::Relu(a) => {
                    let x = val(*a);
                    let d = g.data().iter().zip(x.data()).map(|(&g, &x)| {
                        if x > T::zero() {
                            g
                        } else {
                            T::zero()
                        }
                    });
                    acc(*a, Tensor::new(x.shape().to_vec(), d.collect()));
                }
                Op::Gelu(a) => {
                    let x = val(*a);
                    let d = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(&g, &x)| g * gelu_parts(x).1);
                    acc(*a, Tensor::new(x.shape().to_vec(), d.collect()));
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let d = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(&g, &y)| g * y * (T::one() - y));
                    acc(*a, Tensor::new(y.shape().to_vec(), d.collect()));
                }
                Op::Gather { table, index } => {
                    let t = val(*table);
                    let d = t.shape()[1];
                    let mut tg = vec![T::zero(); t.len()];
                    for (r, &i) in index.iter().enumerate() {
                        for (dst, &src) in tg[i * d..(i + 1) * d]
                            .iter_mut()
                            .zip(&g.data()[r * d..(r + 1) * d])
                        {
                            *dst = *dst + src;
                        }
                    }
                    acc(*table, Tensor::new(t.shape().to_vec(), tg));
                }
                Op::Concat { inputs, axis } => {
                    let (outer, total, inner) = split_axis(g.shape(), *axis);
                    let mut offset = 0;
                    for v in inputs {
                        let s = val(*v).shape().to_vec();
                        let len = s[*axis];
                        if nodes[v.0].needs_grad {
                            let mut part = Vec::with_capacity(outer * len * inner);
                            for o in 0..outer {
                                let base = (o * total + offset) * inner;
                                part.extend_from_slice(&g.data()[base..base + len * inner]);
                            }
                            acc(*v, Tensor::new(s, part));
                        }
                        offset += len;
                    }
                }
                Op::Narrow { input, axis, start } => {
                    let s = val(*input).shape().to_vec();
                    let (outer, n, inner) = split_axis(&s, *axis);
                    let len = g.shape()[*axis];
                    let mut full = vec![T::zero(); outer * n * inner];
                    for o in 0..outer {
                        let base = (o * n + start) * inner;
                        full[base..base + len * inner]
                            .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                    }
                    acc(*input, Tensor::new(s, full));
                }
                Op::Reshape(a) => acc(*a, g.reshaped(val(*a).shape().to_vec())),
                Op::Mean { input, axis } => {
                    let s = val(*input).shape().to_vec();
                    let (outer, n, inner) = split_axis(&s, *axis);
                    let inv = T::one() / T::from_usize_lossy(n);
                    let mut full = Vec::with_capacity(outer * n * inner);
                    for o in 0..outer {
                        for _ in 0..n {
                            full.extend(
                                g.data()[o * inner..(o + 1) * inner]
                                    .iter()
                                    .map(|&x| x * inv),
                            );
                        }
                    }
                    acc(*input, Tensor::new(s, full));
                }
                Op::Max {
                    input,
                    axis,
                    argmax,
                } => {
                    let s = val(*input).shape().to_vec();
                    let (outer, n, inner) = split_axis(&s, *axis);
                    let mut full = vec![T::zero(); outer * n * inner];
                    for o in 0..outer {
                        for i in 0..inner {
                            let k = argmax[o * inner + i];
                            full[(o * n + k) * inner + i] = g.data()[o * inner + i];
                        }
                    }
                    acc(*input, Tensor::new(s, full));
                }
                Op::SumAll(a) => {
                    let s = val(*a).shape().to_vec();
                    acc(*a, Tensor::full(s, g.item()));
                }
                Op::Dropout { input, mask } => {
                    let d = g.data().iter().zip(mask).map(|(&g, &m)| g * m).collect();
                    acc(*input, Tensor::new(g.shape().to_vec(), d));
                }
                Op::Softmax { input, axis } => {
                    let y = &node.value;
                    let (outer, n, inner) = split_axis(y.shape(), *axis);
                    let mut d = vec![T::zero(); y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |k: usize| (o * n + k) * inner + i;
                            let dot: T = (0..n).map(|k| g.data()[idx(k)] * y.data()[idx(k)]).sum();
                            for k in 0..n {
                                d[idx(k)] = y.data()[idx(k)] * (g.data()[idx(k)] - dot);
                            }
                        }
                    }
                    acc(*input, Tensor::new(y.shape().to_vec(), d));
                }
                Op::LayerNorm {
                    input,
                    gamma,
                    beta,
                    normed,
                    rstd,
                } => {
                    let gam = val(*gamma);
                    let n = gam.len();
                    let nt = T::from_usize_lossy(n);
                    let mut dgamma = vec![T::zero(); n];
                    let mut dbeta = vec![T::zero(); n];
                    let mut dx = Vec::with_capacity(g.len());
                    for (r, (grow, zrow)) in g.data().chunks(n).zip(normed.chunks(n)).enumerate() {
                        let mut sum_dz = T::zero();
                        let mut sum_dz_z = T::zero();
                        let dz: Vec<T> =
                            grow.iter().zip(gam.data()).map(|(&g, &w)| g * w).collect();
                        for j in 0..n {
                            dgamma[j] = dgamma[j] + grow[j] * zrow[j];
                            dbeta[j] = dbeta[j] + grow[j];
                            sum_dz = sum_dz + dz[j];
                            sum_dz_z = sum_dz_z + dz[j] * zrow[j];
                        }
                        let scale = rstd[r] / nt;
                        for j in 0..n {
                            dx.push(scale * (nt * dz[j] - sum_dz - zrow[j] * sum_dz_z));
                        }
                    }
                    acc(*input, Tensor::new(g.shape().to_vec(), dx));
                    acc(*gamma, Tensor::new(gam.shape().to_vec(), dgamma));
                    acc(*beta, Tensor::new(val(*beta).shape().to_vec(), dbeta));
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                    count,
                } => {
                    let z = val(*logits);
                    let vocab = z.shape()[1];
                    let scale = g.item() / T::from_usize_lossy(*count);
                    let mut d = vec![T::zero(); z.len()];
                    for (i, t) in targets.iter().enumerate() {
                        if let Some(t) = t {
                            for j in 0..vocab {
                                d[i * vocab + j] = probs[i * vocab + j] * scale;
                            }
                            d[i * vocab + t] = d[i * vocab + t] - scale;
                        }
                    }
                    acc(*logits, Tensor::new(z.shape().to_vec(), d));
                }
                Op::Bce { logits, targets } => {
                    let z = val(*logits);
                    let scale = g.item() / T::from_usize_lossy(z.len());
                    let d = z
                        .data()
                        .iter()
                        .zip(targets)
                        .map(|(&z, &t)| (sigmoid(z) - t) * scale)
                        .collect();
                    acc(*logits, Tensor::new(z.shape().to_vec(), d));
                }
            }
        }
        for (id, slot) in grads.iter_mut().enumerate() {
            if !matches!(nodes[id].op, Op::Leaf) {
                *slot = None;
            }
        }
        Ok(Gradients { grads })
    }
}

pub(crate) fn softmax_raw<T: Scalar>(t: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, n, inner) = split_axis(t.shape(), axis);
    let mut out = vec![T::zero(); t.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * n + k) * inner + i;
            let m = (0..n)
                .map(|k| t.data()[idx(k)])
                .fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for k in 0..n {
                let e = (t.data()[idx(k)] - m).exp();
                out[idx(k)] = e;
                s = s + e;
            }
            for k in 0..n {
                out[idx(k)] = out[idx(k)] / s;
            }
        }
    }
    Tensor::new(t.shape().to_vec(), out)
}

fn broadcast_mul<T: Scalar>(g: &Tensor<T>, other: &Tensor<T>) -> Tensor<T> {
    if other.shape() == g.shape() {
        let d = g
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a * b)
            .collect();
        Tensor::new(g.shape().to_vec(), d)
    } else {
        let c = other.data()[0];
        g.map(|x| x * c)
    }
}

/// Sums a gradient back down to a scalar operand's shape when it was broadcast.
fn reduce_to<T: Scalar>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        g.clone()
    } else {
        Tensor::new(shape.to_vec(), vec![g.sum()])
    }
}
