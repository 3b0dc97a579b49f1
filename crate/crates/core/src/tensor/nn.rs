//! Forward-pass context and the small set of layers shared by the models.

use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dense::Tensor;
use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::{Result, Scalar};

/// One forward pass: a fresh tape bound to a parameter store.
///
/// Parameters are copied onto the tape on first use. Only those accepted by
/// the `trainable` predicate are recorded as gradient-requiring leaves.
pub struct Graph<'p, T> {
    pub tape: Tape<T>,
    store: &'p ParamStore<T>,
    bound: RefCell<Vec<Option<Var>>>,
    trainable: Box<dyn Fn(&str) -> bool + 'p>,
    train: bool,
    rng: RefCell<ChaCha8Rng>,
}

impl<'p, T: Scalar> Graph<'p, T> {
    /// Evaluation-mode graph: dropout is the identity, nothing requires grad.
    pub fn eval(store: &'p ParamStore<T>) -> Self {
        Self::with_mode(store, |_| false, false, 0)
    }

    /// Training-mode graph with every parameter trainable.
    pub fn train(store: &'p ParamStore<T>, seed: u64) -> Self {
        Self::with_mode(store, |_| true, true, seed)
    }

    pub fn with_mode(
        store: &'p ParamStore<T>,
        trainable: impl Fn(&str) -> bool + 'p,
        train: bool,
        seed: u64,
    ) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: RefCell::new(vec![None; store.len()]),
            trainable: Box::new(trainable),
            train,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn param(&self, id: ParamId) -> Var {
        if let Some(v) = self.bound.borrow()[id.0] {
            return v;
        }
        let requires = (self.trainable)(self.store.name(id));
        let v = self.tape.leaf(self.store.get(id).clone(), requires);
        self.bound.borrow_mut()[id.0] = Some(v);
        v
    }

    pub fn constant(&self, t: Tensor<T>) -> Var {
        self.tape.constant(t)
    }

    /// Dropout in training mode, identity otherwise.
    pub fn dropout(&self, x: Var, p: f64) -> Var {
        if !self.train || p == 0.0 {
            return x;
        }
        self.tape.dropout(x, p, &mut *self.rng.borrow_mut())
    }

    pub fn with_rng<R>(&self, f: impl FnOnce(&mut ChaCha8Rng) -> R) -> R {
        f(&mut self.rng.borrow_mut())
    }

    /// Gradients of `loss` for every parameter in store order; `None` for
    /// parameters that were unused or frozen.
    pub fn param_grads(&self, loss: Var) -> Result<Vec<Option<Tensor<T>>>> {
        let mut grads = self.tape.backward(loss)?;
        Ok(self
            .bound
            .borrow()
            .iter()
            .map(|v| v.and_then(|v| grads.take(v)))
            .collect())
    }
}

/// Affine map `x W + b` on row vectors.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_weight(format!("{name}.weight"), fan_in, fan_out, rng);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(vec![fan_out])));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    /// `x` is `[n, fan_in]`; returns `[n, fan_out]`.
    pub fn forward<T: Scalar>(&self, g: &Graph<'_, T>, x: Var) -> Var {
        let y = g.tape.matmul(x, g.param(self.weight));
        match self.bias {
            Some(b) => g.tape.add_row(y, g.param(b)),
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize, eps: f64) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::ones(vec![dim]));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(vec![dim]));
        Self { gamma, beta, eps }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<'_, T>, x: Var) -> Result<Var> {
        g.tape
            .layer_norm(x, g.param(self.gamma), g.param(self.beta), self.eps)
    }
}
