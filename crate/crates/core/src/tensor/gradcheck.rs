//! Central-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::dense::Tensor;
use super::nn::Graph;
use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::Result;

/// Denominator floor for the relative error, so entries whose true gradient is
/// ~0 are judged by absolute error instead.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
}

impl GradReport {
    fn record(&mut self, input: usize, entry: usize, analytic: f64, numeric: f64) {
        let rel = relative_error(analytic, numeric);
        self.checked += 1;
        if rel > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(rel);
            self.worst = Some((input, entry, analytic, numeric));
        }
    }
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Checks `f` (a scalar-valued function of the given inputs) at every input
/// entry.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradReport>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let loss = f(&tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut report = GradReport::default();
    let mut work = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(inputs[i].shape().to_vec());
        let analytic = grads.get(*v).unwrap_or(&zeros).clone();
        for j in 0..inputs[i].len() {
            let x0 = inputs[i].data()[j];
            work[i].data_mut()[j] = x0 + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = x0 - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = x0;
            report.record(i, j, analytic.data()[j], (up - down) / (2.0 * h));
        }
    }
    Ok(report)
}

/// Checks the parameter gradients of a model loss, sampling at most
/// `per_param` entries of each parameter tensor.
pub fn check_params<F>(
    store: &ParamStore<f64>,
    h: f64,
    per_param: usize,
    seed: u64,
    f: F,
) -> Result<GradReport>
where
    F: Fn(&Graph<'_, f64>) -> Result<Var>,
{
    let g = Graph::with_mode(store, |_| true, false, 0);
    let loss = f(&g)?;
    let grads = g.param_grads(loss)?;

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let g = Graph::eval(s);
        let loss = f(&g)?;
        Ok(g.tape.value(loss).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradReport::default();
    let mut work = store.clone();
    for (i, id) in store.ids().enumerate() {
        let n = store.get(id).len();
        let entries = sample(&mut rng, n, per_param.min(n)).into_vec();
        for j in entries {
            let analytic = grads[i].as_ref().map_or(0.0, |g| g.data()[j]);
            let x0 = store.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = x0 + h;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[j] = x0 - h;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[j] = x0;
            report.record(i, j, analytic, (up - down) / (2.0 * h));
        }
    }
    Ok(report)
}
