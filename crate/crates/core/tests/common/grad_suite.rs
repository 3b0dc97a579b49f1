//! Central-difference checks of every tape primitive and of random
//! compositions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vidcap::tensor::gradcheck::{check_inputs, GradReport};
use vidcap::tensor::{Tape, Tensor, Var};
use vidcap::Result;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

type Body = Box<dyn Fn(&Tape<f64>, &[Var]) -> Result<Var>>;

pub struct Case {
    pub name: String,
    pub inputs: Vec<Tensor<f64>>,
    pub body: Body,
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

/// Entries pushed at least 0.2 away from zero.
fn off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let t = randn(shape, rng);
    let data = t
        .data()
        .iter()
        .map(|&x| if x < 0.0 { x - 0.2 } else { x + 0.2 })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// `sum(out ⊙ w)` for a fixed random `w`, so every output entry matters.
fn weighted_sum(tape: &Tape<f64>, out: Var, seed: u64) -> Var {
    let shape = tape.shape(out);
    let w = Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    let w = tape.constant(w);
    tape.sum_all(tape.mul(out, w))
}

fn case<F>(name: &str, inputs: Vec<Tensor<f64>>, f: F) -> Case
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var> + 'static,
{
    let seed = name
        .bytes()
        .fold(17u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64));
    Case {
        name: name.to_string(),
        inputs,
        body: Box::new(move |t, v| {
            let out = f(t, v)?;
            Ok(weighted_sum(t, out, seed))
        }),
    }
}

pub fn primitive_cases() -> Vec<Case> {
    let mut r = ChaCha8Rng::seed_from_u64(2024);
    let r = &mut r;
    let m34 = |r: &mut ChaCha8Rng| randn(&[3, 4], r);
    let bce_targets = Tensor::new(vec![6], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
    vec![
        case("add", vec![m34(r), m34(r)], |t, v| Ok(t.add(v[0], v[1]))),
        case("sub", vec![m34(r), m34(r)], |t, v| Ok(t.sub(v[0], v[1]))),
        case("mul", vec![m34(r), m34(r)], |t, v| Ok(t.mul(v[0], v[1]))),
        case("mul_self", vec![m34(r)], |t, v| Ok(t.mul(v[0], v[0]))),
        case("scale", vec![m34(r)], |t, v| Ok(t.scale(v[0], -0.7))),
        case("add_row", vec![m34(r), randn(&[4], r)], |t, v| {
            Ok(t.add_row(v[0], v[1]))
        }),
        case(
            "add_row_3d",
            vec![randn(&[2, 3, 4], r), randn(&[4], r)],
            |t, v| Ok(t.add_row(v[0], v[1])),
        ),
        case("matmul", vec![m34(r), randn(&[4, 2], r)], |t, v| {
            Ok(t.matmul(v[0], v[1]))
        }),
        case("transpose", vec![m34(r)], |t, v| Ok(t.transpose(v[0]))),
        case("relu", vec![off_zero(&[3, 4], r)], |t, v| Ok(t.relu(v[0]))),
        case("gelu", vec![m34(r)], |t, v| Ok(t.gelu(v[0]))),
        case("sigmoid", vec![m34(r)], |t, v| Ok(t.sigmoid(v[0]))),
        case("gather_rows", vec![randn(&[5, 3], r)], |t, v| {
            Ok(t.gather_rows(v[0], &[4, 0, 4, 2]))
        }),
        case(
            "concat_axis0",
            vec![randn(&[2, 3], r), randn(&[1, 3], r)],
            |t, v| Ok(t.concat(&[v[0], v[1]], 0)),
        ),
        case(
            "concat_axis1",
            vec![randn(&[2, 3], r), randn(&[2, 2], r)],
            |t, v| Ok(t.concat(&[v[0], v[1], v[0]], 1)),
        ),
        case("narrow_axis0", vec![m34(r)], |t, v| {
            Ok(t.narrow(v[0], 0, 1, 2))
        }),
        case("narrow_axis1", vec![m34(r)], |t, v| {
            Ok(t.narrow(v[0], 1, 1, 2))
        }),
        case("reshape", vec![m34(r)], |t, v| Ok(t.reshape(v[0], &[2, 6]))),
        case("mean_axis0", vec![m34(r)], |t, v| Ok(t.mean_axis(v[0], 0))),
        case("mean_axis1", vec![m34(r)], |t, v| Ok(t.mean_axis(v[0], 1))),
        case("max_axis0", vec![m34(r)], |t, v| Ok(t.max_axis(v[0], 0))),
        case("max_axis1", vec![m34(r)], |t, v| Ok(t.max_axis(v[0], 1))),
        case("sum_all", vec![m34(r)], |t, v| Ok(t.sum_all(v[0]))),
        case("dropout", vec![m34(r)], |t, v| {
            Ok(t.dropout(v[0], 0.4, &mut ChaCha8Rng::seed_from_u64(9)))
        }),
        case("softmax_axis0", vec![m34(r)], |t, v| t.softmax(v[0], 0)),
        case("softmax_axis1", vec![m34(r)], |t, v| t.softmax(v[0], 1)),
        case(
            "layer_norm",
            vec![randn(&[3, 5], r), randn(&[5], r), randn(&[5], r)],
            |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5),
        ),
        case("cross_entropy_masked", vec![randn(&[4, 6], r)], |t, v| {
            t.cross_entropy_masked(v[0], &[1, 5, 0, 3], 0)
        }),
        case("bce_with_logits", vec![randn(&[6], r)], move |t, v| {
            t.bce_with_logits(v[0], &bce_targets)
        }),
    ]
}

#[derive(Clone, Copy, Debug)]
enum Step {
    Gelu,
    Sigmoid,
    Softmax,
    LayerNorm,
    Project,
    Bias,
    MulOther,
    AddOther,
    Scale(f64),
    DoubleTranspose,
    Attention,
}

/// A seeded random chain of shape-preserving steps on a `[3,4]` input,
/// finished by masked cross-entropy.
pub fn composition_case(seed: u64) -> Case {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let menu = [
        Step::Gelu,
        Step::Sigmoid,
        Step::Softmax,
        Step::LayerNorm,
        Step::Project,
        Step::Bias,
        Step::MulOther,
        Step::AddOther,
        Step::Scale(1.3),
        Step::DoubleTranspose,
        Step::Attention,
    ];
    let steps: Vec<Step> = (0..7)
        .map(|_| menu[r.random_range(0..menu.len())])
        .collect();
    // x, W, b, gamma, beta, y
    let inputs = vec![
        randn(&[3, 4], &mut r),
        Tensor::randn(vec![4, 4], 0.5, &mut r),
        randn(&[4], &mut r),
        randn(&[4], &mut r),
        randn(&[4], &mut r),
        randn(&[3, 4], &mut r),
    ];
    let name = format!("composition_{seed}: {steps:?}");
    Case {
        name,
        inputs,
        body: Box::new(move |t, v| {
            let mut h = v[0];
            for s in &steps {
                h = match *s {
                    Step::Gelu => t.gelu(h),
                    Step::Sigmoid => t.sigmoid(h),
                    Step::Softmax => t.softmax(h, 1)?,
                    Step::LayerNorm => t.layer_norm(h, v[3], v[4], 1e-5)?,
                    Step::Project => t.matmul(h, v[1]),
                    Step::Bias => t.add_row(h, v[2]),
                    Step::MulOther => t.mul(h, v[5]),
                    Step::AddOther => t.add(h, v[5]),
                    Step::Scale(c) => t.scale(h, c),
                    Step::DoubleTranspose => t.transpose(t.transpose(h)),
                    Step::Attention => {
                        let scores = t.softmax(t.scale(t.matmul(h, t.transpose(h)), 0.5), 1)?;
                        t.matmul(scores, h)
                    }
                };
            }
            t.cross_entropy_masked(h, &[2, 0, 3], 0)
        }),
    }
}

pub fn composition_cases() -> Vec<Case> {
    (1..=3).map(composition_case).collect()
}

pub fn run(case: &Case) -> Result<GradReport> {
    check_inputs(&case.inputs, STEP, &case.body)
}
