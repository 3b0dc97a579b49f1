//! Beam search and sampling over any next-token scorer.

use std::cmp::Ordering;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Graph, ParamStore, Tensor};
use crate::{Error, Result, Scalar};

use super::CaptionDecoder;

/// Next-token logits given the tokens emitted so far.
pub trait StepScorer {
    fn vocab_size(&self) -> usize;
    fn eos(&self) -> usize;
    fn logits(&self, prefix: &[usize]) -> Result<Vec<f64>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Beam,
    Greedy,
    TopK,
    TopP,
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "beam" => Ok(Self::Beam),
            "greedy" => Ok(Self::Greedy),
            "topk" => Ok(Self::TopK),
            "topp" => Ok(Self::TopP),
            other => Err(Error::Config(format!(
                "unknown strategy {other:?} (beam, greedy, topk, topp)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationRequest {
    pub strategy: Strategy,
    pub beam_width: usize,
    pub k: usize,
    pub p: f64,
    pub temperature: f64,
    /// Most tokens emitted, EOS included.
    pub max_len: usize,
    pub seed: u64,
    /// Beam scores are `log p / len^alpha`; 0 ranks by raw log-probability.
    pub length_penalty: f64,
}

impl Default for GenerationRequest {
    fn default() -> Self {
        Self {
            strategy: Strategy::Beam,
            beam_width: 3,
            k: 20,
            p: 0.95,
            temperature: 1.0,
            max_len: 20,
            seed: 0,
            length_penalty: 0.0,
        }
    }
}

impl GenerationRequest {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.beam_width == 0 {
            return bad("beam width must be >= 1".into());
        }
        if self.strategy == Strategy::TopK && !(1..=vocab_size).contains(&self.k) {
            return bad(format!("k = {} outside 1..={vocab_size}", self.k));
        }
        if self.strategy == Strategy::TopP && !(self.p > 0.0 && self.p <= 1.0) {
            return bad(format!("p = {} outside (0, 1]", self.p));
        }
        if self.max_len == 0 {
            return bad("max_len must be >= 1".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature {} must be positive", self.temperature));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Hypothesis {
    /// Emitted ids, ending in EOS when the model stopped on its own.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Tokens without the trailing EOS.
    pub fn words(&self, eos: usize) -> &[usize] {
        match self.tokens.split_last() {
            Some((&last, rest)) if last == eos => rest,
            _ => &self.tokens,
        }
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

fn check_logits(logits: &[f64], vocab: usize) -> Result<()> {
    if logits.len() != vocab {
        return Err(Error::Shape(format!(
            "{} logits for vocabulary of {vocab}",
            logits.len()
        )));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    Ok(())
}

/// Higher score first, then the lexicographically smaller sequence.
fn rank(a: &(f64, Hypothesis), b: &(f64, Hypothesis)) -> Ordering {
    b.0.partial_cmp(&a.0)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.1.tokens.cmp(&b.1.tokens))
}

fn beam_score(h: &Hypothesis, alpha: f64) -> f64 {
    if alpha == 0.0 {
        h.log_prob
    } else {
        h.log_prob / (h.tokens.len() as f64).powf(alpha)
    }
}

/// Length-synchronous beam search. Returns the best finished hypothesis and
/// the finished pool, best first.
pub fn generate_beam<S: StepScorer + ?Sized>(
    scorer: &S,
    req: &GenerationRequest,
) -> Result<(Hypothesis, Vec<Hypothesis>)> {
    let vocab = scorer.vocab_size();
    req.validate(vocab)?;
    let eos = scorer.eos();
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    }];
    let mut done: Vec<(f64, Hypothesis)> = Vec::new();
    for step in 0..req.max_len {
        let mut candidates = Vec::with_capacity(live.len() * vocab);
        for h in &live {
            let logits = scorer.logits(&h.tokens)?;
            check_logits(&logits, vocab)?;
            for (tok, lp) in log_softmax(&logits).into_iter().enumerate() {
                let mut tokens = h.tokens.clone();
                tokens.push(tok);
                let finished = tok == eos || step + 1 == req.max_len;
                let next = Hypothesis {
                    tokens,
                    log_prob: h.log_prob + lp,
                    finished,
                };
                candidates.push((beam_score(&next, req.length_penalty), next));
            }
        }
        candidates.sort_by(rank);
        candidates.truncate(req.beam_width);
        live.clear();
        for (score, h) in candidates {
            if h.finished {
                done.push((score, h));
            } else {
                live.push(h);
            }
        }
        if live.is_empty() {
            break;
        }
        // with raw log-probabilities a live prefix can only lose score
        if req.length_penalty == 0.0 {
            let best_done = done.iter().map(|d| d.0).fold(f64::NEG_INFINITY, f64::max);
            if live.iter().all(|h| h.log_prob < best_done) {
                break;
            }
        }
    }
    if done.is_empty() {
        done = live
            .into_iter()
            .map(|h| (beam_score(&h, req.length_penalty), h))
            .collect();
    }
    done.sort_by(rank);
    let pool: Vec<Hypothesis> = done.into_iter().map(|d| d.1).collect();
    Ok((pool[0].clone(), pool))
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Draws one token from `softmax(logits / temperature)` restricted as the
/// strategy prescribes. Beam is treated as greedy.
pub fn sample_token<R: Rng + ?Sized>(
    logits: &[f64],
    req: &GenerationRequest,
    rng: &mut R,
) -> usize {
    let scaled: Vec<f64> = logits.iter().map(|z| z / req.temperature).collect();
    if matches!(req.strategy, Strategy::Greedy | Strategy::Beam) {
        return argmax(&scaled);
    }
    let probs: Vec<f64> = log_softmax(&scaled).into_iter().map(f64::exp).collect();
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| {
        probs[b]
            .partial_cmp(&probs[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let keep = match req.strategy {
        Strategy::TopK => req.k.min(order.len()),
        _ => {
            let mut mass = 0.0;
            let mut n = order.len();
            for (i, &t) in order.iter().enumerate() {
                mass += probs[t];
                if mass >= req.p {
                    n = i + 1;
                    break;
                }
            }
            n
        }
    };
    let kept = &order[..keep];
    if keep == 1 {
        return kept[0];
    }
    let weights: Vec<f64> = kept.iter().map(|&t| probs[t]).collect();
    match WeightedIndex::new(&weights) {
        Ok(dist) => kept[dist.sample(rng)],
        Err(_) => kept[0],
    }
}

/// Token-by-token decoding with a seeded generator.
pub fn generate_sample<S: StepScorer + ?Sized>(
    scorer: &S,
    req: &GenerationRequest,
) -> Result<Hypothesis> {
    let vocab = scorer.vocab_size();
    req.validate(vocab)?;
    let eos = scorer.eos();
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    let mut h = Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    };
    while !h.finished {
        let logits = scorer.logits(&h.tokens)?;
        check_logits(&logits, vocab)?;
        let tok = sample_token(&logits, req, &mut rng);
        let scaled: Vec<f64> = logits.iter().map(|z| z / req.temperature).collect();
        h.log_prob += log_softmax(&scaled)[tok];
        h.tokens.push(tok);
        h.finished = tok == eos || h.tokens.len() == req.max_len;
    }
    Ok(h)
}

/// Dispatches on the request strategy.
pub fn generate<S: StepScorer + ?Sized>(scorer: &S, req: &GenerationRequest) -> Result<Hypothesis> {
    match req.strategy {
        Strategy::Beam => generate_beam(scorer, req).map(|r| r.0),
        _ => generate_sample(scorer, req),
    }
}

/// Runs the decoder from scratch on every prefix against fixed concept
/// probabilities and encoder tokens.
pub struct DecoderScorer<'a, T> {
    pub decoder: &'a CaptionDecoder,
    pub store: &'a ParamStore<T>,
    pub semantic: Tensor<T>,
    pub memory: Tensor<T>,
    pub eos: usize,
}

impl<T: Scalar> StepScorer for DecoderScorer<'_, T> {
    fn vocab_size(&self) -> usize {
        self.decoder.config.vocab_size
    }

    fn eos(&self) -> usize {
        self.eos
    }

    fn logits(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let g = Graph::eval(self.store);
        let s = g.constant(self.semantic.clone());
        let m = g.constant(self.memory.clone());
        let logits = g
            .tape
            .value_ref(self.decoder.forward(&g, s, prefix, m)?)
            .clone();
        Ok(logits
            .row(prefix.len())
            .iter()
            .map(|z| z.as_f64())
            .collect())
    }
}
