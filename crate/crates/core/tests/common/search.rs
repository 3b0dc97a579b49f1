//! Table-driven scorers and exhaustive sequence search.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use vidcap::decoder::{log_softmax, Hypothesis, StepScorer};

/// Logits looked up from a closure over the prefix.
pub struct TableScorer<F> {
    pub vocab: usize,
    pub eos: usize,
    pub f: F,
}

impl<F: Fn(&[usize]) -> Vec<f64>> StepScorer for TableScorer<F> {
    fn vocab_size(&self) -> usize {
        self.vocab
    }
    fn eos(&self) -> usize {
        self.eos
    }
    fn logits(&self, prefix: &[usize]) -> vidcap::Result<Vec<f64>> {
        Ok((self.f)(prefix))
    }
}

/// Pseudo-random logits that are a pure function of `(seed, prefix)`.
pub fn random_table(vocab: usize, seed: u64) -> impl Fn(&[usize]) -> Vec<f64> {
    move |prefix: &[usize]| {
        let key = prefix.iter().fold(seed.wrapping_mul(0x9E37_79B9), |h, &t| {
            h.wrapping_mul(31).wrapping_add(t as u64 + 1)
        });
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        (0..vocab)
            .map(|_| 2.0 * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect::<Vec<f64>>()
    }
}

pub fn exhaustive_best<S: StepScorer>(s: &S, max_len: usize) -> Hypothesis {
    fn walk<S: StepScorer>(
        s: &S,
        max_len: usize,
        prefix: Vec<usize>,
        lp: f64,
        best: &mut Option<Hypothesis>,
    ) {
        let lps = log_softmax(&s.logits(&prefix).unwrap());
        for (t, l) in lps.iter().enumerate() {
            let mut tokens = prefix.clone();
            tokens.push(t);
            let total = lp + l;
            if t == s.eos() || tokens.len() == max_len {
                let better = match best {
                    None => true,
                    Some(b) => total > b.log_prob || (total == b.log_prob && tokens < b.tokens),
                };
                if better {
                    *best = Some(Hypothesis {
                        tokens,
                        log_prob: total,
                        finished: true,
                    });
                }
            } else {
                walk(s, max_len, tokens, total, best);
            }
        }
    }
    let mut best = None;
    walk(s, max_len, Vec::new(), 0.0, &mut best);
    best.unwrap()
}
