use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::TrainedModel;
use super::config::{Phase, TrainConfig};
use super::evaluate::evaluate_records;
use super::model::{CaptionModel, HEAD_PREFIX};
use crate::afs::adaptive_sample;
use crate::tensor::{
    adamw_step, clip_global_norm, global_norm, AdamWConfig, AdamWState, Graph, ParamStore, Tensor,
};
use crate::text::{
    build_concept_vocabulary, build_vocab, concept_label_vector, CaptionRecord, ConceptVocabulary,
    Split, Vocab,
};
use crate::video::VideoClip;
use crate::{Error, Result};

/// One training pair.
#[derive(Clone, Copy, Debug)]
pub struct Sample<'a> {
    pub clip: &'a VideoClip,
    pub words: &'a [usize],
    pub labels: &'a Tensor<f64>,
}

/// Batch-mean loss terms and summed parameter gradients.
#[derive(Clone, Debug)]
pub struct BatchLoss {
    pub ce: Option<f64>,
    pub bce: f64,
    pub total: f64,
    pub grads: Vec<Option<Tensor<f64>>>,
}

/// `(ce, bce, scaled total, gradients)` of one sample.
type SampleTerms = (Option<f64>, f64, f64, Vec<Option<Tensor<f64>>>);

/// Loss and gradients of `samples` under `phase`.
///
/// Every sample runs on its own tape seeded with `seed + i`; gradients are
/// summed in sample order.
pub fn batch_loss(
    model: &CaptionModel,
    store: &ParamStore<f64>,
    samples: &[Sample<'_>],
    phase: Phase,
    lambda: f64,
    head_dropout: f64,
    seed: u64,
) -> Result<BatchLoss> {
    if samples.is_empty() {
        return Err(Error::EmptyLoss);
    }
    let inv = 1.0 / samples.len() as f64;
    let parts: Vec<SampleTerms> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let end_to_end = phase == Phase::EndToEnd;
            let g = Graph::with_mode(
                store,
                move |n| end_to_end || n.starts_with(HEAD_PREFIX),
                true,
                seed.wrapping_add(i as u64),
            );
            let loss = model.sample_loss(
                &g,
                s.clip,
                end_to_end.then_some(s.words),
                s.labels,
                head_dropout,
            )?;
            let total = match loss.ce {
                Some(ce) => g.tape.add(ce, g.tape.scale(loss.bce, lambda)),
                None => loss.bce,
            };
            let total = g.tape.scale(total, inv);
            let ce = loss.ce.map(|v| g.tape.value(v).item());
            let bce = g.tape.value(loss.bce).item();
            let t = g.tape.value(total).item();
            if !t.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss on sample {i}: ce {ce:?}, bce {bce}"
                )));
            }
            Ok((ce, bce, t, g.param_grads(total)?))
        })
        .collect::<Result<_>>()?;
    let mut grads: Vec<Option<Tensor<f64>>> = vec![None; store.len()];
    let (mut ce, mut bce, mut total) = (0.0, 0.0, 0.0);
    for (c, b, t, gs) in parts {
        ce += c.unwrap_or(0.0) * inv;
        bce += b * inv;
        total += t;
        for (acc, g) in grads.iter_mut().zip(gs) {
            match (acc.as_mut(), g) {
                (Some(a), Some(g)) => a
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(x, y)| *x += y),
                (None, Some(g)) => *acc = Some(g),
                _ => {}
            }
        }
    }
    let ce = (phase == Phase::EndToEnd).then_some(ce);
    Ok(BatchLoss {
        ce,
        bce,
        total,
        grads,
    })
}

/// Clips the present gradients jointly; returns `(norm before, norm after)`.
pub fn clip_gradients(grads: &mut [Option<Tensor<f64>>], max_norm: f64) -> (f64, f64) {
    let slots: Vec<usize> = (0..grads.len()).filter(|&i| grads[i].is_some()).collect();
    let mut present: Vec<Tensor<f64>> = slots.iter().filter_map(|&i| grads[i].take()).collect();
    let before = global_norm(&present);
    let after = clip_global_norm(&mut present, max_norm);
    for (i, g) in slots.into_iter().zip(present) {
        grads[i] = Some(g);
    }
    (before, after)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    /// 1-based, counted across phases.
    pub step: usize,
    pub phase: Phase,
    pub ce: Option<f64>,
    pub bce: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub bleu4: f64,
    pub cider_d: f64,
}

/// `2ab / (a + b)`, or 0 when `a + b = 0`.
pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a + b == 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

/// Step with the best harmonic mean of BLEU-4 and `10 × CIDEr-D`; ties go to
/// the earliest step.
pub fn select_best(history: &[EvalPoint]) -> Option<usize> {
    let mut best: Option<(f64, usize)> = None;
    for p in history {
        let score = harmonic_mean(p.bleu4, 10.0 * p.cider_d);
        if best.is_none_or(|(s, step)| score > s || (score == s && p.step < step)) {
            best = Some((score, p.step));
        }
    }
    best.map(|b| b.1)
}

/// AFS-reduced training clips with their encoded captions and labels.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub records: Vec<CaptionRecord>,
    pub clips: Vec<VideoClip>,
    /// Word ids of every caption, truncated.
    pub captions: Vec<Vec<Vec<usize>>>,
    pub labels: Vec<Tensor<f64>>,
}

impl TrainingData {
    pub fn load(
        config: &TrainConfig,
        records: &[&CaptionRecord],
        root: &Path,
        vocab: &Vocab,
        cv: &ConceptVocabulary,
    ) -> Result<Self> {
        let clips = records
            .par_iter()
            .map(|r| {
                r.validate()?;
                let clip = VideoClip::load(root.join(&r.video))?;
                Ok(adaptive_sample(
                    &clip,
                    config.afs.frames,
                    config.afs.metric,
                    config.afs.dedupe,
                )?
                .0)
            })
            .collect::<Result<Vec<_>>>()?;
        let captions = records
            .iter()
            .map(|r| {
                r.tokenized()
                    .iter()
                    .map(|c| {
                        c.iter()
                            .take(config.max_caption_len)
                            .map(|w| vocab.id(w))
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let labels = records
            .iter()
            .map(|r| {
                let l: Vec<f64> = concept_label_vector(r, cv)
                    .into_iter()
                    .map(|b| if b { 1.0 } else { 0.0 })
                    .collect();
                Tensor::from_f64(vec![l.len()], &l)
            })
            .collect();
        Ok(Self {
            records: records.iter().map(|&r| r.clone()).collect(),
            clips,
            captions,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }
}

/// Two-phase trainer over one corpus.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: CaptionModel,
    pub store: ParamStore<f64>,
    pub vocab: Vocab,
    pub concepts: ConceptVocabulary,
    pub data: TrainingData,
    pub log: Vec<StepLog>,
    pub history: Vec<EvalPoint>,
    /// Parameters at the best evaluated step.
    best: Option<ParamStore<f64>>,
    eval_records: Vec<CaptionRecord>,
    root: PathBuf,
    order: Vec<usize>,
    cursor: usize,
    order_rng: ChaCha8Rng,
    caption_rng: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
    step: usize,
    phases_done: usize,
    /// Print a progress line to stderr every this many steps (0: silent).
    pub progress: usize,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

impl Trainer {
    /// Builds vocabularies from the training split, initializes the model and
    /// loads the training videos relative to `root`.
    pub fn new(config: &TrainConfig, corpus: &[CaptionRecord], root: &Path) -> Result<Self> {
        config.validate()?;
        let mut config = config.clone();
        let vocab = build_vocab(corpus, config.min_freq)?;
        let concepts = build_concept_vocabulary(corpus, config.encoder.concept_count)?;
        match config.decoder.vocab_size {
            0 => config.decoder.vocab_size = vocab.len(),
            v if v != vocab.len() => {
                return Err(Error::Config(format!(
                    "decoder vocab_size {v} but the vocabulary has {}",
                    vocab.len()
                )))
            }
            _ => {}
        }
        let mut store = ParamStore::new();
        let model = CaptionModel::new(
            &config.encoder,
            &config.decoder,
            &mut store,
            &mut stream(config.seed, 0),
        )?;
        let train: Vec<&CaptionRecord> =
            corpus.iter().filter(|r| r.split == Split::Train).collect();
        let data = TrainingData::load(&config, &train, root, &vocab, &concepts)?;
        let eval_records = corpus
            .iter()
            .filter(|r| r.split == config.eval_split)
            .cloned()
            .collect();
        let seed = config.seed;
        Ok(Self {
            config,
            model,
            store,
            vocab,
            concepts,
            data,
            log: Vec::new(),
            history: Vec::new(),
            best: None,
            eval_records,
            root: root.to_path_buf(),
            order: Vec::new(),
            cursor: 0,
            order_rng: stream(seed, 1),
            caption_rng: stream(seed, 2),
            dropout_rng: stream(seed, 3),
            step: 0,
            phases_done: 0,
            progress: 0,
        })
    }

    /// Next `batch_size` (video, caption) pairs: videos in reshuffled epoch
    /// order, one caption drawn uniformly per pair.
    fn next_batch(&mut self) -> Vec<(usize, usize)> {
        (0..self.config.batch_size)
            .map(|_| {
                if self.cursor == self.order.len() {
                    self.order = (0..self.data.len()).collect();
                    self.order.shuffle(&mut self.order_rng);
                    self.cursor = 0;
                }
                let v = self.order[self.cursor];
                self.cursor += 1;
                let c = self
                    .caption_rng
                    .random_range(0..self.data.captions[v].len());
                (v, c)
            })
            .collect()
    }

    /// Runs the next configured phase. Returns false when none is left.
    pub fn run_next_phase(&mut self) -> Result<bool> {
        let Some(pc) = self.config.phases.get(self.phases_done).cloned() else {
            return Ok(false);
        };
        let last = self.phases_done + 1 == self.config.phases.len();
        let opt = AdamWConfig {
            lr: self.config.lr,
            weight_decay: self.config.weight_decay,
            ..AdamWConfig::default()
        };
        let mut state = AdamWState::new(self.store.tensors());
        for s in 0..pc.steps {
            self.step += 1;
            let batch = self.next_batch();
            let seed = self.dropout_rng.random::<u64>();
            let samples: Vec<Sample<'_>> = batch
                .iter()
                .map(|&(v, c)| Sample {
                    clip: &self.data.clips[v],
                    words: &self.data.captions[v][c],
                    labels: &self.data.labels[v],
                })
                .collect();
            let mut out = batch_loss(
                &self.model,
                &self.store,
                &samples,
                pc.phase,
                self.config.lambda,
                pc.head_dropout,
                seed,
            )
            .map_err(|e| step_error(e, self.step))?;
            if !out.total.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at step {}",
                    self.step
                )));
            }
            let (grad_norm, clipped_norm) = clip_gradients(&mut out.grads, self.config.grad_clip);
            adamw_step(self.store.tensors_mut(), &out.grads, &mut state, &opt)
                .map_err(|e| step_error(e, self.step))?;
            self.log.push(StepLog {
                step: self.step,
                phase: pc.phase,
                ce: out.ce,
                bce: out.bce,
                total: out.total,
                grad_norm,
                clipped_norm,
            });
            if self.progress > 0 && self.step.is_multiple_of(self.progress) {
                eprintln!(
                    "step {} {:?} ce {:?} bce {:.5} |g| {:.4}",
                    self.step, pc.phase, out.ce, out.bce, grad_norm
                );
            }
            let at_end = last && s + 1 == pc.steps;
            let periodic = self.config.eval_every > 0 && (s + 1) % self.config.eval_every == 0;
            if pc.phase == Phase::EndToEnd && (at_end || periodic) {
                self.evaluate_now()?;
            }
        }
        self.phases_done += 1;
        Ok(true)
    }

    fn evaluate_now(&mut self) -> Result<()> {
        if self.eval_records.is_empty() {
            return Ok(());
        }
        let snapshot = self.snapshot(self.store.clone());
        let eval = evaluate_records(
            &snapshot,
            &self.eval_records,
            &self.root,
            &self.config.decode,
            false,
        )?;
        self.history.push(EvalPoint {
            step: self.step,
            bleu4: eval.report.bleu4,
            cider_d: eval.report.cider_d,
        });
        if select_best(&self.history) == Some(self.step) {
            self.best = Some(snapshot.store);
        }
        Ok(())
    }

    fn snapshot(&self, store: ParamStore<f64>) -> TrainedModel {
        let train_captions = self
            .data
            .records
            .iter()
            .flat_map(|r| r.captions.iter().cloned())
            .collect();
        TrainedModel {
            config: self.config.clone(),
            model: self.model.clone(),
            store,
            vocab: self.vocab.clone(),
            concepts: self.concepts.clone(),
            train_captions,
            history: self.history.clone(),
            step: self.step,
        }
    }

    /// Runs every remaining phase.
    pub fn run(&mut self) -> Result<()> {
        while self.run_next_phase()? {}
        Ok(())
    }

    /// The model at the best evaluated step, or the final one when nothing
    /// was evaluated.
    pub fn best_model(&self) -> TrainedModel {
        let store = self.best.clone().unwrap_or_else(|| self.store.clone());
        let mut m = self.snapshot(store);
        if let Some(step) = select_best(&self.history) {
            m.step = step;
        }
        m
    }

    pub fn final_model(&self) -> TrainedModel {
        self.snapshot(self.store.clone())
    }
}

fn step_error(e: Error, step: usize) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("step {step}: {m}")),
        Error::NonFiniteInput | Error::NonFiniteGradient => {
            Error::Numeric(format!("step {step}: {e}"))
        }
        other => other,
    }
}

/// Trains on `corpus` (videos resolved against `root`) and returns the
/// selected model with the per-step log.
pub fn train(
    config: &TrainConfig,
    corpus: &[CaptionRecord],
    root: &Path,
) -> Result<(TrainedModel, Vec<StepLog>)> {
    let mut t = Trainer::new(config, corpus, root)?;
    t.run()?;
    Ok((t.best_model(), t.log))
}
