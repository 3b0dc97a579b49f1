//! Caption similarity and diversity metrics.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::text::{normalize, normalize_and_tokenize, pos_tag};
use crate::{Error, Result};

/// Counts of every n-gram of one order.
pub type NGramCounts<'a> = BTreeMap<&'a [String], usize>;

pub fn ngram_counts(tokens: &[String], n: usize) -> NGramCounts<'_> {
    let mut m = BTreeMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped matches of `pred` against the per-n-gram maximum over `refs`, and
/// the number of n-grams in `pred`.
fn clipped_matches(pred: &[String], refs: &[&[String]], n: usize) -> (usize, usize) {
    let counts = ngram_counts(pred, n);
    let mut max_ref: BTreeMap<&[String], usize> = BTreeMap::new();
    for r in refs {
        for (g, c) in ngram_counts(r, n) {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(c);
        }
    }
    let matched = counts
        .iter()
        .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, pred.len().saturating_sub(n - 1))
}

/// Reference length used in the brevity penalty.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RefLength {
    /// Closest to the candidate length, the shorter on ties.
    #[default]
    Closest,
    Shortest,
}

fn effective_ref_len(c: usize, refs: &[&[String]], rule: RefLength) -> usize {
    match rule {
        RefLength::Shortest => refs.iter().map(|r| r.len()).min().unwrap_or(0),
        RefLength::Closest => refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(c), l))
            .unwrap_or(0),
    }
}

fn bleu_from_stats(
    matched: &[usize; 4],
    total: &[usize; 4],
    c: usize,
    r: usize,
    epsilon: Option<f64>,
) -> f64 {
    let mut log_sum = 0.0;
    for n in 0..4 {
        let p = if total[n] == 0 {
            0.0
        } else {
            matched[n] as f64 / total[n] as f64
        };
        let p = match epsilon {
            Some(eps) if p == 0.0 => eps,
            _ => p,
        };
        if p == 0.0 {
            return 0.0;
        }
        log_sum += p.ln();
    }
    if c == 0 {
        return 0.0;
    }
    let bp = if c >= r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    bp * (log_sum / 4.0).exp() * 100.0
}

fn check_pairs<P, R>(preds: &[P], refs: &[Vec<R>]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::Data("no predictions to score".into()));
    }
    if preds.len() != refs.len() {
        return Err(Error::Data(format!(
            "{} predictions but {} reference sets",
            preds.len(),
            refs.len()
        )));
    }
    if let Some(i) = refs.iter().position(Vec::is_empty) {
        return Err(Error::Data(format!("item {i} has no references")));
    }
    Ok(())
}

/// Corpus BLEU-4 in `[0, 100]`.
pub fn bleu4_corpus(preds: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> Result<f64> {
    bleu4_corpus_with(preds, refs, RefLength::Closest)
}

pub fn bleu4_corpus_with(
    preds: &[Vec<String>],
    refs: &[Vec<Vec<String>>],
    rule: RefLength,
) -> Result<f64> {
    check_pairs(preds, refs)?;
    let mut matched = [0; 4];
    let mut total = [0; 4];
    let (mut c, mut r) = (0, 0);
    for (p, rs) in preds.iter().zip(refs) {
        let rs: Vec<&[String]> = rs.iter().map(Vec::as_slice).collect();
        for n in 1..=4 {
            let (m, t) = clipped_matches(p, &rs, n);
            matched[n - 1] += m;
            total[n - 1] += t;
        }
        c += p.len();
        r += effective_ref_len(p.len(), &rs, rule);
    }
    Ok(bleu_from_stats(&matched, &total, c, r, None))
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0; b.len() + 1];
    let mut cur = vec![0; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Sentence ROUGE-L F-score in `[0, 1]`, best over references.
pub fn rouge_l_sentence(pred: &[String], refs: &[Vec<String>], beta: f64) -> f64 {
    let b2 = beta * beta;
    refs.iter()
        .map(|r| {
            let l = lcs(pred, r) as f64;
            if l == 0.0 {
                return 0.0;
            }
            let p = l / pred.len() as f64;
            let rec = l / r.len() as f64;
            (1.0 + b2) * p * rec / (rec + b2 * p)
        })
        .fold(0.0, f64::max)
}

/// Mean ROUGE-L in `[0, 100]`.
pub fn rouge_l(preds: &[Vec<String>], refs: &[Vec<Vec<String>>], beta: f64) -> Result<f64> {
    check_pairs(preds, refs)?;
    let sum: f64 = preds
        .iter()
        .zip(refs)
        .map(|(p, rs)| rouge_l_sentence(p, rs, beta))
        .sum();
    Ok(sum / preds.len() as f64 * 100.0)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CiderScore {
    pub score: f64,
    pub per_item: Vec<f64>,
}

struct TfIdf<'a> {
    vec: BTreeMap<&'a [String], f64>,
    norm: f64,
}

fn tfidf<'a>(
    tokens: &'a [String],
    n: usize,
    log_m: f64,
    df: &BTreeMap<&[String], usize>,
) -> TfIdf<'a> {
    let mut vec = BTreeMap::new();
    let mut norm = 0.0;
    for (g, c) in ngram_counts(tokens, n) {
        let idf = log_m - (df.get(g).copied().unwrap_or(0).max(1) as f64).ln();
        let v = c as f64 * idf;
        norm += v * v;
        vec.insert(g, v);
    }
    TfIdf {
        vec,
        norm: norm.sqrt(),
    }
}

/// CIDEr-D: idf-weighted n-gram cosine with per-reference clipping and a
/// Gaussian length penalty, averaged over `n = 1..=4`, times 10.
pub fn cider_d(preds: &[Vec<String>], refs: &[Vec<Vec<String>>], sigma: f64) -> Result<CiderScore> {
    check_pairs(preds, refs)?;
    let m = preds.len() as f64;
    let mut per_item = vec![0.0; preds.len()];
    for n in 1..=4 {
        let mut df: BTreeMap<&[String], usize> = BTreeMap::new();
        for rs in refs {
            let seen: BTreeSet<&[String]> = rs
                .iter()
                .flat_map(|r| ngram_counts(r, n).into_keys())
                .collect();
            for g in seen {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        for (i, (p, rs)) in preds.iter().zip(refs).enumerate() {
            let hyp = tfidf(p, n, m.ln(), &df);
            let mut acc = 0.0;
            for r in rs {
                let rv = tfidf(r, n, m.ln(), &df);
                let mut dot = 0.0;
                for (g, &h) in &hyp.vec {
                    if let Some(&x) = rv.vec.get(g) {
                        dot += h.min(x) * x;
                    }
                }
                let cos = if hyp.norm == 0.0 || rv.norm == 0.0 {
                    0.0
                } else {
                    dot / (hyp.norm * rv.norm)
                };
                let delta = p.len() as f64 - r.len() as f64;
                acc += cos * (-(delta * delta) / (2.0 * sigma * sigma)).exp();
            }
            per_item[i] += acc / rs.len() as f64 / 4.0 * 10.0;
        }
    }
    let score = per_item.iter().sum::<f64>() / m;
    Ok(CiderScore { score, per_item })
}

/// Zero precisions are replaced by this before the geometric mean.
pub const SELF_BLEU_EPSILON: f64 = 1e-9;

/// Sentence BLEU-4 of `pred` against `refs`, with zero precisions smoothed to
/// `epsilon`.
pub fn sentence_bleu4(pred: &[String], refs: &[&[String]], epsilon: f64) -> f64 {
    let mut matched = [0; 4];
    let mut total = [0; 4];
    for n in 1..=4 {
        let (m, t) = clipped_matches(pred, refs, n);
        matched[n - 1] = m;
        total[n - 1] = t;
    }
    let r = effective_ref_len(pred.len(), refs, RefLength::Closest);
    bleu_from_stats(&matched, &total, pred.len(), r, Some(epsilon))
}

/// Mean BLEU-4 of each prediction against all the others.
pub fn self_bleu(preds: &[Vec<String>]) -> Result<f64> {
    if preds.len() < 2 {
        return Err(Error::Data(format!(
            "self-BLEU needs at least 2 predictions, got {}",
            preds.len()
        )));
    }
    let mut sum = 0.0;
    for (i, p) in preds.iter().enumerate() {
        let others: Vec<&[String]> = preds
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, q)| q.as_slice())
            .collect();
        sum += sentence_bleu4(p, &others, SELF_BLEU_EPSILON);
    }
    Ok(sum / preds.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityStats {
    pub novel_pct: f64,
    pub unique_pct: f64,
    pub vocab_usage_pct: f64,
}

/// Diversity percentages over normalized captions.
/// Vocabulary usage is capped at 100.
pub fn diversity_stats<S: AsRef<str>, U: AsRef<str>>(
    preds: &[S],
    train_captions: &[U],
    train_vocab_size: usize,
) -> Result<DiversityStats> {
    if train_vocab_size == 0 {
        return Err(Error::Data("training vocabulary is empty".into()));
    }
    if preds.is_empty() {
        return Err(Error::Data("no predictions to score".into()));
    }
    let train: HashSet<String> = train_captions
        .iter()
        .map(|c| normalize(c.as_ref()))
        .collect();
    let norm: Vec<String> = preds.iter().map(|p| normalize(p.as_ref())).collect();
    let n = norm.len() as f64;
    let novel = norm.iter().filter(|p| !train.contains(*p)).count() as f64;
    let unique = norm.iter().collect::<HashSet<_>>().len() as f64;
    let words: HashSet<&str> = norm
        .iter()
        .flat_map(|p| p.split(' '))
        .filter(|w| !w.is_empty())
        .collect();
    Ok(DiversityStats {
        novel_pct: novel / n * 100.0,
        unique_pct: unique / n * 100.0,
        vocab_usage_pct: (words.len() as f64 / train_vocab_size as f64 * 100.0).min(100.0),
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternCount {
    pub pattern: String,
    pub count: usize,
}

/// Tag patterns (`DET-NOUN-VERB`), most frequent first, ties by pattern.
pub fn pos_structure_histogram(preds: &[Vec<String>]) -> Vec<PatternCount> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for p in preds {
        let pattern = pos_tag(p)
            .iter()
            .map(|t| t.as_str())
            .collect::<Vec<_>>()
            .join("-");
        *counts.entry(pattern).or_insert(0) += 1;
    }
    let mut out: Vec<PatternCount> = counts
        .into_iter()
        .map(|(pattern, count)| PatternCount { pattern, count })
        .collect();
    out.sort_by(|a, b| {
        b.count
            .cmp(&a.count)
            .then_with(|| a.pattern.cmp(&b.pattern))
    });
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub items: usize,
    /// Items that could not be evaluated.
    pub failed: usize,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider_d: f64,
    /// Absent with fewer than two predictions.
    pub self_bleu: Option<f64>,
    pub novel_pct: f64,
    pub unique_pct: f64,
    pub vocab_usage_pct: f64,
    pub distinct_patterns: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pos_histogram: Option<Vec<PatternCount>>,
}

pub const ROUGE_BETA: f64 = 1.2;
pub const CIDER_SIGMA: f64 = 6.0;

/// Every metric over raw caption strings.
pub fn evaluate_captions<S: AsRef<str>, R: AsRef<str>, U: AsRef<str>>(
    preds: &[S],
    refs: &[Vec<R>],
    train_captions: &[U],
    train_vocab_size: usize,
    with_histogram: bool,
) -> Result<EvalReport> {
    let p: Vec<Vec<String>> = preds
        .iter()
        .map(|s| normalize_and_tokenize(s.as_ref()))
        .collect();
    let r: Vec<Vec<Vec<String>>> = refs
        .iter()
        .map(|rs| {
            rs.iter()
                .map(|s| normalize_and_tokenize(s.as_ref()))
                .collect()
        })
        .collect();
    let diversity = diversity_stats(preds, train_captions, train_vocab_size)?;
    let histogram = pos_structure_histogram(&p);
    Ok(EvalReport {
        items: p.len(),
        failed: 0,
        bleu4: bleu4_corpus(&p, &r)?,
        rouge_l: rouge_l(&p, &r, ROUGE_BETA)?,
        cider_d: cider_d(&p, &r, CIDER_SIGMA)?.score,
        self_bleu: if p.len() >= 2 {
            Some(self_bleu(&p)?)
        } else {
            None
        },
        novel_pct: diversity.novel_pct,
        unique_pct: diversity.unique_pct,
        vocab_usage_pct: diversity.vocab_usage_pct,
        distinct_patterns: histogram.len(),
        pos_histogram: with_histogram.then_some(histogram),
    })
}
