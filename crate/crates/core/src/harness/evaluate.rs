use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::TrainedModel;
use crate::decoder::GenerationRequest;
use crate::metrics::{evaluate_captions, EvalReport};
use crate::text::{build_vocab, CaptionRecord, Split};
use crate::video::VideoClip;
use crate::{Error, Result};

/// One line of a predictions file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prediction {
    pub id: String,
    pub caption: String,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: EvalReport,
    /// In corpus order, failed items left out.
    pub predictions: Vec<Prediction>,
    /// `(id, message)` of every item that could not be captioned.
    pub errors: Vec<(String, String)>,
}

/// Captions every record's video (paths relative to `root`) and scores the
/// results against the record captions.
pub fn evaluate_records(
    tm: &TrainedModel,
    records: &[CaptionRecord],
    root: &Path,
    req: &GenerationRequest,
    with_histogram: bool,
) -> Result<Evaluation> {
    req.validate(tm.vocab.len())?;
    let outcomes: Vec<Result<std::result::Result<String, String>>> = records
        .par_iter()
        .map(|r| {
            let clip = match VideoClip::load(root.join(&r.video)) {
                Ok(c) => c,
                Err(e @ (Error::Io(_) | Error::Data(_))) => {
                    return Ok(Err(format!("{}: {e}", r.video)))
                }
                Err(e) => return Err(e),
            };
            Ok(Ok(tm.caption(&clip, req)?.0))
        })
        .collect();
    let mut predictions = Vec::new();
    let mut refs = Vec::new();
    let mut errors = Vec::new();
    for (r, outcome) in records.iter().zip(outcomes) {
        match outcome? {
            Ok(caption) => {
                predictions.push(Prediction {
                    id: r.id.clone(),
                    caption,
                });
                refs.push(r.captions.clone());
            }
            Err(msg) => errors.push((r.id.clone(), msg)),
        }
    }
    if predictions.is_empty() {
        return Err(Error::Data(format!(
            "none of {} items could be evaluated",
            records.len()
        )));
    }
    let preds: Vec<&str> = predictions.iter().map(|p| p.caption.as_str()).collect();
    let mut report = evaluate_captions(
        &preds,
        &refs,
        &tm.train_captions,
        tm.vocab.content_len(),
        with_histogram,
    )?;
    report.failed = errors.len();
    Ok(Evaluation {
        report,
        predictions,
        errors,
    })
}

/// Scores stored predictions against reference records. References without a
/// prediction count as failed; predictions for unknown ids are an error.
pub fn score_predictions(
    preds: &[Prediction],
    refs: &[CaptionRecord],
    train: &[CaptionRecord],
    with_histogram: bool,
) -> Result<EvalReport> {
    let mut by_id: BTreeMap<&str, &str> = BTreeMap::new();
    for p in preds {
        if by_id.insert(&p.id, &p.caption).is_some() {
            return Err(Error::Data(format!("duplicate prediction for {:?}", p.id)));
        }
    }
    let known: BTreeMap<&str, &CaptionRecord> = refs.iter().map(|r| (r.id.as_str(), r)).collect();
    if let Some(p) = preds.iter().find(|p| !known.contains_key(p.id.as_str())) {
        return Err(Error::Data(format!("prediction for unknown id {:?}", p.id)));
    }
    let mut captions = Vec::new();
    let mut references = Vec::new();
    for r in refs {
        r.validate()?;
        if let Some(c) = by_id.get(r.id.as_str()) {
            captions.push(*c);
            references.push(r.captions.clone());
        }
    }
    let train_split: Vec<CaptionRecord> = train
        .iter()
        .filter(|r| r.split == Split::Train)
        .cloned()
        .collect();
    let train_records = if train_split.is_empty() {
        train
            .iter()
            .map(|r| CaptionRecord {
                split: Split::Train,
                ..r.clone()
            })
            .collect()
    } else {
        train_split
    };
    let vocab = build_vocab(&train_records, 1)?;
    let train_captions: Vec<&str> = train_records
        .iter()
        .flat_map(|r| r.captions.iter().map(String::as_str))
        .collect();
    let mut report = evaluate_captions(
        &captions,
        &references,
        &train_captions,
        vocab.content_len(),
        with_histogram,
    )?;
    report.failed = refs.len() - captions.len();
    Ok(report)
}
