//! Checkpoint directory: `manifest.json`, `params.bin` (little-endian `f32`
//! in manifest order), `vocab.json`, `concepts.json`, `train_captions.json`.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::model::CaptionModel;
use super::train::EvalPoint;
use crate::afs::adaptive_sample;
use crate::decoder::{GenerationRequest, Hypothesis};
use crate::tensor::{ParamStore, Tensor};
use crate::text::{detokenize, ConceptVocabulary, Vocab, EOS};
use crate::video::VideoClip;
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into `params.bin`.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: u32,
    pub step: usize,
    pub config: TrainConfig,
    pub history: Vec<EvalPoint>,
    /// Sorted by name.
    pub params: Vec<ParamEntry>,
}

/// A trained captioner with everything inference and evaluation need.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    /// Echo of the training config, decoder vocabulary size resolved.
    pub config: TrainConfig,
    pub model: CaptionModel,
    pub store: ParamStore<f64>,
    pub vocab: Vocab,
    pub concepts: ConceptVocabulary,
    pub train_captions: Vec<String>,
    pub history: Vec<EvalPoint>,
    pub step: usize,
}

impl TrainedModel {
    /// AFS, encoding, concept prediction and decoding for one raw clip.
    pub fn caption(
        &self,
        clip: &VideoClip,
        req: &GenerationRequest,
    ) -> Result<(String, Hypothesis)> {
        let selected = self.select(clip)?;
        let hyp = self.model.generate(&self.store, &selected, req)?;
        Ok((detokenize(&self.vocab.decode(hyp.words(EOS))), hyp))
    }

    /// The AFS-reduced clip the model consumes.
    pub fn select(&self, clip: &VideoClip) -> Result<VideoClip> {
        let afs = &self.config.afs;
        Ok(adaptive_sample(clip, afs.frames, afs.metric, afs.dedupe)?.0)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut names: Vec<&str> = self.store.names().iter().map(String::as_str).collect();
        names.sort_unstable();
        let mut bytes = Vec::with_capacity(self.store.num_scalars() * 4);
        let mut params = Vec::with_capacity(names.len());
        for name in names {
            let t = self.store.by_name(name).expect("listed parameter");
            params.push(ParamEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset: bytes.len(),
            });
            for &x in t.data() {
                bytes.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        let manifest = Manifest {
            format: FORMAT_VERSION,
            step: self.step,
            config: self.config.clone(),
            history: self.history.clone(),
            params,
        };
        fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        fs::write(dir.join("params.bin"), bytes)?;
        self.vocab.save(dir.join("vocab.json"))?;
        self.concepts.save(dir.join("concepts.json"))?;
        fs::write(
            dir.join("train_captions.json"),
            serde_json::to_string_pretty(&self.train_captions)?,
        )?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let read = |name: &str| {
            let p = dir.join(name);
            fs::read(&p).map_err(|e| Error::Data(format!("{}: {e}", p.display())))
        };
        let manifest: Manifest = serde_json::from_slice(&read("manifest.json")?)?;
        if manifest.format != FORMAT_VERSION {
            return Err(Error::Data(format!(
                "checkpoint format {} (expected {FORMAT_VERSION})",
                manifest.format
            )));
        }
        manifest.config.validate()?;
        let bytes = read("params.bin")?;
        let vocab = Vocab::from_json(&String::from_utf8_lossy(&read("vocab.json")?))?;
        let concepts: ConceptVocabulary = serde_json::from_slice(&read("concepts.json")?)?;
        let train_captions: Vec<String> = serde_json::from_slice(&read("train_captions.json")?)?;
        let config = manifest.config;
        if config.decoder.vocab_size != vocab.len()
            || config.encoder.concept_count != concepts.len()
        {
            return Err(Error::Data(
                "checkpoint vocabularies disagree with its config".into(),
            ));
        }

        let mut store = ParamStore::new();
        let model = CaptionModel::new(
            &config.encoder,
            &config.decoder,
            &mut store,
            &mut ChaCha8Rng::seed_from_u64(0),
        )?;
        if manifest.params.windows(2).any(|w| w[0].name >= w[1].name) {
            return Err(Error::Data(
                "manifest parameters not in ascending name order".into(),
            ));
        }
        if manifest.params.len() != store.len() {
            return Err(Error::Data(format!(
                "{} stored parameters, model has {}",
                manifest.params.len(),
                store.len()
            )));
        }
        for entry in &manifest.params {
            let n: usize = entry.shape.iter().product();
            let end = entry.offset + 4 * n;
            let raw = bytes.get(entry.offset..end).ok_or_else(|| {
                Error::Data(format!("{}: data past end of params.bin", entry.name))
            })?;
            let values: Vec<f64> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            store
                .set(&entry.name, Tensor::new(entry.shape.clone(), values))
                .map_err(Error::Data)?;
        }
        Ok(Self {
            config,
            model,
            store,
            vocab,
            concepts,
            train_captions,
            history: manifest.history,
            step: manifest.step,
        })
    }
}
