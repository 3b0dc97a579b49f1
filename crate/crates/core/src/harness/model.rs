use rand::Rng;

use crate::decoder::{
    generate, CaptionDecoder, DecoderConfig, DecoderScorer, GenerationRequest, Hypothesis,
};
use crate::encoder::{ConceptHead, EncoderConfig, VideoEncoder};
use crate::tensor::{Graph, ParamStore, Tensor, Var};
use crate::text::{EOS, PAD};
use crate::video::VideoClip;
use crate::{Error, Result, Scalar};

/// The captioning network on one parameter store.
#[derive(Clone, Debug)]
pub struct CaptionModel {
    pub encoder: VideoEncoder,
    pub head: ConceptHead,
    pub decoder: CaptionDecoder,
}

/// Loss nodes of one (video, caption) pair.
#[derive(Clone, Copy, Debug)]
pub struct SampleLoss {
    /// Absent when the decoder was not run.
    pub ce: Option<Var>,
    pub bce: Var,
}

/// Head prefix of every concept-head parameter name.
pub const HEAD_PREFIX: &str = "concept.";

impl CaptionModel {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        encoder: &EncoderConfig,
        decoder: &DecoderConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        if encoder.token_dim != decoder.hidden {
            return Err(Error::Config(format!(
                "encoder token width {} differs from decoder hidden width {}",
                encoder.token_dim, decoder.hidden
            )));
        }
        let enc = VideoEncoder::new(encoder, store, rng)?;
        let head = ConceptHead::new(
            store,
            "concept",
            encoder.token_dim,
            encoder.concept_hidden,
            encoder.concept_count,
            rng,
        );
        let dec = CaptionDecoder::new(decoder, encoder.concept_count, store, rng)?;
        Ok(Self {
            encoder: enc,
            head,
            decoder: dec,
        })
    }

    pub fn concepts(&self) -> usize {
        self.head.concepts()
    }

    /// BCE against `labels` and, when `words` is given, teacher-forced CE on
    /// `[words.., EOS]`.
    pub fn sample_loss<T: Scalar>(
        &self,
        g: &Graph<'_, T>,
        clip: &VideoClip,
        words: Option<&[usize]>,
        labels: &Tensor<T>,
        head_dropout: f64,
    ) -> Result<SampleLoss> {
        let enc = self.encoder.encode(g, clip)?;
        let concept = self.head.forward(g, enc.tokens, head_dropout);
        let bce = g.tape.bce_with_logits(concept.logits, labels)?;
        let ce = match words {
            None => None,
            Some(words) => {
                let logits = self.decoder.forward(g, concept.probs, words, enc.tokens)?;
                let targets: Vec<usize> = words.iter().copied().chain([EOS]).collect();
                Some(g.tape.cross_entropy_masked(logits, &targets, PAD)?)
            }
        };
        Ok(SampleLoss { ce, bce })
    }

    /// Concept probabilities and encoder tokens in evaluation mode.
    pub fn encode<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        clip: &VideoClip,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let g = Graph::eval(store);
        let enc = self.encoder.encode(&g, clip)?;
        let concept = self.head.forward(&g, enc.tokens, 0.0);
        Ok((g.tape.value(concept.probs), g.tape.value(enc.tokens)))
    }

    /// Evaluation-mode teacher-forced CE of one caption.
    pub fn caption_ce<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        clip: &VideoClip,
        words: &[usize],
    ) -> Result<f64> {
        let g = Graph::eval(store);
        let labels = Tensor::zeros(vec![self.concepts()]);
        let loss = self.sample_loss(&g, clip, Some(words), &labels, 0.0)?;
        Ok(g.tape.value(loss.ce.expect("decoder ran")).item().as_f64())
    }

    pub fn generate<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        clip: &VideoClip,
        req: &GenerationRequest,
    ) -> Result<Hypothesis> {
        req.validate(self.decoder.config.vocab_size)?;
        let (semantic, memory) = self.encode(store, clip)?;
        let scorer = DecoderScorer {
            decoder: &self.decoder,
            store,
            semantic,
            memory,
            eos: EOS,
        };
        generate(&scorer, req)
    }
}
