//! The full video QA model: encoder, text encoder, fuser with frame
//! selection, and answer decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionConfig;
use crate::autodiff::Var;
use crate::decoder::{decoder_memory, AnswerDecoder, TaskMode};
use crate::encoder::{EncoderConfig, EncoderVariant, VideoEncoder};
use crate::error::{Error, Result};
use crate::fuser::{select, CrossModalFuser, InteractionMap, SampleSelection, SamplerMode};
use crate::params::{Graph, ParamStore};
use crate::synthetic::{SyntheticConfig, SyntheticSample};
use crate::text::TextEncoder;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    /// Heads for the text encoder, fuser, and decoder. The video encoder uses
    /// one head per window size.
    pub n_heads: usize,
    pub window_sizes: Vec<usize>,
    pub leap_step: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub ffn_mult: usize,
    pub sampler: SamplerMode,
    /// Interactions sampled per question (N).
    pub num_samples: usize,
    pub encoder_variant: EncoderVariant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            window_sizes: vec![1, 3, 5, 7],
            leap_step: 4,
            encoder_depth: 1,
            decoder_depth: 1,
            ffn_mult: 4,
            sampler: SamplerMode::Adaptive,
            num_samples: 10,
            encoder_variant: EncoderVariant::Full,
        }
    }
}

impl ModelConfig {
    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            d_model: self.d_model,
            window_sizes: self.window_sizes.clone(),
            leap_step: self.leap_step,
            depth: self.encoder_depth,
        }
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
        }
    }

    /// Checks the model against the data it will see.
    pub fn validate(&self, data: &SyntheticConfig) -> Result<()> {
        self.attention().validate()?;
        self.encoder().validate(Some(data.num_frames))?;
        if self.num_samples == 0 {
            return Err(Error::config("num_samples (N) must be >= 1"));
        }
        if self.decoder_depth == 0 || self.ffn_mult == 0 {
            return Err(Error::config("decoder_depth and ffn_mult must be >= 1"));
        }
        Ok(())
    }
}

/// Everything one forward pass produces.
#[derive(Clone, Debug)]
pub struct Forward {
    /// `1 x |answers|`.
    pub logits: Var,
    pub selection: SampleSelection,
    pub map: InteractionMap,
    /// Encoder output, `T x d`.
    pub encoded: Var,
    /// Fused frames, `T x d`.
    pub fused: Var,
}

#[derive(Clone, Debug)]
pub struct RaFormer {
    pub cfg: ModelConfig,
    pub data: SyntheticConfig,
    pub encoder: VideoEncoder,
    pub text: TextEncoder,
    pub fuser: CrossModalFuser,
    pub decoder: AnswerDecoder,
}

impl RaFormer {
    pub fn new(cfg: ModelConfig, data: SyntheticConfig) -> Result<Self> {
        cfg.validate(&data)?;
        data.validate()?;
        let attn = cfg.attention();
        Ok(Self {
            encoder: VideoEncoder::new("encoder", cfg.encoder(), cfg.encoder_variant, data.d_in, data.num_objects)?,
            text: TextEncoder::new("text", attn, data.vocab_size(), data.cls_token())?,
            fuser: CrossModalFuser::new("fuser", attn),
            decoder: AnswerDecoder::new("decoder", attn, cfg.decoder_depth, cfg.ffn_mult, data.task, data.num_answers())?,
            cfg,
            data,
        })
    }

    /// Fresh parameters; identical seeds give identical stores.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.encoder.init(&mut store, &mut rng);
        self.text.init(&mut store, &mut rng);
        self.fuser.init(&mut store, &mut rng);
        self.decoder.init(&mut store, &mut rng);
        store
    }

    /// Same weights, different number of sampled interactions.
    pub fn with_num_samples(&self, n: usize) -> Result<Self> {
        let mut cfg = self.cfg.clone();
        cfg.num_samples = n;
        Self::new(cfg, self.data.clone())
    }

    pub fn forward(&self, g: &mut Graph, sample: &SyntheticSample) -> Result<Forward> {
        let encoded = self.encoder.encode(g, &sample.video)?;
        let with_cls = self.cfg.sampler == SamplerMode::Cls;
        let question = self.text.encode_question(g, &sample.question_tokens, with_cls)?;
        let fused = self.fuser.fuse(g, encoded, question.tokens)?;
        let cls_scores = if with_cls {
            Some(self.fuser.cls_frame_scores(g, encoded, question.cls)?)
        } else {
            None
        };
        let selection = select(self.cfg.sampler, &fused.map, cls_scores.as_ref(), self.cfg.num_samples)?;
        let critical = self.fuser.gather(g, fused.frames, &selection)?;
        let memory = decoder_memory(g, critical, question.tokens)?;
        let logits = match self.data.task {
            TaskMode::Mc => {
                let queries = self.text.encode_candidates(g, &sample.candidates)?;
                self.decoder.decode_mc(g, queries, memory)?
            }
            TaskMode::Oe => self.decoder.decode_oe(g, memory)?,
        };
        Ok(Forward {
            logits,
            selection,
            map: fused.map,
            encoded,
            fused: fused.frames,
        })
    }

    /// Cross-entropy of the sample's label.
    pub fn loss(&self, g: &mut Graph, sample: &SyntheticSample) -> Result<(Var, Forward)> {
        let fwd = self.forward(g, sample)?;
        let loss = g.tape.cross_entropy(fwd.logits, &[sample.label])?;
        Ok((loss, fwd))
    }
}
