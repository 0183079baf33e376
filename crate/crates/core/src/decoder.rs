//! Transformer answer decoder for multi-choice and open-ended questions.
//!
//! Queries carry no positional encoding and the memory `[f^c; q]` gets none
//! either, so logits are equivariant in candidate order and invariant to
//! memory row order.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, HeadMasks, MultiHeadAttention};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::layers::{FeedForward, LayerNorm};
use crate::params::{Graph, ParamStore};
use crate::tensor::argmax;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMode {
    #[default]
    Mc,
    Oe,
}

impl std::str::FromStr for TaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mc" => Ok(Self::Mc),
            "oe" => Ok(Self::Oe),
            other => Err(Error::config(format!("unknown task mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_norm: LayerNorm,
    self_attn: MultiHeadAttention,
    cross_norm: LayerNorm,
    memory_norm: LayerNorm,
    cross_attn: MultiHeadAttention,
    ffn_norm: LayerNorm,
    ffn: FeedForward,
}

#[derive(Clone, Debug)]
pub struct AnswerDecoder {
    pub mode: TaskMode,
    d_model: usize,
    num_answers: usize,
    layers: Vec<DecoderLayer>,
    head_norm: LayerNorm,
    head: FeedForward,
    oe_query_path: String,
}

impl AnswerDecoder {
    /// `num_answers` is the open-ended vocabulary size; ignored for MC.
    pub fn new(
        prefix: &str,
        cfg: AttentionConfig,
        depth: usize,
        ffn_mult: usize,
        mode: TaskMode,
        num_answers: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        if depth == 0 {
            return Err(Error::config("decoder depth must be >= 1"));
        }
        if mode == TaskMode::Oe && num_answers < 2 {
            return Err(Error::config("open-ended decoding needs >= 2 answers"));
        }
        let d = cfg.d_model;
        let layers = (0..depth)
            .map(|l| DecoderLayer {
                self_norm: LayerNorm::new(format!("{prefix}.layer{l}.self_norm"), d),
                self_attn: MultiHeadAttention::new(format!("{prefix}.layer{l}.self_attn"), cfg),
                cross_norm: LayerNorm::new(format!("{prefix}.layer{l}.cross_norm"), d),
                memory_norm: LayerNorm::new(format!("{prefix}.layer{l}.memory_norm"), d),
                cross_attn: MultiHeadAttention::new(format!("{prefix}.layer{l}.cross_attn"), cfg),
                ffn_norm: LayerNorm::new(format!("{prefix}.layer{l}.ffn_norm"), d),
                ffn: FeedForward::new(&format!("{prefix}.layer{l}.ffn"), d, ffn_mult * d, d),
            })
            .collect();
        let out = match mode {
            TaskMode::Mc => 1,
            TaskMode::Oe => num_answers,
        };
        Ok(Self {
            mode,
            d_model: d,
            num_answers,
            layers,
            head_norm: LayerNorm::new(format!("{prefix}.head_norm"), d),
            head: FeedForward::new(&format!("{prefix}.head"), d, d, out),
            oe_query_path: format!("{prefix}.oe_query"),
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        for l in &self.layers {
            l.self_norm.init(store);
            l.self_attn.init(store, rng);
            l.cross_norm.init(store);
            l.memory_norm.init(store);
            l.cross_attn.init(store, rng);
            l.ffn_norm.init(store);
            l.ffn.init(store, rng);
        }
        self.head_norm.init(store);
        self.head.init(store, rng);
        if self.mode == TaskMode::Oe {
            store.init_normal(&self.oe_query_path, &[1, self.d_model], 0.02, rng);
        }
    }

    /// Decoder blocks: self-attention among queries, cross-attention to
    /// memory, feed-forward; all pre-normalized residuals.
    pub fn decode(&self, g: &mut Graph, queries: Var, memory: Var) -> Result<Var> {
        if g.value(memory).cols() != self.d_model || g.value(queries).cols() != self.d_model {
            return Err(Error::shape("decoder", g.tape.shape(queries), g.tape.shape(memory)));
        }
        let mut x = queries;
        for l in &self.layers {
            let n = l.self_norm.forward(g, x)?;
            let sa = l.self_attn.forward(g, n, n, n, HeadMasks::None)?;
            x = g.tape.add(x, sa.output)?;
            let n = l.cross_norm.forward(g, x)?;
            let m = l.memory_norm.forward(g, memory)?;
            let ca = l.cross_attn.forward(g, n, m, m, HeadMasks::None)?;
            x = g.tape.add(x, ca.output)?;
            let n = l.ffn_norm.forward(g, x)?;
            let ff = l.ffn.forward(g, n)?;
            x = g.tape.add(x, ff)?;
        }
        Ok(x)
    }

    /// One logit per candidate query, returned as `1 x |A_mc|`.
    pub fn decode_mc(&self, g: &mut Graph, queries: Var, memory: Var) -> Result<Var> {
        if self.mode != TaskMode::Mc {
            return Err(Error::config("decoder was built for open-ended answers"));
        }
        let a = g.value(queries).rows();
        if a < 2 {
            return Err(Error::config("multi-choice decoding needs >= 2 candidates"));
        }
        let h = self.decode(g, queries, memory)?;
        let n = self.head_norm.forward(g, h)?;
        let logits = self.head.forward(g, n)?;
        g.tape.reshape(logits, &[1, a])
    }

    /// Logits over the open-ended answer vocabulary, `1 x |A_oe|`.
    pub fn decode_oe(&self, g: &mut Graph, memory: Var) -> Result<Var> {
        if self.mode != TaskMode::Oe {
            return Err(Error::config("decoder was built for multi-choice answers"));
        }
        let q = g.param(&self.oe_query_path)?;
        let h = self.decode(g, q, memory)?;
        let n = self.head_norm.forward(g, h)?;
        self.head.forward(g, n)
    }

    pub fn num_answers(&self) -> usize {
        self.num_answers
    }
}

/// Decoder memory `[f^c; q]`.
pub fn decoder_memory(g: &mut Graph, critical_frames: Var, question: Var) -> Result<Var> {
    g.tape.concat_rows(&[critical_frames, question])
}

/// Index of the largest logit, ties toward the smaller index.
pub fn predict(logits: &[f64]) -> usize {
    argmax(logits)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn predict_examples() {
        assert_eq!(predict(&[0.1, 0.9]), 1);
        assert_eq!(predict(&[0.3, 0.3, 0.3]), 0);
    }

    #[test]
    fn constructor_checks() {
        let cfg = AttentionConfig::new(8, 2).unwrap();
        assert!(AnswerDecoder::new("d", cfg, 0, 4, TaskMode::Mc, 0).is_err());
        assert!(AnswerDecoder::new("d", cfg, 1, 4, TaskMode::Oe, 1).is_err());
        assert!(AnswerDecoder::new("d", cfg, 1, 4, TaskMode::Oe, 5).is_ok());
    }

    #[test]
    fn task_mode_parses() {
        assert_eq!("oe".parse::<TaskMode>().unwrap(), TaskMode::Oe);
        assert!("qa".parse::<TaskMode>().is_err());
    }
}
