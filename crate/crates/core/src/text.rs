//! Lightweight token encoder standing in for a pretrained language model.

use rand::Rng;

use crate::attention::{AttentionConfig, AttentionMask, HeadMasks, MultiHeadAttention};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::layers::{sinusoidal_encoding, FeedForward, LayerNorm};
use crate::params::{Graph, ParamStore};

/// Encoded question tokens, optionally with a leading CLS summary.
#[derive(Clone, Copy, Debug)]
pub struct QuestionEncoding {
    /// `L x d`, CLS excluded.
    pub tokens: Var,
    /// `1 x d` when the question was encoded with a CLS token.
    pub cls: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    vocab: usize,
    cls_id: usize,
    d_model: usize,
    embedding_path: String,
    pool_query_path: String,
    self_norm: LayerNorm,
    self_attn: MultiHeadAttention,
    ffn_norm: LayerNorm,
    ffn: FeedForward,
    pool_norm: LayerNorm,
    pool: MultiHeadAttention,
}

impl TextEncoder {
    /// `cls_id` must be a valid token id reserved for the CLS token.
    pub fn new(prefix: &str, cfg: AttentionConfig, vocab: usize, cls_id: usize) -> Result<Self> {
        cfg.validate()?;
        if cls_id >= vocab {
            return Err(Error::config(format!("CLS id {cls_id} outside vocabulary {vocab}")));
        }
        let d = cfg.d_model;
        Ok(Self {
            vocab,
            cls_id,
            d_model: d,
            embedding_path: format!("{prefix}.embedding"),
            pool_query_path: format!("{prefix}.pool_query"),
            self_norm: LayerNorm::new(format!("{prefix}.self_norm"), d),
            self_attn: MultiHeadAttention::new(format!("{prefix}.self_attn"), cfg),
            ffn_norm: LayerNorm::new(format!("{prefix}.ffn_norm"), d),
            ffn: FeedForward::new(&format!("{prefix}.ffn"), d, 2 * d, d),
            pool_norm: LayerNorm::new(format!("{prefix}.pool_norm"), d),
            pool: MultiHeadAttention::new(format!("{prefix}.pool"), cfg),
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        store.init_normal(&self.embedding_path, &[self.vocab, self.d_model], 1.0, rng);
        store.init_normal(&self.pool_query_path, &[1, self.d_model], 1.0, rng);
        self.self_norm.init(store);
        self.self_attn.init(store, rng);
        self.ffn_norm.init(store);
        self.ffn.init(store, rng);
        self.pool_norm.init(store);
        self.pool.init(store, rng);
    }

    /// Embeds and contextualizes several sequences in one pass. Tokens only
    /// attend within their own sequence and positions restart per sequence.
    fn encode_sequences(&self, g: &mut Graph, seqs: &[&[usize]]) -> Result<Var> {
        let ids: Vec<usize> = seqs.iter().flat_map(|s| s.iter().copied()).collect();
        if ids.is_empty() || seqs.iter().any(|s| s.is_empty()) {
            return Err(Error::config("empty token sequence"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab) {
            return Err(Error::Index {
                op: "text embedding",
                index: bad,
                bound: self.vocab,
            });
        }
        let max_len = seqs.iter().map(|s| s.len()).max().unwrap();
        let pe_table = sinusoidal_encoding(max_len, self.d_model);
        let mut pe = Vec::with_capacity(ids.len() * self.d_model);
        let mut owner = Vec::with_capacity(ids.len());
        for (i, s) in seqs.iter().enumerate() {
            for pos in 0..s.len() {
                pe.extend_from_slice(pe_table.row(pos));
                owner.push(i);
            }
        }
        let pe = crate::tensor::Tensor::new(&[ids.len(), self.d_model], pe)?;
        let table = g.param(&self.embedding_path)?;
        let emb = g.tape.gather_rows(table, &ids)?;
        let x = g.tape.add_const(emb, &pe)?;

        let n = self.self_norm.forward(g, x)?;
        let masks = (seqs.len() > 1)
            .then(|| AttentionMask::from_fn(ids.len(), ids.len(), |a, b| owner[a] == owner[b]));
        let heads = match &masks {
            Some(m) => HeadMasks::Shared(m),
            None => HeadMasks::None,
        };
        let sa = self.self_attn.forward(g, n, n, n, heads)?;
        let x = g.tape.add(x, sa.output)?;
        let n = self.ffn_norm.forward(g, x)?;
        let ff = self.ffn.forward(g, n)?;
        g.tape.add(x, ff)
    }

    /// Question tokens `L x d`; with `with_cls`, a CLS token is prepended and
    /// returned separately.
    pub fn encode_question(&self, g: &mut Graph, tokens: &[usize], with_cls: bool) -> Result<QuestionEncoding> {
        if !with_cls {
            let t = self.encode_sequences(g, &[tokens])?;
            return Ok(QuestionEncoding { tokens: t, cls: None });
        }
        let mut ids = Vec::with_capacity(tokens.len() + 1);
        ids.push(self.cls_id);
        ids.extend_from_slice(tokens);
        let x = self.encode_sequences(g, &[&ids])?;
        let cls = g.tape.gather_rows(x, &[0])?;
        let rest: Vec<usize> = (1..ids.len()).collect();
        let t = g.tape.gather_rows(x, &rest)?;
        Ok(QuestionEncoding { tokens: t, cls: Some(cls) })
    }

    /// One pooled vector per candidate, `|A| x d`, in candidate order.
    pub fn encode_candidates(&self, g: &mut Graph, candidates: &[Vec<usize>]) -> Result<Var> {
        let seqs: Vec<&[usize]> = candidates.iter().map(Vec::as_slice).collect();
        let x = self.encode_sequences(g, &seqs)?;
        let mut owner = Vec::new();
        for (i, c) in candidates.iter().enumerate() {
            owner.extend(std::iter::repeat_n(i, c.len()));
        }
        let mask = AttentionMask::from_fn(candidates.len(), owner.len(), |c, k| owner[k] == c);
        let q = g.param(&self.pool_query_path)?;
        let queries = g.tape.gather_rows(q, &vec![0; candidates.len()])?;
        let kv = self.pool_norm.forward(g, x)?;
        let pooled = self
            .pool
            .forward(g, queries, kv, kv, HeadMasks::Shared(&mask))?;
        Ok(pooled.output)
    }
}
