//! Scaled dot-product and multi-head attention with boolean masks.
//!
//! Besides the attended values, every call hands back the pre-softmax score
//! map (after the `1/sqrt(head_dim)` scaling). Multi-head attention averages
//! those maps over heads.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Graph, ParamStore};
use crate::tensor::Tensor;

/// Score assigned to masked positions. Finite, but exp() of it underflows to 0.
pub const MASK_SENTINEL: f64 = -1e30;

/// Row-major `query_len x key_len` boolean mask; `true` means the pair may attend.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                allowed.push(f(r, c));
            }
        }
        Self { rows, cols, allowed }
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Self::from_fn(rows, cols, |_, _| true)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn allowed(&self, r: usize, c: usize) -> bool {
        self.allowed[r * self.cols + c]
    }

    pub fn count_allowed(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }

    /// Allowed `(row, col)` pairs in row-major order.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        (0..self.rows)
            .flat_map(|r| (0..self.cols).map(move |c| (r, c)))
            .filter(|&(r, c)| self.allowed(r, c))
            .collect()
    }

    /// Fails on the first row without any allowed key.
    pub fn validate(&self) -> Result<()> {
        for r in 0..self.rows {
            if !(0..self.cols).any(|c| self.allowed(r, c)) {
                return Err(Error::DegenerateMask { row: r });
            }
        }
        Ok(())
    }

    /// Permutes columns: column `j` of the result is column `perm[j]` of `self`.
    pub fn permute_cols(&self, perm: &[usize]) -> Self {
        Self::from_fn(self.rows, self.cols, |r, c| self.allowed(r, perm[c]))
    }

    fn additive(&self) -> Tensor {
        let data = self
            .allowed
            .iter()
            .map(|&a| if a { 0.0 } else { MASK_SENTINEL })
            .collect();
        Tensor::new(&[self.rows, self.cols], data).unwrap()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub n_heads: usize,
}

impl AttentionConfig {
    pub fn new(d_model: usize, n_heads: usize) -> Result<Self> {
        let cfg = Self { d_model, n_heads };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
        }
    }
}

/// How masks apply across heads.
#[derive(Clone, Copy, Debug)]
pub enum HeadMasks<'m> {
    None,
    Shared(&'m AttentionMask),
    /// One mask per head, in head order.
    PerHead(&'m [AttentionMask]),
}

impl HeadMasks<'_> {
    fn for_head(&self, h: usize) -> Option<&AttentionMask> {
        match self {
            HeadMasks::None => None,
            HeadMasks::Shared(m) => Some(m),
            HeadMasks::PerHead(ms) => Some(&ms[h]),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    /// `query_len x d_model`.
    pub output: Var,
    /// `query_len x key_len` pre-softmax scores averaged over heads.
    pub scores: Var,
}

/// `softmax(Q Kᵀ / sqrt(h) + mask) · V`. Returns `(output, scores)` where the
/// scores are the masked, scaled logits.
pub fn scaled_dot_product(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&AttentionMask>,
) -> Result<(Var, Var)> {
    let h = tape.value(q).cols();
    if tape.value(k).cols() != h {
        return Err(Error::shape("scaled_dot_product", tape.shape(q), tape.shape(k)));
    }
    if tape.value(k).rows() != tape.value(v).rows() {
        return Err(Error::shape("scaled_dot_product", tape.shape(k), tape.shape(v)));
    }
    let logits = tape.matmul_nt(q, k)?;
    let mut scores = tape.scale(logits, 1.0 / (h as f64).sqrt());
    if let Some(mask) = mask {
        if [mask.rows(), mask.cols()] != tape.shape(scores) {
            return Err(Error::shape(
                "attention mask",
                &[mask.rows(), mask.cols()],
                tape.shape(scores),
            ));
        }
        mask.validate()?;
        scores = tape.add_const(scores, &mask.additive())?;
    }
    let weights = tape.softmax_rows(scores);
    let out = tape.matmul(weights, v)?;
    Ok((out, scores))
}

/// Projection weights live under `{prefix}.w{q,k,v,o}` / `{prefix}.b{q,k,v,o}`.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    prefix: String,
    pub cfg: AttentionConfig,
}

impl MultiHeadAttention {
    pub fn new(prefix: impl Into<String>, cfg: AttentionConfig) -> Self {
        Self {
            prefix: prefix.into(),
            cfg,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let d = self.cfg.d_model;
        for p in ["q", "k", "v", "o"] {
            store.init_xavier(&format!("{}.w{p}", self.prefix), d, d, rng);
            store.init_full(&format!("{}.b{p}", self.prefix), &[d], 0.0);
        }
    }

    fn proj(&self, g: &mut Graph, x: Var, which: &str) -> Result<Var> {
        let w = g.param(&format!("{}.w{which}", self.prefix))?;
        let b = g.param(&format!("{}.b{which}", self.prefix))?;
        g.tape.linear(x, w, b)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        q_in: Var,
        k_in: Var,
        v_in: Var,
        masks: HeadMasks,
    ) -> Result<AttentionOutput> {
        self.cfg.validate()?;
        let d = self.cfg.d_model;
        for x in [q_in, k_in, v_in] {
            if g.value(x).cols() != d {
                return Err(Error::shape("multi_head_attention", g.tape.shape(x), &[d]));
            }
        }
        if let HeadMasks::PerHead(ms) = masks {
            if ms.len() != self.cfg.n_heads {
                return Err(Error::config(format!(
                    "{} head masks for {} heads",
                    ms.len(),
                    self.cfg.n_heads
                )));
            }
        }
        let q = self.proj(g, q_in, "q")?;
        let k = self.proj(g, k_in, "k")?;
        let v = self.proj(g, v_in, "v")?;
        let hd = self.cfg.head_dim();
        let mut outs = Vec::with_capacity(self.cfg.n_heads);
        let mut score_sum: Option<Var> = None;
        for h in 0..self.cfg.n_heads {
            let (qh, kh, vh) = if self.cfg.n_heads == 1 {
                (q, k, v)
            } else {
                (
                    g.tape.slice_cols(q, h * hd, hd)?,
                    g.tape.slice_cols(k, h * hd, hd)?,
                    g.tape.slice_cols(v, h * hd, hd)?,
                )
            };
            let (o, s) = scaled_dot_product(&mut g.tape, qh, kh, vh, masks.for_head(h))?;
            outs.push(o);
            score_sum = Some(match score_sum {
                None => s,
                Some(acc) => g.tape.add(acc, s)?,
            });
        }
        let concat = if outs.len() == 1 {
            outs[0]
        } else {
            g.tape.concat_cols(&outs)?
        };
        let output = self.proj(g, concat, "o")?;
        let scores = g
            .tape
            .scale(score_sum.expect("n_heads >= 1"), 1.0 / self.cfg.n_heads as f64);
        Ok(AttentionOutput { output, scores })
    }
}
