//! Small building blocks shared by the encoders and the decoder.

use rand::Rng;

use crate::autodiff::Var;
use crate::error::Result;
use crate::params::{Graph, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct LayerNorm {
    prefix: String,
    dim: usize,
}

impl LayerNorm {
    pub fn new(prefix: impl Into<String>, dim: usize) -> Self {
        Self {
            prefix: prefix.into(),
            dim,
        }
    }

    pub fn init(&self, store: &mut ParamStore) {
        store.init_full(&format!("{}.gain", self.prefix), &[self.dim], 1.0);
        store.init_full(&format!("{}.bias", self.prefix), &[self.dim], 0.0);
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gain = g.param(&format!("{}.gain", self.prefix))?;
        let bias = g.param(&format!("{}.bias", self.prefix))?;
        g.tape.layer_norm(x, gain, bias)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    prefix: String,
    d_in: usize,
    d_out: usize,
}

impl Linear {
    pub fn new(prefix: impl Into<String>, d_in: usize, d_out: usize) -> Self {
        Self {
            prefix: prefix.into(),
            d_in,
            d_out,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        store.init_xavier(&format!("{}.w", self.prefix), self.d_in, self.d_out, rng);
        store.init_full(&format!("{}.b", self.prefix), &[self.d_out], 0.0);
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(&format!("{}.w", self.prefix))?;
        let b = g.param(&format!("{}.b", self.prefix))?;
        g.tape.linear(x, w, b)
    }
}

/// `Linear -> GELU -> Linear`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new(prefix: &str, d: usize, hidden: usize, d_out: usize) -> Self {
        Self {
            up: Linear::new(format!("{prefix}.up"), d, hidden),
            down: Linear::new(format!("{prefix}.down"), hidden, d_out),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.up.init(store, rng);
        self.down.init(store, rng);
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.tape.gelu(h);
        self.down.forward(g, h)
    }
}

/// Fixed sinusoidal encoding: `sin(pos / 10000^(2i/d))` on even columns and
/// the matching cosine on odd columns.
pub fn sinusoidal_encoding(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * freq;
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(&[len, d], data).unwrap()
}
