//! Cross-modal fusion and critical-frame selection.
//!
//! Frames attend to question tokens; the head-averaged pre-softmax map `z`
//! (`T x L`) scores every frame/word interaction. Adaptive sampling flattens
//! `z` (flat index `k = t * L + l`), takes a softmax over all `T * L`
//! entries, and inverts the resulting CDF on the fixed grid
//! `(2i + 1) / 2N, i = 0..N`: each grid point picks the index whose CDF value
//! is nearest, ties toward the smaller index. Sampled interactions map back
//! to frames and repeated frames are kept once.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, HeadMasks, MultiHeadAttention};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::layers::LayerNorm;
use crate::params::{Graph, ParamStore};
use crate::tensor::{softmax_in_place, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMode {
    #[default]
    Adaptive,
    HardTopn,
    Cls,
    None,
}

impl std::str::FromStr for SamplerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptive" => Ok(Self::Adaptive),
            "hard_topn" => Ok(Self::HardTopn),
            "cls" => Ok(Self::Cls),
            "none" => Ok(Self::None),
            other => Err(Error::config(format!("unknown sampler `{other}`"))),
        }
    }
}

/// Pre-softmax frame/word interaction scores.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionMap {
    /// `T x L`.
    pub z: Tensor,
}

impl InteractionMap {
    pub fn new(z: Tensor) -> Result<Self> {
        if z.shape().len() != 2 {
            return Err(Error::shape("interaction map", z.shape(), &[0, 0]));
        }
        Ok(Self { z })
    }

    pub fn num_frames(&self) -> usize {
        self.z.shape()[0]
    }

    pub fn num_words(&self) -> usize {
        self.z.shape()[1]
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleSelection {
    /// Sampled flat interaction indices `t * L + l`, in grid order.
    pub flat_indices: Vec<usize>,
    /// Distinct frames in order of first selection.
    pub frame_indices: Vec<usize>,
    /// Word index of each sampled interaction.
    pub word_indices: Vec<usize>,
}

/// Softmax over the flattened map, `1 x (T*L)`.
pub fn interaction_probabilities(map: &InteractionMap) -> Tensor {
    let mut p = map.z.data().to_vec();
    softmax_in_place(&mut p);
    Tensor::new(&[1, p.len()], p).unwrap()
}

/// Running prefix sums of `p`.
pub fn cumulative_distribution(p: &Tensor) -> Tensor {
    let mut acc = 0.0;
    let cdf = p
        .data()
        .iter()
        .map(|v| {
            acc += v;
            acc
        })
        .collect();
    Tensor::new(&[1, p.len()], cdf).unwrap()
}

/// The fixed inverse-CDF grid `{1/2N, 3/2N, ..., (2N-1)/2N}`.
pub fn sampling_grid(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| (2 * i + 1) as f64 / (2 * n) as f64)
        .collect()
}

/// Distances to a grid point closer than this count as ties, so that sums
/// like `0.7 + 0.1` that are exact in decimal behave as written.
pub const TIE_TOLERANCE: f64 = 1e-12;

/// For every grid point, the index whose CDF value is nearest (ties, up to
/// [`TIE_TOLERANCE`], toward the smaller index). `cdf` must be nondecreasing.
pub fn inverse_transform_sample(cdf: &Tensor, n: usize) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::config("sample count N must be >= 1"));
    }
    let c = cdf.data();
    if c.is_empty() {
        return Err(Error::config("empty CDF"));
    }
    Ok(sampling_grid(n)
        .into_iter()
        .map(|target| {
            // first index with cdf >= target; distances shrink up to here and grow after
            let j = c.partition_point(|&v| v < target);
            let above = c.get(j).map(|&v| v - target);
            let below = (j > 0).then(|| target - c[j - 1]);
            let best = above.into_iter().chain(below).fold(f64::INFINITY, f64::min);
            let first_below = c[..j].partition_point(|&v| target - v > best + TIE_TOLERANCE);
            if first_below < j {
                first_below
            } else {
                j
            }
        })
        .collect())
}

/// Maps flat indices to frames, keeping the first occurrence of each frame.
pub fn collect_critical_frames(flat_indices: &[usize], num_frames: usize, num_words: usize) -> Result<SampleSelection> {
    let bound = num_frames * num_words;
    let mut frame_indices = Vec::new();
    let mut word_indices = Vec::with_capacity(flat_indices.len());
    for &k in flat_indices {
        if k >= bound {
            return Err(Error::Index {
                op: "collect_critical_frames",
                index: k,
                bound,
            });
        }
        let t = k / num_words;
        word_indices.push(k % num_words);
        if !frame_indices.contains(&t) {
            frame_indices.push(t);
        }
    }
    Ok(SampleSelection {
        flat_indices: flat_indices.to_vec(),
        frame_indices,
        word_indices,
    })
}

/// Indices of the `n` largest values, descending, ties toward the smaller index.
pub fn top_n_indices(values: &[f64], n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > values.len() {
        return Err(Error::config(format!(
            "top-N needs 1 <= N <= {}, got {n}",
            values.len()
        )));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(n);
    Ok(order)
}

/// The `n` highest-scoring flat interactions of `z`.
pub fn hard_topn_sample(map: &InteractionMap, n: usize) -> Result<Vec<usize>> {
    top_n_indices(map.z.data(), n)
}

/// Selection produced by the configured sampler.
pub fn select(
    mode: SamplerMode,
    map: &InteractionMap,
    cls_scores: Option<&Tensor>,
    n: usize,
) -> Result<SampleSelection> {
    let (t, l) = (map.num_frames(), map.num_words());
    match mode {
        SamplerMode::Adaptive => {
            let p = interaction_probabilities(map);
            let flat = inverse_transform_sample(&cumulative_distribution(&p), n)?;
            collect_critical_frames(&flat, t, l)
        }
        SamplerMode::HardTopn => collect_critical_frames(&hard_topn_sample(map, n.min(t * l))?, t, l),
        SamplerMode::Cls => {
            let scores = cls_scores.ok_or_else(|| Error::config("cls sampler needs CLS scores"))?;
            let frames = top_n_indices(scores.data(), n.min(t))?;
            let flat: Vec<usize> = frames.iter().map(|f| f * l).collect();
            collect_critical_frames(&flat, t, l)
        }
        SamplerMode::None => {
            let flat: Vec<usize> = (0..t).map(|f| f * l).collect();
            collect_critical_frames(&flat, t, l)
        }
    }
}

/// Output of the fuser's cross-attention.
#[derive(Clone, Debug)]
pub struct Fused {
    /// `T x d`, frames enriched with question context.
    pub frames: Var,
    pub map: InteractionMap,
}

#[derive(Clone, Debug)]
pub struct CrossModalFuser {
    frame_norm: LayerNorm,
    question_norm: LayerNorm,
    cross: MultiHeadAttention,
    cls: MultiHeadAttention,
}

impl CrossModalFuser {
    pub fn new(prefix: &str, cfg: AttentionConfig) -> Self {
        Self {
            frame_norm: LayerNorm::new(format!("{prefix}.frame_norm"), cfg.d_model),
            question_norm: LayerNorm::new(format!("{prefix}.question_norm"), cfg.d_model),
            cross: MultiHeadAttention::new(format!("{prefix}.cross"), cfg),
            cls: MultiHeadAttention::new(format!("{prefix}.cls"), cfg),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.frame_norm.init(store);
        self.question_norm.init(store);
        self.cross.init(store, rng);
        self.cls.init(store, rng);
    }

    /// `f̄ = f + CrossAttention(LN f, LN q)` together with the interaction map.
    pub fn fuse(&self, g: &mut Graph, frames: Var, question: Var) -> Result<Fused> {
        let fq = self.frame_norm.forward(g, frames)?;
        let qn = self.question_norm.forward(g, question)?;
        let attn = self.cross.forward(g, fq, qn, qn, HeadMasks::None)?;
        let fused = g.tape.add(frames, attn.output)?;
        let map = InteractionMap::new(g.value(attn.scores).clone())?;
        Ok(Fused { frames: fused, map })
    }

    /// Scores of the CLS query over frames, `1 x T`.
    pub fn cls_frame_scores(&self, g: &mut Graph, frames: Var, cls: Option<Var>) -> Result<Tensor> {
        let cls = cls.ok_or_else(|| Error::config("question has no CLS position"))?;
        let fq = self.frame_norm.forward(g, frames)?;
        let cn = self.question_norm.forward(g, cls)?;
        let attn = self.cls.forward(g, cn, fq, fq, HeadMasks::None)?;
        Ok(g.value(attn.scores).clone())
    }

    /// Gathers the selected rows of the fused frames.
    pub fn gather(&self, g: &mut Graph, fused: Var, sel: &SampleSelection) -> Result<Var> {
        g.tape.gather_rows(fused, &sel.frame_indices)
    }
}
