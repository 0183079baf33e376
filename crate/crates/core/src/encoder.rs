//! Video encoder: object-enhanced frames with temporally sparse mixing.
//!
//! Pipeline per video, all residual blocks pre-normalized:
//!
//! 1. input projections of raw frame and object features to `d_model`;
//! 2. spatio-temporal position encoding on objects (sinusoid over the frame
//!    index plus a learned table over the object slot);
//! 3. self-attention among the objects of each frame;
//! 4. window cross-attention: frame `t` queries the objects of a centered
//!    temporal window, one window width per head;
//! 5. leap attention: frames attend only to frames with the same index
//!    modulo the leap step.
//!
//! Steps 4-5 repeat `depth` times with separate weights.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, AttentionMask, HeadMasks, MultiHeadAttention};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::layers::{sinusoidal_encoding, LayerNorm, Linear};
use crate::params::{Graph, ParamStore};
use crate::tensor::Tensor;

/// Raw or projected per-video features.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoFeatures {
    /// `T x d`.
    pub frames: Tensor,
    /// `T x S x d`.
    pub objects: Tensor,
}

impl VideoFeatures {
    pub fn new(frames: Tensor, objects: Tensor) -> Result<Self> {
        let (fs, os) = (frames.shape(), objects.shape());
        if fs.len() != 2 || os.len() != 3 || fs[0] != os[0] || fs[1] != os[2] {
            return Err(Error::shape("video features", fs, os));
        }
        Ok(Self { frames, objects })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn num_objects(&self) -> usize {
        self.objects.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[1]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_model: usize,
    /// One odd window width per head.
    pub window_sizes: Vec<usize>,
    pub leap_step: usize,
    /// Number of stacked (window cross-attention, leap attention) pairs.
    pub depth: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            window_sizes: vec![1, 3, 5, 7],
            leap_step: 4,
            depth: 1,
        }
    }
}

impl EncoderConfig {
    pub fn n_heads(&self) -> usize {
        self.window_sizes.len()
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            d_model: self.d_model,
            n_heads: self.n_heads(),
        }
    }

    pub fn max_window(&self) -> usize {
        self.window_sizes.iter().copied().max().unwrap_or(1)
    }

    /// Checks the configuration; with `num_frames`, also `leap_step <= T`.
    pub fn validate(&self, num_frames: Option<usize>) -> Result<()> {
        if self.window_sizes.is_empty() {
            return Err(Error::config("window_sizes must not be empty"));
        }
        if let Some(w) = self.window_sizes.iter().find(|&&w| w % 2 == 0) {
            return Err(Error::config(format!("window size {w} is not odd")));
        }
        self.attention().validate()?;
        if self.leap_step == 0 {
            return Err(Error::config("leap_step must be >= 1"));
        }
        if self.depth == 0 {
            return Err(Error::config("encoder depth must be >= 1"));
        }
        if let Some(t) = num_frames {
            if self.leap_step > t {
                return Err(Error::config(format!(
                    "leap_step {} exceeds frame count {t}",
                    self.leap_step
                )));
            }
        }
        Ok(())
    }
}

/// Encoder ablations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderVariant {
    #[default]
    Full,
    /// Window cross-attention replaced by the video-level mean of all
    /// contextualized objects added to every frame.
    WithoutWca,
    WithoutLeap,
    WithoutWcaAndLeap,
}

impl EncoderVariant {
    pub fn uses_wca(self) -> bool {
        matches!(self, EncoderVariant::Full | EncoderVariant::WithoutLeap)
    }

    pub fn uses_leap(self) -> bool {
        matches!(self, EncoderVariant::Full | EncoderVariant::WithoutWca)
    }
}

/// Inclusive frame range of a centered window of odd width `w`, clamped to `0..len`.
pub fn window_bounds(t: usize, w: usize, len: usize) -> (usize, usize) {
    let r = (w - 1) / 2;
    (t.saturating_sub(r), (t + r).min(len - 1))
}

/// Frame-to-object mask for window width `w`: frame `t` may attend object
/// `(t', s)` iff `t'` lies in `window_bounds(t, w, T)`. Objects are flattened
/// frame-major (`t' * S + s`).
pub fn window_mask(num_frames: usize, num_objects: usize, w: usize) -> AttentionMask {
    AttentionMask::from_fn(num_frames, num_frames * num_objects, |t, k| {
        let (lo, hi) = window_bounds(t, w, num_frames);
        (lo..=hi).contains(&(k / num_objects))
    })
}

/// Frames `i` and `j` are connected iff `i ≡ j (mod step)`.
pub fn leap_mask(num_frames: usize, step: usize) -> AttentionMask {
    AttentionMask::from_fn(num_frames, num_frames, |i, j| i % step == j % step)
}

/// Objects attend only within their own frame.
pub fn intra_frame_mask(num_frames: usize, num_objects: usize) -> AttentionMask {
    let n = num_frames * num_objects;
    AttentionMask::from_fn(n, n, |a, b| a / num_objects == b / num_objects)
}

/// Fixed part of the object position encoding: the sinusoid of the frame
/// index, repeated for each object slot. `(T*S) x d`.
pub fn temporal_object_encoding(num_frames: usize, num_objects: usize, d: usize) -> Tensor {
    let pe = sinusoidal_encoding(num_frames, d);
    let mut data = Vec::with_capacity(num_frames * num_objects * d);
    for t in 0..num_frames {
        for _ in 0..num_objects {
            data.extend_from_slice(pe.row(t));
        }
    }
    Tensor::new(&[num_frames * num_objects, d], data).unwrap()
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    wca_norm_frames: LayerNorm,
    wca_norm_objects: LayerNorm,
    wca: MultiHeadAttention,
    leap_norm: LayerNorm,
    leap: MultiHeadAttention,
}

#[derive(Clone, Debug)]
pub struct VideoEncoder {
    pub cfg: EncoderConfig,
    pub variant: EncoderVariant,
    d_in: usize,
    num_objects: usize,
    frame_proj: Linear,
    object_proj: Linear,
    spatial_path: String,
    intra_norm: LayerNorm,
    intra: MultiHeadAttention,
    layers: Vec<EncoderLayer>,
}

impl VideoEncoder {
    pub fn new(
        prefix: &str,
        cfg: EncoderConfig,
        variant: EncoderVariant,
        d_in: usize,
        num_objects: usize,
    ) -> Result<Self> {
        cfg.validate(None)?;
        let d = cfg.d_model;
        let attn = cfg.attention();
        let layers = (0..cfg.depth)
            .map(|l| EncoderLayer {
                wca_norm_frames: LayerNorm::new(format!("{prefix}.layer{l}.wca_norm_frames"), d),
                wca_norm_objects: LayerNorm::new(format!("{prefix}.layer{l}.wca_norm_objects"), d),
                wca: MultiHeadAttention::new(format!("{prefix}.layer{l}.wca"), attn),
                leap_norm: LayerNorm::new(format!("{prefix}.layer{l}.leap_norm"), d),
                leap: MultiHeadAttention::new(format!("{prefix}.layer{l}.leap"), attn),
            })
            .collect();
        Ok(Self {
            frame_proj: Linear::new(format!("{prefix}.frame_proj"), d_in, d),
            object_proj: Linear::new(format!("{prefix}.object_proj"), d_in, d),
            spatial_path: format!("{prefix}.spatial_embedding"),
            intra_norm: LayerNorm::new(format!("{prefix}.intra_norm"), d),
            intra: MultiHeadAttention::new(format!("{prefix}.intra"), attn),
            layers,
            cfg,
            variant,
            d_in,
            num_objects,
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.frame_proj.init(store, rng);
        self.object_proj.init(store, rng);
        store.init_normal(&self.spatial_path, &[self.num_objects, self.cfg.d_model], 0.02, rng);
        self.intra_norm.init(store);
        self.intra.init(store, rng);
        for layer in &self.layers {
            layer.wca_norm_frames.init(store);
            layer.wca_norm_objects.init(store);
            layer.wca.init(store, rng);
            layer.leap_norm.init(store);
            layer.leap.init(store, rng);
        }
    }

    /// Adds the temporal sinusoid and the learned slot embedding to `(T*S) x d` objects.
    pub fn object_position_encoding(&self, g: &mut Graph, objects: Var, num_frames: usize) -> Result<Var> {
        let s = self.num_objects;
        let pe = temporal_object_encoding(num_frames, s, self.cfg.d_model);
        let with_time = g.tape.add_const(objects, &pe)?;
        let table = g.param(&self.spatial_path)?;
        let slots: Vec<usize> = (0..num_frames * s).map(|k| k % s).collect();
        let spatial = g.tape.gather_rows(table, &slots)?;
        g.tape.add(with_time, spatial)
    }

    /// Residual self-attention among the objects of each frame, `(T*S) x d`.
    pub fn intra_frame_self_attention(&self, g: &mut Graph, objects: Var, num_frames: usize) -> Result<Var> {
        let mask = intra_frame_mask(num_frames, self.num_objects);
        let normed = self.intra_norm.forward(g, objects)?;
        let attn = self
            .intra
            .forward(g, normed, normed, normed, HeadMasks::Shared(&mask))?;
        g.tape.add(objects, attn.output)
    }

    /// Residual window cross-attention from frames (`T x d`) to contextualized
    /// objects (`(T*S) x d`). Head `h` sees the window `window_sizes[h]`.
    pub fn window_cross_attention(&self, g: &mut Graph, layer: usize, frames: Var, objects: Var) -> Result<Var> {
        let t = g.value(frames).rows();
        let l = &self.layers[layer];
        let masks: Vec<AttentionMask> = self
            .cfg
            .window_sizes
            .iter()
            .map(|&w| window_mask(t, self.num_objects, w))
            .collect();
        let q = l.wca_norm_frames.forward(g, frames)?;
        let kv = l.wca_norm_objects.forward(g, objects)?;
        let attn = l.wca.forward(g, q, kv, kv, HeadMasks::PerHead(&masks))?;
        g.tape.add(frames, attn.output)
    }

    /// Replacement for window cross-attention in the `WithoutWca` ablation.
    pub fn pooled_objects(&self, g: &mut Graph, frames: Var, objects: Var) -> Result<Var> {
        let pooled = g.tape.mean_rows(objects);
        g.tape.add_row(frames, pooled)
    }

    /// Residual self-attention over frames under the leap mask.
    pub fn leap_attention(&self, g: &mut Graph, layer: usize, frames: Var) -> Result<Var> {
        let t = g.value(frames).rows();
        if self.cfg.leap_step > t {
            return Err(Error::config(format!(
                "leap_step {} exceeds frame count {t}",
                self.cfg.leap_step
            )));
        }
        let l = &self.layers[layer];
        let mask = leap_mask(t, self.cfg.leap_step);
        let normed = l.leap_norm.forward(g, frames)?;
        let attn = l
            .leap
            .forward(g, normed, normed, normed, HeadMasks::Shared(&mask))?;
        g.tape.add(frames, attn.output)
    }

    /// Projects raw features to `d_model`: returns `(frames T x d, objects (T*S) x d)`.
    pub fn project(&self, g: &mut Graph, video: &VideoFeatures) -> Result<(Var, Var)> {
        if video.width() != self.d_in || video.num_objects() != self.num_objects {
            return Err(Error::shape(
                "encode_video",
                video.objects.shape(),
                &[video.num_frames(), self.num_objects, self.d_in],
            ));
        }
        let t = video.num_frames();
        let frames = g.constant(video.frames.clone());
        let objects = g.constant(video.objects.reshape(&[t * self.num_objects, self.d_in])?);
        let f = self.frame_proj.forward(g, frames)?;
        let o = self.object_proj.forward(g, objects)?;
        Ok((f, o))
    }

    /// Full encoder on already-projected inputs.
    pub fn encode_projected(&self, g: &mut Graph, frames: Var, objects: Var) -> Result<Var> {
        let t = g.value(frames).rows();
        self.cfg.validate(Some(t))?;
        let objects = self.object_position_encoding(g, objects, t)?;
        let objects = self.intra_frame_self_attention(g, objects, t)?;
        let mut f = frames;
        for layer in 0..self.layers.len() {
            f = if self.variant.uses_wca() {
                self.window_cross_attention(g, layer, f, objects)?
            } else {
                self.pooled_objects(g, f, objects)?
            };
            if self.variant.uses_leap() {
                f = self.leap_attention(g, layer, f)?;
            }
        }
        Ok(f)
    }

    /// Raw video features in, `T x d` contextualized frames out.
    pub fn encode(&self, g: &mut Graph, video: &VideoFeatures) -> Result<Var> {
        let (f, o) = self.project(g, video)?;
        self.encode_projected(g, f, o)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_bounds_are_centered_and_clamped() {
        assert_eq!(window_bounds(2, 3, 5), (1, 3));
        assert_eq!(window_bounds(0, 7, 16), (0, 3));
        assert_eq!(window_bounds(15, 5, 16), (13, 15));
        assert_eq!(window_bounds(4, 1, 16), (4, 4));
    }

    #[test]
    fn window_mask_key_set_by_enumeration() {
        let m = window_mask(5, 2, 3);
        let keys: Vec<usize> = (0..10).filter(|&k| m.allowed(2, k)).collect();
        let expected: Vec<usize> = [1usize, 2, 3]
            .iter()
            .flat_map(|&t| (0..2).map(move |s| t * 2 + s))
            .collect();
        assert_eq!(keys, expected);
    }

    #[test]
    fn leap_mask_small_example() {
        let m = leap_mask(4, 2);
        assert_eq!(m.count_allowed(), 8);
        let cross: Vec<_> = m.pairs().into_iter().filter(|(i, j)| i < j).collect();
        assert_eq!(cross, vec![(0, 2), (1, 3)]);
        assert_eq!(leap_mask(5, 1).count_allowed(), 25);
        assert_eq!(leap_mask(16, 4).count_allowed(), 64);
    }

    #[test]
    fn config_validation() {
        let mut cfg = EncoderConfig::default();
        assert!(cfg.validate(Some(16)).is_ok());
        assert!(cfg.validate(Some(3)).is_err());
        cfg.window_sizes = vec![1, 2, 3, 5];
        assert!(cfg.validate(None).is_err());
        cfg.window_sizes = vec![1, 3, 5];
        // 64 is not divisible by 3 heads
        assert!(cfg.validate(None).is_err());
    }

    #[test]
    fn variants_switch_blocks() {
        assert!(EncoderVariant::Full.uses_wca() && EncoderVariant::Full.uses_leap());
        assert!(!EncoderVariant::WithoutWca.uses_wca());
        assert!(!EncoderVariant::WithoutLeap.uses_leap());
        let both = EncoderVariant::WithoutWcaAndLeap;
        assert!(!both.uses_wca() && !both.uses_leap());
    }
}
