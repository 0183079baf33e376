//! Synthetic video QA with planted critical frames.
//!
//! A bank of `P` orthogonal patterns is split into query patterns
//! (`0..P-C`) and answer patterns (`P-C..P`). Every video asks about one
//! query pattern `qp` whose answer is one answer pattern `ap`:
//!
//! - `K` planted frames carry `qp` in the frame feature and `ap` in one
//!   object slot;
//! - every other frame carries a different query pattern and, in one object
//!   slot, any pattern other than `qp` and `ap`;
//! - the question is filler tokens with `qp` at one random position;
//! - multi-choice candidates each carry one distinct answer pattern; the
//!   correct one carries `ap`. Open-ended labels are `ap - (P - C)`.
//!
//! Answering requires joining a frame with its own objects and matching the
//! frame to the question, so neither the objects nor the frames alone suffice.
//!
//! # Dataset file layout
//!
//! All integers little-endian, reals are IEEE-754 `f64` little-endian.
//!
//! ```text
//! magic        8 bytes  b"RAFDATA1"
//! header_len   u32
//! header       header_len bytes: the generator config as TOML
//! count        u64
//! sample*:
//!   T S d_in         3 x u32
//!   frames           T*d_in f64
//!   objects          T*S*d_in f64
//!   L, tokens        u32, L x u32
//!   A                u32 (0 for open-ended)
//!   candidate*       u32 len, len x u32
//!   label            u32
//!   K, planted       u32, K x u32
//!   query_pattern    u32
//!   answer_pattern   u32
//!   frame_patterns   T x u32
//!   object_patterns  T*S x u32 (u32::MAX = no pattern)
//! ```

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::decoder::TaskMode;
use crate::encoder::VideoFeatures;
use crate::error::{Error, Result};
use crate::params::ByteReader;
use crate::tensor::Tensor;

const DATASET_MAGIC: &[u8; 8] = b"RAFDATA1";
const NO_PATTERN: u32 = u32::MAX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_frames: usize,
    pub num_objects: usize,
    pub question_len: usize,
    pub d_in: usize,
    pub num_patterns: usize,
    pub num_classes: usize,
    pub planted_frames: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    pub task: TaskMode,
    /// Candidates per multi-choice question.
    pub num_choices: usize,
    pub candidate_len: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_frames: 16,
            num_objects: 4,
            question_len: 8,
            d_in: 32,
            num_patterns: 16,
            num_classes: 8,
            planted_frames: 2,
            noise_sigma: 0.1,
            seed: 0,
            task: TaskMode::Mc,
            num_choices: 5,
            candidate_len: 2,
        }
    }
}

impl SyntheticConfig {
    /// Number of query patterns, `P - C`.
    pub fn num_query_patterns(&self) -> usize {
        self.num_patterns - self.num_classes
    }

    /// Token id used for filler positions.
    pub fn filler_token(&self) -> usize {
        self.num_patterns
    }

    /// Token id reserved for a CLS token.
    pub fn cls_token(&self) -> usize {
        self.num_patterns + 1
    }

    pub fn vocab_size(&self) -> usize {
        self.num_patterns + 2
    }

    /// Size of the answer space seen by the decoder.
    pub fn num_answers(&self) -> usize {
        match self.task {
            TaskMode::Mc => self.num_choices,
            TaskMode::Oe => self.num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_frames == 0 || self.num_objects == 0 || self.question_len == 0 {
            return fail("T, S and L must be >= 1".into());
        }
        if self.planted_frames == 0 || self.planted_frames > self.num_frames {
            return fail(format!(
                "planted frames K={} must be in 1..=T={}",
                self.planted_frames, self.num_frames
            ));
        }
        if self.num_classes > self.num_patterns {
            return fail(format!(
                "answer classes C={} exceed patterns P={}",
                self.num_classes, self.num_patterns
            ));
        }
        let distractors = self.planted_frames < self.num_frames;
        let min_queries = if distractors { 2 } else { 1 };
        if self.num_query_patterns() < min_queries {
            return fail(format!("need at least {min_queries} query patterns (P - C)"));
        }
        let min_classes = if distractors { 2 } else { 1 };
        if self.num_classes < min_classes {
            return fail(format!("need at least {min_classes} answer classes"));
        }
        if self.task == TaskMode::Mc && (self.num_choices < 2 || self.num_choices > self.num_classes) {
            return fail(format!(
                "num_choices={} must be in 2..=C={}",
                self.num_choices, self.num_classes
            ));
        }
        if self.d_in < self.num_patterns {
            return fail(format!("d_in={} must be >= P={}", self.d_in, self.num_patterns));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return fail("noise_sigma must be finite and >= 0".into());
        }
        if self.candidate_len == 0 {
            return fail("candidate_len must be >= 1".into());
        }
        Ok(())
    }
}

/// Orthogonal pattern vectors of norm `sqrt(d_in)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatternBank {
    vectors: Vec<Vec<f64>>,
}

impl PatternBank {
    /// Gram-Schmidt over Gaussian draws.
    pub fn new(num_patterns: usize, d_in: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, u64::MAX));
        let scale = (d_in as f64).sqrt();
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(num_patterns);
        while basis.len() < num_patterns {
            let mut v: Vec<f64> = (0..d_in).map(|_| StandardNormal.sample(&mut rng)).collect();
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                v.iter_mut().for_each(|x| *x /= norm);
                basis.push(v);
            }
        }
        for v in &mut basis {
            v.iter_mut().for_each(|x| *x *= scale);
        }
        Self { vectors: basis }
    }

    pub fn get(&self, id: usize) -> &[f64] {
        &self.vectors[id]
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Pattern with the largest inner product with `v`, if any is positive.
    pub fn nearest(&self, v: &[f64], candidates: std::ops::Range<usize>) -> Option<usize> {
        let norm2 = self.vectors.first().map_or(1.0, |p| p.iter().map(|x| x * x).sum());
        let mut best: Option<(usize, f64)> = None;
        for id in candidates {
            let s: f64 = v.iter().zip(&self.vectors[id]).map(|(a, b)| a * b).sum::<f64>() / norm2;
            if best.is_none_or(|(_, bs)| s > bs) {
                best = Some((id, s));
            }
        }
        best.filter(|&(_, s)| s > 0.5).map(|(id, _)| id)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    /// Raw features, width `d_in`.
    pub video: VideoFeatures,
    pub question_tokens: Vec<usize>,
    /// Token sequences, one per candidate (empty for open-ended).
    pub candidates: Vec<Vec<usize>>,
    pub label: usize,
    /// Ground-truth critical frames, ascending.
    pub planted_frames: Vec<usize>,
    pub query_pattern: usize,
    pub answer_pattern: usize,
    /// Pattern id of each frame feature.
    pub frame_patterns: Vec<usize>,
    /// Pattern id of each object slot, frame-major.
    pub object_patterns: Vec<Option<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: SyntheticConfig,
    pub samples: Vec<SyntheticSample>,
}

/// SplitMix64 of `seed` and `index`; independent per-sample streams.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn pick_other(rng: &mut impl Rng, range: std::ops::Range<usize>, exclude: &[usize]) -> usize {
    loop {
        let v = rng.gen_range(range.clone());
        if !exclude.contains(&v) {
            return v;
        }
    }
}

/// Generates sample `index` of the stream defined by `cfg.seed`.
pub fn generate_sample(cfg: &SyntheticConfig, bank: &PatternBank, index: u64) -> SyntheticSample {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, index));
    let (t_len, s_len) = (cfg.num_frames, cfg.num_objects);
    let nq = cfg.num_query_patterns();
    let answers = nq..cfg.num_patterns;

    let qp = rng.gen_range(0..nq);
    let ap = rng.gen_range(answers.clone());
    let mut planted = sample_indices(&mut rng, t_len, cfg.planted_frames).into_vec();
    planted.sort_unstable();

    let mut frame_patterns = Vec::with_capacity(t_len);
    let mut object_patterns = vec![None; t_len * s_len];
    for t in 0..t_len {
        let slot = rng.gen_range(0..s_len);
        if planted.contains(&t) {
            frame_patterns.push(qp);
            object_patterns[t * s_len + slot] = Some(ap);
        } else {
            frame_patterns.push(pick_other(&mut rng, 0..nq, &[qp]));
            object_patterns[t * s_len + slot] = Some(pick_other(&mut rng, 0..cfg.num_patterns, &[qp, ap]));
        }
    }

    let filler = cfg.filler_token();
    let mut question_tokens = vec![filler; cfg.question_len];
    question_tokens[rng.gen_range(0..cfg.question_len)] = qp;

    let (candidates, label) = match cfg.task {
        TaskMode::Mc => {
            let mut others: Vec<usize> = answers.clone().filter(|&a| a != ap).collect();
            for i in (1..others.len()).rev() {
                others.swap(i, rng.gen_range(0..=i));
            }
            others.truncate(cfg.num_choices - 1);
            let label = rng.gen_range(0..cfg.num_choices);
            others.insert(label, ap);
            let cands = others
                .into_iter()
                .map(|pattern| {
                    let mut seq = vec![filler; cfg.candidate_len];
                    seq[rng.gen_range(0..cfg.candidate_len)] = pattern;
                    seq
                })
                .collect();
            (cands, label)
        }
        TaskMode::Oe => (Vec::new(), ap - nq),
    };

    let noise = (cfg.noise_sigma > 0.0).then(|| Normal::new(0.0, cfg.noise_sigma).unwrap());
    let mut feature = |pattern: Option<usize>| -> Vec<f64> {
        (0..cfg.d_in)
            .map(|j| {
                let base = pattern.map_or(0.0, |p| bank.get(p)[j]);
                base + noise.as_ref().map_or(0.0, |n| n.sample(&mut rng))
            })
            .collect()
    };
    let frames: Vec<f64> = frame_patterns.iter().flat_map(|&p| feature(Some(p))).collect();
    let objects: Vec<f64> = object_patterns.iter().flat_map(|&p| feature(p)).collect();
    let video = VideoFeatures::new(
        Tensor::new(&[t_len, cfg.d_in], frames).unwrap(),
        Tensor::new(&[t_len, s_len, cfg.d_in], objects).unwrap(),
    )
    .unwrap();

    SyntheticSample {
        video,
        question_tokens,
        candidates,
        label,
        planted_frames: planted,
        query_pattern: qp,
        answer_pattern: ap,
        frame_patterns,
        object_patterns,
    }
}

/// Samples `0..count` of the configured stream.
pub fn generate_dataset(cfg: &SyntheticConfig, count: usize) -> Result<Dataset> {
    generate_range(cfg, 0, count)
}

/// Samples `start..start + count`; every sample depends only on `(seed, index)`.
pub fn generate_range(cfg: &SyntheticConfig, start: usize, count: usize) -> Result<Dataset> {
    cfg.validate()?;
    let bank = PatternBank::new(cfg.num_patterns, cfg.d_in, cfg.seed);
    let samples = (start..start + count)
        .map(|i| generate_sample(cfg, &bank, i as u64))
        .collect();
    Ok(Dataset {
        config: cfg.clone(),
        samples,
    })
}

/// Answer derived from the noiseless generator state: the question's
/// pattern selects frames, whose objects name the answer pattern.
pub fn oracle_answer(cfg: &SyntheticConfig, s: &SyntheticSample) -> Option<usize> {
    let nq = cfg.num_query_patterns();
    let filler = cfg.filler_token();
    let qp = *s.question_tokens.iter().find(|&&t| t != filler && t < nq)?;
    let s_len = cfg.num_objects;
    let ap = s
        .frame_patterns
        .iter()
        .enumerate()
        .filter(|&(_, &p)| p == qp)
        .flat_map(|(t, _)| s.object_patterns[t * s_len..(t + 1) * s_len].iter().flatten())
        .copied()
        .find(|&p| p >= nq)?;
    match cfg.task {
        TaskMode::Mc => s.candidates.iter().position(|c| c.contains(&ap)),
        TaskMode::Oe => Some(ap - nq),
    }
}

/// `|selected ∩ planted| / |planted|`.
pub fn rationale_recall(selected: &[usize], planted: &[usize]) -> f64 {
    if planted.is_empty() {
        return 0.0;
    }
    let hits = planted.iter().filter(|p| selected.contains(p)).count();
    hits as f64 / planted.len() as f64
}

/// Monte Carlo estimate of the recall of a uniformly random `m`-subset of
/// `0..num_frames` against `planted`.
pub fn random_recall_baseline(num_frames: usize, m: usize, planted: &[usize], draws: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = m.min(num_frames);
    let total: f64 = (0..draws)
        .map(|_| {
            let pick = sample_indices(&mut rng, num_frames, m).into_vec();
            rationale_recall(&pick, planted)
        })
        .sum();
    total / draws as f64
}

/// Count-matched random baseline averaged over samples: for each sample,
/// the expected recall of as many random frames as the model selected.
pub fn matched_random_baseline(num_frames: usize, counts_and_planted: &[(usize, &[usize])], draws: usize, seed: u64) -> f64 {
    if counts_and_planted.is_empty() {
        return 0.0;
    }
    // recall of a random subset depends only on (m, |planted|)
    let mut cache: HashMap<(usize, usize), f64> = HashMap::new();
    let total: f64 = counts_and_planted
        .iter()
        .map(|&(m, planted)| {
            let k = planted.len();
            *cache.entry((m, k)).or_insert_with(|| {
                let canonical: Vec<usize> = (0..k).collect();
                random_recall_baseline(num_frames, m, &canonical, draws, mix_seed(seed, (m * 1000 + k) as u64))
            })
        })
        .sum();
    total / counts_and_planted.len() as f64
}

/// Summary counts for a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub samples: usize,
    /// Frequency of each label value.
    pub label_counts: Vec<usize>,
    /// Frequency of each answer pattern, indexed from the first answer pattern.
    pub answer_counts: Vec<usize>,
    pub mean_planted_frames: f64,
    /// Fraction of samples whose stored label the oracle reproduces.
    pub oracle_agreement: f64,
}

impl Dataset {
    pub fn stats(&self) -> DatasetStats {
        let cfg = &self.config;
        let n_labels = match cfg.task {
            TaskMode::Mc => cfg.num_choices,
            TaskMode::Oe => cfg.num_classes,
        };
        let nq = cfg.num_query_patterns();
        let mut label_counts = vec![0; n_labels];
        let mut answer_counts = vec![0; cfg.num_classes];
        let mut agree = 0;
        for s in &self.samples {
            label_counts[s.label] += 1;
            answer_counts[s.answer_pattern - nq] += 1;
            agree += usize::from(oracle_answer(cfg, s) == Some(s.label));
        }
        let n = self.samples.len().max(1) as f64;
        DatasetStats {
            samples: self.samples.len(),
            label_counts,
            answer_counts,
            mean_planted_frames: self.samples.iter().map(|s| s.planted_frames.len() as f64).sum::<f64>() / n,
            oracle_agreement: agree as f64 / n,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = toml::to_string(&self.config).map_err(|e| Error::format("dataset header", e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(DATASET_MAGIC);
        put_u32(&mut out, header.len());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.samples.len() as u64).to_le_bytes());
        for s in &self.samples {
            let (t, so, d) = (s.video.num_frames(), s.video.num_objects(), s.video.width());
            for v in [t, so, d] {
                put_u32(&mut out, v);
            }
            for v in s.video.frames.data().iter().chain(s.video.objects.data()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
            put_list(&mut out, &s.question_tokens);
            put_u32(&mut out, s.candidates.len());
            for c in &s.candidates {
                put_list(&mut out, c);
            }
            put_u32(&mut out, s.label);
            put_list(&mut out, &s.planted_frames);
            put_u32(&mut out, s.query_pattern);
            put_u32(&mut out, s.answer_pattern);
            for &p in &s.frame_patterns {
                put_u32(&mut out, p);
            }
            for p in &s.object_patterns {
                out.extend_from_slice(&p.map_or(NO_PATTERN, |v| v as u32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "dataset");
        if r.take(8)? != DATASET_MAGIC {
            return Err(Error::format("dataset", "bad magic"));
        }
        let hlen = r.u32()? as usize;
        let header = std::str::from_utf8(r.take(hlen)?).map_err(|e| Error::format("dataset header", e.to_string()))?;
        let config: SyntheticConfig =
            toml::from_str(header).map_err(|e| Error::format("dataset header", e.to_string()))?;
        let count = r.u64()? as usize;
        let mut samples = Vec::with_capacity(count);
        for _ in 0..count {
            let (t, so, d) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
            let frames = (0..t * d).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let objects = (0..t * so * d).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let video = VideoFeatures::new(Tensor::new(&[t, d], frames)?, Tensor::new(&[t, so, d], objects)?)?;
            let question_tokens = get_list(&mut r)?;
            let nc = r.u32()? as usize;
            let candidates = (0..nc).map(|_| get_list(&mut r)).collect::<Result<Vec<_>>>()?;
            let label = r.u32()? as usize;
            let planted_frames = get_list(&mut r)?;
            let query_pattern = r.u32()? as usize;
            let answer_pattern = r.u32()? as usize;
            let frame_patterns = (0..t).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
            let object_patterns = (0..t * so)
                .map(|_| r.u32().map(|v| (v != NO_PATTERN).then_some(v as usize)))
                .collect::<Result<Vec<_>>>()?;
            samples.push(SyntheticSample {
                video,
                question_tokens,
                candidates,
                label,
                planted_frames,
                query_pattern,
                answer_pattern,
                frame_patterns,
                object_patterns,
            });
        }
        if !r.is_done() {
            return Err(Error::format("dataset", "trailing bytes"));
        }
        Ok(Self { config, samples })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::error::write_file(path, &self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&crate::error::read_file(path)?)
    }

    /// One JSON object per sample with the symbolic content (no raw features).
    pub fn write_jsonl(&self, mut w: impl Write) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            let rec = serde_json::json!({
                "index": i,
                "question_tokens": s.question_tokens,
                "candidates": s.candidates,
                "label": s.label,
                "planted_frames": s.planted_frames,
                "query_pattern": s.query_pattern,
                "answer_pattern": s.answer_pattern,
                "frame_patterns": s.frame_patterns,
                "object_patterns": s.object_patterns,
            });
            writeln!(w, "{rec}")?;
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_list(out: &mut Vec<u8>, v: &[usize]) {
    put_u32(out, v.len());
    for &x in v {
        put_u32(out, x);
    }
}

fn get_list(r: &mut ByteReader) -> Result<Vec<usize>> {
    let n = r.u32()? as usize;
    (0..n).map(|_| r.u32().map(|v| v as usize)).collect()
}
