//! Training, evaluation, N-sweeps, and ablations.
//!
//! Per-sample forward/backward passes may run on worker threads, but their
//! gradients are always summed in sample order, so a `(config, seed)` pair
//! determines every reported number bit for bit.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::decoder::predict;
use crate::encoder::EncoderVariant;
use crate::error::{write_file, Error, Result};
use crate::fuser::SamplerMode;
use crate::model::RaFormer;
use crate::params::{Adam, Grads, Graph, ParamStore};
use crate::synthetic::{generate_range, matched_random_baseline, mix_seed, rationale_recall, Dataset, SyntheticSample};

/// Monte Carlo draws for the random-selection recall baseline.
pub const BASELINE_DRAWS: usize = 10_000;

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "RAFORMER_THREADS";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub samples: usize,
    pub loss: f64,
    pub accuracy: f64,
    /// Mean number of distinct critical frames per question.
    pub mean_critical_frames: f64,
    pub rationale_recall: f64,
    /// Recall of count-matched uniformly random frame subsets.
    pub random_recall_baseline: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval: EvalMetrics,
    /// Excluded from the metrics stream so that it stays reproducible.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Evaluation of the freshly initialized model.
    pub initial: EvalMetrics,
    pub history: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_params: ParamStore,
    pub final_params: ParamStore,
}

impl TrainOutcome {
    pub fn best(&self) -> &EpochMetrics {
        &self.history[self.best_epoch - 1]
    }

    /// JSON lines: an `epoch = 0` record for the initial model, then one per epoch.
    pub fn metrics_jsonl(&self) -> String {
        let mut out = String::new();
        let init = EpochMetrics {
            epoch: 0,
            train_loss: f64::NAN,
            eval: self.initial.clone(),
            wall_clock_secs: 0.0,
        };
        for m in std::iter::once(&init).chain(&self.history) {
            out.push_str(&serde_json::to_string(m).expect("metrics serialize"));
            out.push('\n');
        }
        out
    }
}

/// Worker pool sized by `RAFORMER_THREADS` (default: available cores).
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let n = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| Error::config(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?,
        Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| Error::config(e.to_string()))
}

/// Train and eval splits for a run.
pub fn load_splits(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    match &cfg.split.dataset {
        Some(path) => {
            let all = Dataset::load(path)?;
            if all.config.num_frames != cfg.data.num_frames
                || all.config.num_objects != cfg.data.num_objects
                || all.config.d_in != cfg.data.d_in
                || all.config.task != cfg.data.task
            {
                return Err(Error::config("dataset file was generated with a different [data] section"));
            }
            let n_train = all.samples.len() * 4 / 5;
            let (train, eval) = all.samples.split_at(n_train);
            Ok((
                Dataset {
                    config: all.config.clone(),
                    samples: train.to_vec(),
                },
                Dataset {
                    config: all.config.clone(),
                    samples: eval.to_vec(),
                },
            ))
        }
        None => Ok((
            generate_range(&cfg.data, 0, cfg.split.train_samples)?,
            generate_range(&cfg.data, cfg.split.train_samples, cfg.split.eval_samples)?,
        )),
    }
}

struct SampleResult {
    loss: f64,
    correct: bool,
    frames: Vec<usize>,
}

fn eval_sample(model: &RaFormer, params: &ParamStore, s: &SyntheticSample) -> Result<SampleResult> {
    let mut g = Graph::new(params, false);
    let (loss, fwd) = model.loss(&mut g, s)?;
    let pred = predict(g.value(fwd.logits).data());
    Ok(SampleResult {
        loss: g.value(loss).item(),
        correct: pred == s.label,
        frames: fwd.selection.frame_indices,
    })
}

/// Accuracy, critical-frame statistics, and recall against planted frames.
pub fn evaluate_with(pool: &rayon::ThreadPool, model: &RaFormer, params: &ParamStore, data: &Dataset) -> Result<EvalMetrics> {
    if data.samples.is_empty() {
        return Err(Error::config("evaluation set is empty"));
    }
    let fresh = model.init_params(0);
    fresh.check_compatible(params)?;
    let results: Vec<SampleResult> = pool.install(|| {
        data.samples
            .par_iter()
            .map(|s| eval_sample(model, params, s))
            .collect::<Result<Vec<_>>>()
    })?;
    let n = results.len() as f64;
    let counts: Vec<(usize, &[usize])> = results
        .iter()
        .zip(&data.samples)
        .map(|(r, s)| (r.frames.len(), s.planted_frames.as_slice()))
        .collect();
    Ok(EvalMetrics {
        samples: results.len(),
        loss: results.iter().map(|r| r.loss).sum::<f64>() / n,
        accuracy: results.iter().filter(|r| r.correct).count() as f64 / n,
        mean_critical_frames: results.iter().map(|r| r.frames.len() as f64).sum::<f64>() / n,
        rationale_recall: results
            .iter()
            .zip(&data.samples)
            .map(|(r, s)| rationale_recall(&r.frames, &s.planted_frames))
            .sum::<f64>()
            / n,
        random_recall_baseline: matched_random_baseline(model.data.num_frames, &counts, BASELINE_DRAWS, 0x5EED),
    })
}

/// How often the sampler keeps each frame count and each frame position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionStats {
    /// `histogram[m]` = samples with exactly `m` critical frames.
    pub critical_frame_histogram: Vec<usize>,
    /// Fraction of samples selecting each frame index.
    pub frame_frequency: Vec<f64>,
    /// Fraction of selected frames that are planted.
    pub planted_precision: f64,
}

pub fn selection_stats(model: &RaFormer, params: &ParamStore, data: &Dataset) -> Result<SelectionStats> {
    let pool = thread_pool()?;
    let results: Vec<SampleResult> = pool.install(|| {
        data.samples
            .par_iter()
            .map(|s| eval_sample(model, params, s))
            .collect::<Result<Vec<_>>>()
    })?;
    let t_len = model.data.num_frames;
    let mut hist = vec![0; t_len + 1];
    let mut freq = vec![0.0; t_len];
    let (mut hits, mut total) = (0usize, 0usize);
    for (r, s) in results.iter().zip(&data.samples) {
        hist[r.frames.len()] += 1;
        for &f in &r.frames {
            freq[f] += 1.0;
            hits += usize::from(s.planted_frames.contains(&f));
        }
        total += r.frames.len();
    }
    let n = results.len().max(1) as f64;
    freq.iter_mut().for_each(|v| *v /= n);
    Ok(SelectionStats {
        critical_frame_histogram: hist,
        frame_frequency: freq,
        planted_precision: hits as f64 / total.max(1) as f64,
    })
}

pub fn evaluate(model: &RaFormer, params: &ParamStore, data: &Dataset) -> Result<EvalMetrics> {
    evaluate_with(&thread_pool()?, model, params, data)
}

/// Loads a checkpoint and evaluates it on `data`.
pub fn evaluate_checkpoint(cfg: &RunConfig, checkpoint: &Path, data: &Dataset) -> Result<EvalMetrics> {
    cfg.validate()?;
    let model = RaFormer::new(cfg.model.clone(), cfg.data.clone())?;
    let params = ParamStore::load(checkpoint)?;
    evaluate(&model, &params, data)
}

fn batch_grads(
    pool: &rayon::ThreadPool,
    model: &RaFormer,
    params: &ParamStore,
    batch: &[&SyntheticSample],
) -> Result<(Grads, f64)> {
    let per_sample: Vec<(Grads, f64)> = pool.install(|| {
        batch
            .par_iter()
            .map(|s| {
                let mut g = Graph::new(params, true);
                let (loss, _) = model.loss(&mut g, s)?;
                let value = g.value(loss).item();
                Ok((g.backward(loss)?, value))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut total = Grads::default();
    let mut loss = 0.0;
    for (g, l) in &per_sample {
        total.accumulate(g);
        loss += l;
    }
    let scale = 1.0 / batch.len() as f64;
    total.scale(scale);
    Ok((total, loss * scale))
}

/// Minimizes cross-entropy on the train split, evaluating after each epoch.
/// When `output_dir` is set, writes `best.ckpt`, `metrics.jsonl`, and
/// `timing.jsonl` there.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let pool = thread_pool()?;
    let (train_set, eval_set) = load_splits(cfg)?;
    train_on(cfg, &pool, &train_set, &eval_set)
}

pub fn train_on(cfg: &RunConfig, pool: &rayon::ThreadPool, train_set: &Dataset, eval_set: &Dataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = RaFormer::new(cfg.model.clone(), cfg.data.clone())?;
    let mut params = model.init_params(cfg.seed);
    let mut adam = Adam::new(cfg.optim.lr);
    let initial = evaluate_with(pool, &model, &params, eval_set)?;

    let mut history = Vec::with_capacity(cfg.optim.epochs);
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut order: Vec<usize> = (0..train_set.samples.len()).collect();
    for epoch in 1..=cfg.optim.epochs {
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, epoch as u64));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.optim.batch_size) {
            let batch: Vec<&SyntheticSample> = chunk.iter().map(|&i| &train_set.samples[i]).collect();
            let (mut grads, loss) = batch_grads(pool, &model, &params, &batch)?;
            if cfg.optim.grad_clip > 0.0 {
                let norm = grads.l2_norm();
                if norm > cfg.optim.grad_clip {
                    grads.scale(cfg.optim.grad_clip / norm);
                }
            }
            adam.step(&mut params, &grads)?;
            loss_sum += loss;
            batches += 1;
        }
        let eval = evaluate_with(pool, &model, &params, eval_set)?;
        if best.as_ref().is_none_or(|(_, acc, _)| eval.accuracy > *acc) {
            best = Some((epoch, eval.accuracy, params.clone()));
        }
        history.push(EpochMetrics {
            epoch,
            train_loss: loss_sum / batches as f64,
            eval,
            wall_clock_secs: started.elapsed().as_secs_f64(),
        });
    }

    let (best_epoch, best_params) = match best {
        Some((e, _, p)) => (e, p),
        None => (0, params.clone()),
    };
    let outcome = TrainOutcome {
        initial,
        history,
        best_epoch,
        best_params,
        final_params: params,
    };
    if let Some(dir) = &cfg.output_dir {
        write_run(dir, cfg, &outcome)?;
    }
    Ok(outcome)
}

fn write_run(dir: &Path, cfg: &RunConfig, outcome: &TrainOutcome) -> Result<()> {
    write_file(&dir.join("config.toml"), cfg.to_toml()?.as_bytes())?;
    write_file(&dir.join("metrics.jsonl"), outcome.metrics_jsonl().as_bytes())?;
    let timing: String = outcome
        .history
        .iter()
        .map(|m| format!("{}\n", serde_json::json!({"epoch": m.epoch, "wall_clock_secs": m.wall_clock_secs})))
        .collect();
    write_file(&dir.join("timing.jsonl"), timing.as_bytes())?;
    outcome.best_params.save(&dir.join("best.ckpt"))?;
    Ok(())
}

/// How `sweep_n` obtains a model per N.
#[derive(Clone, Debug)]
pub enum SweepMode {
    /// Train a fresh model for every N.
    Retrain,
    /// Re-evaluate fixed weights, changing only N.
    Reevaluate(ParamStore),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n: usize,
    pub accuracy: f64,
    pub mean_critical_frames: f64,
    pub rationale_recall: f64,
}

/// Accuracy and critical-frame counts as a function of N.
pub fn sweep_n(cfg: &RunConfig, n_values: &[usize], mode: &SweepMode) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    if let Some(&bad) = n_values.iter().find(|&&n| n == 0) {
        return Err(Error::config(format!("N must be >= 1, got {bad}")));
    }
    let pool = thread_pool()?;
    let (train_set, eval_set) = load_splits(cfg)?;
    n_values
        .iter()
        .map(|&n| {
            let mut c = cfg.clone();
            c.model.num_samples = n;
            c.output_dir = None;
            let eval = match mode {
                SweepMode::Retrain => {
                    let outcome = train_on(&c, &pool, &train_set, &eval_set)?;
                    outcome.best().eval.clone()
                }
                SweepMode::Reevaluate(params) => {
                    let model = RaFormer::new(c.model.clone(), c.data.clone())?;
                    evaluate_with(&pool, &model, params, &eval_set)?
                }
            };
            Ok(SweepRow {
                n,
                accuracy: eval.accuracy,
                mean_critical_frames: eval.mean_critical_frames,
                rationale_recall: eval.rationale_recall,
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("n,accuracy,mean_critical_frames,rationale_recall\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.n, r.accuracy, r.mean_critical_frames, r.rationale_recall
        ));
    }
    out
}

/// Model variants compared in the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// The unmodified model.
    None,
    WithoutWca,
    WithoutLeap,
    WithoutWcaAndLeap,
    /// All frames pass to the decoder.
    WithoutAs,
    HardTopn,
    ClsSampling,
}

impl Ablation {
    pub const ALL: [Ablation; 7] = [
        Ablation::None,
        Ablation::WithoutWca,
        Ablation::WithoutLeap,
        Ablation::WithoutWcaAndLeap,
        Ablation::WithoutAs,
        Ablation::HardTopn,
        Ablation::ClsSampling,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::WithoutWca => "wo_wca",
            Ablation::WithoutLeap => "wo_la",
            Ablation::WithoutWcaAndLeap => "wo_wca_la",
            Ablation::WithoutAs => "wo_as",
            Ablation::HardTopn => "hard_topn",
            Ablation::ClsSampling => "cls_sampling",
        }
    }

    /// The run config with this variant swapped in.
    pub fn apply(self, cfg: &RunConfig) -> RunConfig {
        let mut c = cfg.clone();
        match self {
            Ablation::None => {}
            Ablation::WithoutWca => c.model.encoder_variant = EncoderVariant::WithoutWca,
            Ablation::WithoutLeap => c.model.encoder_variant = EncoderVariant::WithoutLeap,
            Ablation::WithoutWcaAndLeap => c.model.encoder_variant = EncoderVariant::WithoutWcaAndLeap,
            Ablation::WithoutAs => c.model.sampler = SamplerMode::None,
            Ablation::HardTopn => c.model.sampler = SamplerMode::HardTopn,
            Ablation::ClsSampling => c.model.sampler = SamplerMode::Cls,
        }
        c
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::config(format!("unknown ablation variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Ablation,
    pub best_epoch: usize,
    pub metrics: EvalMetrics,
}

/// Trains the variant and reports its best-epoch evaluation.
pub fn ablate(cfg: &RunConfig, variant: Ablation) -> Result<AblationRow> {
    let c = variant.apply(cfg);
    let outcome = train(&c)?;
    Ok(AblationRow {
        variant,
        best_epoch: outcome.best_epoch,
        metrics: outcome.best().eval.clone(),
    })
}

/// Comparison table: one row per variant with the accuracy change
/// relative to the first row.
pub fn ablation_report(rows: &[AblationRow]) -> String {
    let base = rows.first().map_or(0.0, |r| r.metrics.accuracy);
    let mut out = String::from("variant,accuracy,delta_vs_first,mean_critical_frames,rationale_recall,best_epoch\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.4},{:+.4},{:.3},{:.4},{}\n",
            r.variant.name(),
            r.metrics.accuracy,
            r.metrics.accuracy - base,
            r.metrics.mean_critical_frames,
            r.metrics.rationale_recall,
            r.best_epoch
        ));
    }
    out
}
