//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness. Exits nonzero on a failed criterion only
//! when `RAFORMER_ACCEPTANCE_STRICT` is set, so the measured outcome is always
//! printed in full.

mod common;

use std::collections::BTreeSet;
use std::time::Instant;

use common::gradcheck::{case_error, model_cases, model_error, multi_head_attention_errors, op_cases, FD_TOL};
use common::oracles::{exhaustive_nearest, mc_logits, object_gradients, permutation, permute_rows, wca_encoder};
use common::{random_tensor, rng};
use rand::Rng;
use raformer::decoder::AnswerDecoder;
use raformer::encoder::leap_mask;
use raformer::fuser::{cumulative_distribution, interaction_probabilities, inverse_transform_sample, InteractionMap};
use raformer::train::{self, Ablation, AblationRow, SweepMode, TrainOutcome};
use raformer::{AttentionConfig, EncoderVariant, ParamStore, RunConfig, TaskMode, Tensor};

struct Report {
    failed: Vec<u8>,
}

impl Report {
    fn line(&mut self, id: u8, name: &str, pass: bool, detail: String) {
        println!("[{}] {id:>2} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failed.push(id);
        }
    }
}

fn gradient_suite(r: &mut Report) {
    let start = Instant::now();
    let ops = op_cases();
    let mut worst = ("", 0.0f64);
    for (i, c) in ops.iter().enumerate() {
        let e = case_error(c, i as u64 + 1);
        if e > worst.1 {
            worst = (c.name, e);
        }
    }
    let (inputs, params) = multi_head_attention_errors(24);
    for (name, e) in [("multi_head_attention", inputs.max(params))] {
        if e > worst.1 {
            worst = (name, e);
        }
    }
    let models = model_cases();
    let n_models = models.len();
    for (i, (name, model, data)) in models.into_iter().enumerate() {
        let e = model_error(model, data, 31 + i as u64);
        if e > worst.1 {
            worst = (name, e);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    r.line(
        1,
        "gradient suite",
        worst.1 < FD_TOL && secs < 120.0,
        format!(
            "{} ops + attention + {n_models} model configs, worst rel err {:.2e} ({}) < {FD_TOL:e}; {secs:.1} s < 120 s",
            ops.len(),
            worst.1,
            worst.0
        ),
    );
}

fn sampler_oracle(r: &mut Report) {
    let start = Instant::now();
    let mut g = rng(2024);
    let mut mismatches = 0;
    for i in 0..1000 {
        let (t, l) = (g.gen_range(1..=8), g.gen_range(1..=8));
        let z: Vec<f64> = if i % 2 == 0 {
            (0..t * l).map(|_| g.gen_range(-4.0..4.0)).collect()
        } else {
            (0..t * l).map(|_| f64::from(g.gen_range(0u8..3))).collect()
        };
        let n = g.gen_range(1..=t * l);
        let p = interaction_probabilities(&InteractionMap::new(Tensor::new(&[t, l], z).unwrap()).unwrap());
        let got = inverse_transform_sample(&cumulative_distribution(&p), n).unwrap();
        mismatches += usize::from(got != exhaustive_nearest(p.data(), n));
    }
    let tie = Tensor::new(&[1, 4], vec![0.7, 0.1, 0.1, 0.1]).unwrap();
    let tie_case = inverse_transform_sample(&cumulative_distribution(&tie), 2).unwrap();
    let secs = start.elapsed().as_secs_f64();
    r.line(
        2,
        "sampling oracle equivalence",
        mismatches == 0 && tie_case == [0, 0] && secs < 10.0,
        format!("{mismatches}/1000 mismatches, tie case -> {tie_case:?}; {secs:.2} s < 10 s"),
    );
}

fn leap_counts(r: &mut Report) {
    let mut bad = 0;
    for t in 1..=16 {
        for e in 1..=t {
            let expected: usize = (0..e).map(|g| (0..t).filter(|i| i % e == g).count().pow(2)).sum();
            bad += usize::from(leap_mask(t, e).count_allowed() != expected);
        }
    }
    let pairs: BTreeSet<_> = leap_mask(4, 2).pairs().into_iter().collect();
    let off: Vec<_> = pairs.iter().filter(|(i, j)| i < j).collect();
    let example = off == [&(0, 2), &(1, 3)] && (0..4).all(|i| pairs.contains(&(i, i))) && pairs.len() == 8;
    r.line(
        3,
        "leap-attention mask",
        bad == 0 && example,
        format!("{bad} count mismatches over T<=16, E<=T; T=4 E=2 off-diagonal pairs {off:?}"),
    );
}

fn wca_locality(r: &mut Report) {
    let radius = 3;
    let (enc, store) = wca_encoder(vec![1, 3, 5, 7], EncoderVariant::Full);
    let grads = object_gradients(&enc, &store, 0, false);
    let leak: f64 = grads[radius + 1..].iter().flatten().map(|v| v.abs()).sum();
    let inside = grads[..=radius].iter().all(|g| g.iter().any(|&v| v != 0.0));
    r.line(
        4,
        "WCA locality",
        leak == 0.0 && inside,
        format!("sum |d f'_0 / d objects(t > {radius})| = {leak:e}, frames 0..={radius} all nonzero: {inside}"),
    );
}

fn decoder_equivariance(r: &mut Report) {
    let mut g = rng(77);
    let (mut cand_err, mut mem_err) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let dec = AnswerDecoder::new("dec", AttentionConfig::new(16, 4).unwrap(), 2, 2, TaskMode::Mc, 0).unwrap();
        let mut store = ParamStore::new();
        dec.init(&mut store, &mut g);
        let (choices, rows) = (g.gen_range(2..7), g.gen_range(1..12));
        let q = random_tensor(&mut g, &[choices, 16], 1.0);
        let m = random_tensor(&mut g, &[rows, 16], 1.0);
        let keys: Vec<u64> = (0..12).map(|_| g.gen()).collect();
        let base = mc_logits(&dec, &store, &q, &m);
        let cp = permutation(choices, &keys);
        let permuted = mc_logits(&dec, &store, &permute_rows(&q, &cp), &m);
        for (i, &src) in cp.iter().enumerate() {
            cand_err = cand_err.max((permuted[i] - base[src]).abs());
        }
        let shuffled = mc_logits(&dec, &store, &q, &permute_rows(&m, &permutation(rows, &keys)));
        for (a, b) in shuffled.iter().zip(&base) {
            mem_err = mem_err.max((a - b).abs());
        }
    }
    r.line(
        5,
        "MC decoder equivariance",
        cand_err < 1e-9 && mem_err < 1e-9,
        format!("100 instances, candidate perm max diff {cand_err:.1e}, memory perm max diff {mem_err:.1e} (< 1e-9)"),
    );
}

/// Default synthetic task and model; the learning rate is the one setting
/// that differs from the defaults.
fn acceptance_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.optim.lr = 3e-4;
    cfg
}

fn main() {
    let mut r = Report { failed: Vec::new() };
    gradient_suite(&mut r);
    sampler_oracle(&mut r);
    leap_counts(&mut r);
    wca_locality(&mut r);
    decoder_equivariance(&mut r);

    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| -> (TrainOutcome, f64) {
        let cfg = RunConfig {
            output_dir: Some(dir.path().join(name)),
            ..acceptance_config()
        };
        let start = Instant::now();
        let out = train::train(&cfg).unwrap();
        (out, start.elapsed().as_secs_f64())
    };

    let (first, secs) = run("a");
    let best = first.best().eval.clone();
    let last = first.history.last().unwrap().eval.accuracy;
    r.line(
        6,
        "end-to-end learning",
        best.accuracy >= 0.90 && secs < 600.0,
        format!(
            "eval accuracy {:.3} at epoch {} (final {last:.3}, chance 0.20) >= 0.90; {secs:.0} s < 600 s",
            best.accuracy, first.best_epoch
        ),
    );

    let margin = best.rationale_recall - best.random_recall_baseline;
    r.line(
        7,
        "rationale recovery",
        margin >= 0.20,
        format!(
            "recall {:.3} vs random {:.3}, margin {margin:+.3} >= +0.20 (mean |f^c| {:.2})",
            best.rationale_recall, best.random_recall_baseline, best.mean_critical_frames
        ),
    );

    let start = Instant::now();
    let ns = [1, 2, 5, 10, 20, 40];
    let sweep = train::sweep_n(&acceptance_config(), &ns, &SweepMode::Reevaluate(first.best_params.clone())).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let acc = |n: usize| sweep.iter().find(|row| row.n == n).unwrap().accuracy;
    let csv = train::sweep_csv(&sweep);
    r.line(
        8,
        "redundancy curve",
        acc(1) < acc(10) && sweep.len() == ns.len() && secs < 3600.0,
        format!("accuracy N=1 {:.3} < N=10 {:.3}; {} rows in {secs:.1} s", acc(1), acc(10), sweep.len()),
    );
    print!("{}", indent(&csv));

    let mut rows = vec![AblationRow {
        variant: Ablation::None,
        best_epoch: first.best_epoch,
        metrics: best.clone(),
    }];
    for v in [Ablation::WithoutWca, Ablation::WithoutAs, Ablation::HardTopn] {
        rows.push(train::ablate(&acceptance_config(), v).unwrap());
    }
    let beaten: Vec<&str> = rows[1..]
        .iter()
        .filter(|row| row.metrics.accuracy > best.accuracy)
        .map(|row| row.variant.name())
        .collect();
    let summary: Vec<String> = rows.iter().map(|row| format!("{} {:.3}", row.variant.name(), row.metrics.accuracy)).collect();
    r.line(
        9,
        "ablation direction",
        beaten.is_empty(),
        format!("{}; variants above full model: {beaten:?}", summary.join(", ")),
    );
    print!("{}", indent(&train::ablation_report(&rows)));

    let (_, _) = run("b");
    let a = std::fs::read(dir.path().join("a/metrics.jsonl")).unwrap();
    let b = std::fs::read(dir.path().join("b/metrics.jsonl")).unwrap();
    r.line(
        10,
        "determinism",
        a == b && !a.is_empty(),
        format!("metrics.jsonl {} bytes vs {} bytes, identical: {}", a.len(), b.len(), a == b),
    );

    println!("{}/10 criteria passed", 10 - r.failed.len());
    if !r.failed.is_empty() && std::env::var_os("RAFORMER_ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}

fn indent(text: &str) -> String {
    text.lines().map(|l| format!("      {l}\n")).collect()
}
