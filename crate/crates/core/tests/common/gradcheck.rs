//! Central finite differences against tape gradients.

use rand::Rng;
use raformer::attention::{scaled_dot_product, AttentionMask, HeadMasks};
use raformer::params::Grads;
use raformer::synthetic::generate_dataset;
use raformer::{
    AttentionConfig, EncoderVariant, Graph, ModelConfig, MultiHeadAttention, ParamStore, RaFormer, SamplerMode,
    SyntheticConfig, SyntheticSample, Tape, TaskMode, Tensor, Var,
};

use super::{random_tensor, rng};

pub const FD_STEP: f64 = 1e-5;
pub const FD_POINTS: usize = 20;
pub const FD_TOL: f64 = 1e-4;

pub type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Var + 'a;

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central difference of `f` at coordinate `i` of `inputs[k]`.
pub fn central_difference(f: &dyn Fn(&[Tensor]) -> f64, inputs: &[Tensor], k: usize, i: usize) -> f64 {
    let mut plus = inputs.to_vec();
    plus[k].data_mut()[i] += FD_STEP;
    let mut minus = inputs.to_vec();
    minus[k].data_mut()[i] -= FD_STEP;
    (f(&plus) - f(&minus)) / (2.0 * FD_STEP)
}

/// Checks `analytic` against central differences at `FD_POINTS` random
/// coordinates spread over all inputs. Returns the worst relative error.
pub fn check_points(
    f: &dyn Fn(&[Tensor]) -> f64,
    inputs: &[Tensor],
    analytic: &[Vec<f64>],
    rng: &mut impl Rng,
) -> f64 {
    let total: usize = inputs.iter().map(Tensor::len).sum();
    assert!(total > 0);
    let mut worst = 0.0f64;
    for _ in 0..FD_POINTS {
        let mut flat = rng.gen_range(0..total);
        let mut k = 0;
        while flat >= inputs[k].len() {
            flat -= inputs[k].len();
            k += 1;
        }
        let numeric = central_difference(f, inputs, k, flat);
        worst = worst.max(relative_error(analytic[k][flat], numeric));
    }
    worst
}

/// `sum(op(inputs) ⊙ R)` for a fixed random `R`, so every output entry matters.
pub fn weighted_loss(tape: &mut Tape, out: Var) -> Var {
    let shape = tape.shape(out).to_vec();
    let weights = random_tensor(&mut rng(99), &shape, 1.0);
    let w = tape.constant(weights);
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod)
}

pub fn evaluate(build: &Build, inputs: &[Tensor]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let loss = weighted_loss(&mut tape, out);
    tape.value(loss).item()
}

pub fn analytic(build: &Build, inputs: &[Tensor]) -> Vec<Vec<f64>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let loss = weighted_loss(&mut tape, out);
    tape.backward(loss).unwrap();
    vars.iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect()
}

/// Worst relative error of `build` at `FD_POINTS` random coordinates.
pub fn op_error(shapes: &[&[usize]], seed: u64, build: &Build) -> f64 {
    let mut r = rng(seed);
    let inputs: Vec<Tensor> = shapes.iter().map(|s| random_tensor(&mut r, s, 1.0)).collect();
    let grads = analytic(build, &inputs);
    let f = |xs: &[Tensor]| evaluate(build, xs);
    check_points(&f, &inputs, &grads, &mut r)
}


/// Finite differences over `FD_POINTS` random parameter coordinates.
pub fn check_store(
    store: &ParamStore,
    grads: &Grads,
    r: &mut impl Rng,
    f: &dyn Fn(&ParamStore) -> f64,
) -> f64 {
    let paths: Vec<(String, usize)> = store.iter().map(|(p, t)| (p.clone(), t.len())).collect();
    let total: usize = paths.iter().map(|(_, n)| n).sum();
    let mut worst = 0.0f64;
    let mut largest = 0.0f64;
    for _ in 0..FD_POINTS {
        let mut flat = r.gen_range(0..total);
        let (path, _) = paths
            .iter()
            .find(|(_, n)| {
                if flat < *n {
                    true
                } else {
                    flat -= n;
                    false
                }
            })
            .unwrap();
        let mut plus = store.clone();
        plus.get_mut(path).unwrap().data_mut()[flat] += FD_STEP;
        let mut minus = store.clone();
        minus.get_mut(path).unwrap().data_mut()[flat] -= FD_STEP;
        let numeric = (f(&plus) - f(&minus)) / (2.0 * FD_STEP);
        let a = grads.get(path).map_or(0.0, |g| g[flat]);
        worst = worst.max(relative_error(a, numeric));
        largest = largest.max(numeric.abs());
    }
    assert!(largest > 1e-6, "every checked coordinate had a vanishing gradient");
    worst
}

/// Loss of one sample, plus the flat indices the sampler chose.
pub fn model_loss(model: &RaFormer, store: &ParamStore, sample: &SyntheticSample) -> (f64, Vec<usize>) {
    let mut g = Graph::new(store, false);
    let (loss, fwd) = model.loss(&mut g, sample).unwrap();
    (g.value(loss).item(), fwd.selection.flat_indices)
}

/// Worst relative error of the parameter gradients of one sample's loss.
pub fn model_error(cfg: ModelConfig, data: SyntheticConfig, seed: u64) -> f64 {
    let model = RaFormer::new(cfg, data.clone()).unwrap();
    let store = model.init_params(seed);
    let sample = &generate_dataset(&data, 1).unwrap().samples[0];
    let grads = {
        let mut g = Graph::new(&store, true);
        let (loss, _) = model.loss(&mut g, sample).unwrap();
        g.backward(loss).unwrap()
    };
    let (_, chosen) = model_loss(&model, &store, sample);
    let mut r = rng(seed);
    check_store(&store, &grads, &mut r, &|s| {
        let (loss, sel) = model_loss(&model, s, sample);
        assert_eq!(sel, chosen, "perturbation changed the sampled interactions");
        loss
    })
}

pub fn small_data(task: TaskMode) -> SyntheticConfig {
    SyntheticConfig {
        num_frames: 8,
        task,
        ..SyntheticConfig::default()
    }
}

pub fn small_model() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_heads: 2,
        window_sizes: vec![1, 3],
        leap_step: 2,
        num_samples: 6,
        ..ModelConfig::default()
    }
}


pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub build: Box<Build<'static>>,
}

fn case(name: &'static str, shapes: &[&[usize]], build: impl Fn(&mut Tape, &[Var]) -> Var + 'static) -> OpCase {
    OpCase {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        build: Box::new(build),
    }
}

/// Every differentiable tape operation, on small random inputs.
pub fn op_cases() -> Vec<OpCase> {
    let mask = AttentionMask::from_fn(3, 5, |i, j| (i + j) % 2 == 0 || j == 0);
    vec![
        case("matmul", &[&[3, 4], &[4, 5]], |t, v| t.matmul(v[0], v[1]).unwrap()),
        case("matmul_nt", &[&[3, 4], &[5, 4]], |t, v| t.matmul_nt(v[0], v[1]).unwrap()),
        case("linear", &[&[3, 4], &[4, 2], &[2]], |t, v| t.linear(v[0], v[1], v[2]).unwrap()),
        case("transpose", &[&[3, 4]], |t, v| t.transpose(v[0]).unwrap()),
        case("add", &[&[3, 4], &[3, 4]], |t, v| t.add(v[0], v[1]).unwrap()),
        case("mul", &[&[3, 4], &[3, 4]], |t, v| t.mul(v[0], v[1]).unwrap()),
        case("scale", &[&[3, 4]], |t, v| t.scale(v[0], -1.7)),
        case("add_const", &[&[3, 4]], |t, v| t.add_const(v[0], &Tensor::full(&[3, 4], 0.3)).unwrap()),
        case("add_row", &[&[3, 4], &[4]], |t, v| t.add_row(v[0], v[1]).unwrap()),
        case("gelu", &[&[3, 4]], |t, v| t.gelu(v[0])),
        case("softmax_rows", &[&[3, 5]], |t, v| t.softmax_rows(v[0])),
        case("layer_norm", &[&[3, 6], &[6], &[6]], |t, v| t.layer_norm(v[0], v[1], v[2]).unwrap()),
        case("cross_entropy", &[&[3, 5]], |t, v| t.cross_entropy(v[0], &[0, 4, 2]).unwrap()),
        case("concat_rows", &[&[2, 3], &[4, 3]], |t, v| t.concat_rows(&[v[0], v[1]]).unwrap()),
        case("concat_cols", &[&[2, 3], &[2, 1]], |t, v| t.concat_cols(&[v[0], v[1]]).unwrap()),
        case("slice_cols", &[&[3, 6]], |t, v| t.slice_cols(v[0], 2, 3).unwrap()),
        case("gather_rows", &[&[4, 3]], |t, v| t.gather_rows(v[0], &[3, 0, 3, 1]).unwrap()),
        case("reshape", &[&[3, 4]], |t, v| t.reshape(v[0], &[2, 6]).unwrap()),
        case("sum", &[&[3, 4]], |t, v| t.sum(v[0])),
        case("mean", &[&[3, 4]], |t, v| t.mean(v[0])),
        case("mean_rows", &[&[3, 4]], |t, v| t.mean_rows(v[0])),
        case("masked_attention", &[&[3, 4], &[5, 4], &[5, 4]], move |t, v| {
            scaled_dot_product(t, v[0], v[1], v[2], Some(&mask)).unwrap().0
        }),
        case("attention_scores", &[&[3, 4], &[5, 4], &[5, 4]], |t, v| {
            scaled_dot_product(t, v[0], v[1], v[2], None).unwrap().1
        }),
    ]
}

pub fn case_error(c: &OpCase, seed: u64) -> f64 {
    let shapes: Vec<&[usize]> = c.shapes.iter().map(Vec::as_slice).collect();
    op_error(&shapes, seed, &*c.build)
}

/// Worst errors for multi-head attention with per-head masks: `(inputs, parameters)`.
pub fn multi_head_attention_errors(seed: u64) -> (f64, f64) {
    let cfg = AttentionConfig::new(8, 2).unwrap();
    let mha = MultiHeadAttention::new("mha", cfg);
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    mha.init(&mut store, &mut r);
    let masks = [AttentionMask::from_fn(3, 4, |i, j| j <= i + 1), AttentionMask::full(3, 4)];
    let q = random_tensor(&mut r, &[3, 8], 1.0);
    let kv = random_tensor(&mut r, &[4, 8], 1.0);
    let weights = random_tensor(&mut r, &[3, 8], 1.0);

    let forward = |g: &mut Graph, q: Var, kv: Var| {
        let out = mha.forward(g, q, kv, kv, HeadMasks::PerHead(&masks)).unwrap();
        let w = g.constant(weights.clone());
        let prod = g.tape.mul(out.output, w).unwrap();
        g.tape.sum(prod)
    };
    let value = |store: &ParamStore, q: &Tensor, kv: &Tensor| {
        let mut g = Graph::new(store, false);
        let (qv, kvv) = (g.constant(q.clone()), g.constant(kv.clone()));
        let loss = forward(&mut g, qv, kvv);
        g.value(loss).item()
    };

    let mut g = Graph::new(&store, true);
    let qv = g.tape.param(q.clone());
    let kvv = g.tape.param(kv.clone());
    let loss = forward(&mut g, qv, kvv);
    g.tape.backward(loss).unwrap();
    let input_grads = vec![g.tape.grad(qv).unwrap().to_vec(), g.tape.grad(kvv).unwrap().to_vec()];
    let f = |xs: &[Tensor]| value(&store, &xs[0], &xs[1]);
    let inputs = check_points(&f, &[q.clone(), kv.clone()], &input_grads, &mut r);

    let mut g = Graph::new(&store, true);
    let (qv, kvv) = (g.constant(q.clone()), g.constant(kv.clone()));
    let loss = forward(&mut g, qv, kvv);
    let grads = g.backward(loss).unwrap();
    let params = check_store(&store, &grads, &mut r, &|s| value(s, &q, &kv));
    (inputs, params)
}

/// Full-model configurations covered by the gradient suite.
pub fn model_cases() -> Vec<(&'static str, ModelConfig, SyntheticConfig)> {
    let variant = |sampler, encoder_variant| ModelConfig {
        sampler,
        encoder_variant,
        ..small_model()
    };
    vec![
        ("multi-choice", small_model(), small_data(TaskMode::Mc)),
        ("open-ended", small_model(), small_data(TaskMode::Oe)),
        ("default shapes", ModelConfig::default(), SyntheticConfig::default()),
        ("hard top-n", variant(SamplerMode::HardTopn, EncoderVariant::Full), small_data(TaskMode::Mc)),
        ("cls, no wca", variant(SamplerMode::Cls, EncoderVariant::WithoutWca), small_data(TaskMode::Mc)),
        ("all frames, no leap", variant(SamplerMode::None, EncoderVariant::WithoutLeap), small_data(TaskMode::Mc)),
    ]
}
