//! Reference implementations and probes shared by property and acceptance tests.

use raformer::decoder::AnswerDecoder;
use raformer::fuser::TIE_TOLERANCE;
use raformer::{EncoderConfig, EncoderVariant, Graph, ParamStore, Tensor, VideoEncoder};

use super::{random_tensor, rng};

/// Scans every index for the nearest CDF value; ties within the tolerance go
/// to the smaller index.
pub fn exhaustive_nearest(p: &[f64], n: usize) -> Vec<usize> {
    let mut cdf = Vec::with_capacity(p.len());
    let mut acc = 0.0;
    for v in p {
        acc += v;
        cdf.push(acc);
    }
    (0..n)
        .map(|i| {
            let u = (2 * i + 1) as f64 / (2 * n) as f64;
            let best = cdf.iter().map(|c| (c - u).abs()).fold(f64::INFINITY, f64::min);
            (0..cdf.len())
                .find(|&j| (cdf[j] - u).abs() <= best + TIE_TOLERANCE)
                .unwrap()
        })
        .collect()
}

/// Gradient of `sum(R ⊙ f'[frame])` with respect to every object row.
pub fn object_gradients(encoder: &VideoEncoder, store: &ParamStore, frame: usize, full: bool) -> Vec<Vec<f64>> {
    let (t, s, d) = (16, 4, encoder.cfg.d_model);
    let mut r = rng(frame as u64);
    let mut g = Graph::new(store, true);
    let frames = g.tape.param(random_tensor(&mut r, &[t, d], 1.0));
    let objects = g.tape.param(random_tensor(&mut r, &[t * s, d], 1.0));
    let out = if full {
        encoder.encode_projected(&mut g, frames, objects).unwrap()
    } else {
        encoder.window_cross_attention(&mut g, 0, frames, objects).unwrap()
    };
    let row = g.tape.gather_rows(out, &[frame]).unwrap();
    let w = g.constant(random_tensor(&mut r, &[1, d], 1.0));
    let prod = g.tape.mul(row, w).unwrap();
    let loss = g.tape.sum(prod);
    g.tape.backward(loss).unwrap();
    g.tape.grad(objects).unwrap().chunks(d * s).map(<[f64]>::to_vec).collect()
}

pub fn wca_encoder(windows: Vec<usize>, variant: EncoderVariant) -> (VideoEncoder, ParamStore) {
    let cfg = EncoderConfig {
        d_model: 4 * windows.len(),
        window_sizes: windows,
        leap_step: 4,
        depth: 1,
    };
    let enc = VideoEncoder::new("enc", cfg, variant, 8, 4).unwrap();
    let mut store = ParamStore::new();
    enc.init(&mut store, &mut rng(5));
    (enc, store)
}

pub fn mc_logits(dec: &AnswerDecoder, store: &ParamStore, queries: &Tensor, memory: &Tensor) -> Vec<f64> {
    let mut g = Graph::new(store, false);
    let q = g.constant(queries.clone());
    let m = g.constant(memory.clone());
    let out = dec.decode_mc(&mut g, q, m).unwrap();
    g.value(out).data().to_vec()
}

pub fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let rows: Vec<Vec<f64>> = perm.iter().map(|&i| t.row(i).to_vec()).collect();
    Tensor::from_rows(&rows).unwrap()
}

pub fn permutation(len: usize, keys: &[u64]) -> Vec<usize> {
    let mut p: Vec<usize> = (0..len).collect();
    p.sort_by_key(|&i| keys[i % keys.len()].wrapping_mul(i as u64 + 1));
    p
}

