//! Window, leap and intra-frame masks, and a masked multi-head attention call
//! that exports its scores.
//!
//! cargo run --example attention_masks

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use raformer::attention::HeadMasks;
use raformer::encoder::{leap_mask, window_mask};
use raformer::{AttentionConfig, AttentionMask, Graph, MultiHeadAttention, ParamStore, Tensor};

fn show(name: &str, m: &AttentionMask) {
    println!("{name} ({} allowed)", m.count_allowed());
    for r in 0..m.rows() {
        let row: String = (0..m.cols()).map(|c| if m.allowed(r, c) { '#' } else { '.' }).collect();
        println!("  {row}");
    }
}

fn main() {
    show("leap T=8 E=2", &leap_mask(8, 2));
    show("window W=3, T=6 frames x S=2 objects", &window_mask(6, 2, 3));

    let cfg = AttentionConfig::new(8, 2).unwrap();
    let mha = MultiHeadAttention::new("demo", cfg);
    let mut store = ParamStore::new();
    mha.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
    let mut g = Graph::new(&store, false);
    let x = g.constant(Tensor::new(&[4, 8], (0..32).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap());
    let causal = AttentionMask::from_fn(4, 4, |i, j| j <= i);
    let out = mha.forward(&mut g, x, x, x, HeadMasks::Shared(&causal)).unwrap();
    println!("causal scores (masked entries hold the sentinel):");
    for r in 0..4 {
        let row: Vec<String> = g.value(out.scores).row(r).iter().map(|v| format!("{v:>9.3e}")).collect();
        println!("  {}", row.join(" "));
    }
}
