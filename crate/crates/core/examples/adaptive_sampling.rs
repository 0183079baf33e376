//! From an interaction map to critical frames: flat softmax, CDF, the fixed
//! grid, nearest-CDF indices, and frame deduplication. Hard top-N for contrast.
//!
//! cargo run --example adaptive_sampling -- [N]

use raformer::fuser::{
    collect_critical_frames, cumulative_distribution, hard_topn_sample, interaction_probabilities,
    inverse_transform_sample, sampling_grid, InteractionMap,
};
use raformer::Tensor;

fn main() {
    let n: usize = std::env::args().nth(1).map_or(4, |s| s.parse().expect("N must be an integer"));
    // 4 frames x 3 words; frame 2 matches the question strongly
    let z = Tensor::from_rows(&[
        vec![0.1, 0.0, 0.2],
        vec![0.3, 0.1, 0.0],
        vec![2.5, 1.9, 0.4],
        vec![0.0, 0.2, 0.1],
    ])
    .unwrap();
    let map = InteractionMap::new(z).unwrap();
    let p = interaction_probabilities(&map);
    let cdf = cumulative_distribution(&p);
    println!("p   {:.3?}", p.data());
    println!("cdf {:.3?}", cdf.data());
    println!("grid {:.3?}", sampling_grid(n));
    let flat = inverse_transform_sample(&cdf, n).unwrap();
    let sel = collect_critical_frames(&flat, 4, 3).unwrap();
    println!("adaptive: flat {flat:?} -> frames {:?}", sel.frame_indices);
    let top = hard_topn_sample(&map, n).unwrap();
    let sel = collect_critical_frames(&top, 4, 3).unwrap();
    println!("hard top-{n}: flat {top:?} -> frames {:?}", sel.frame_indices);

    let tie = cumulative_distribution(&Tensor::new(&[1, 4], vec![0.7, 0.1, 0.1, 0.1]).unwrap());
    println!("tie case p=[0.7,0.1,0.1,0.1], N=2 -> {:?}", inverse_transform_sample(&tie, 2).unwrap());
}
