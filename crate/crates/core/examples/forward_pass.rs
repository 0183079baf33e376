//! One untrained forward pass per task mode: encoder output, interaction
//! map, selected frames, and answer logits.
//!
//! cargo run --example forward_pass

use raformer::synthetic::generate_dataset;
use raformer::{Graph, ModelConfig, RaFormer, SyntheticConfig, TaskMode};

fn main() -> raformer::Result<()> {
    for task in [TaskMode::Mc, TaskMode::Oe] {
        let data = SyntheticConfig { task, ..SyntheticConfig::default() };
        let model = RaFormer::new(ModelConfig::default(), data.clone())?;
        let params = model.init_params(0);
        let sample = &generate_dataset(&data, 1)?.samples[0];
        let mut g = Graph::new(&params, false);
        let fwd = model.forward(&mut g, sample)?;
        println!("{task:?}: {} parameters", params.num_scalars());
        println!("  encoded frames {:?}, map {}x{}", g.value(fwd.encoded).shape(), fwd.map.num_frames(), fwd.map.num_words());
        println!("  critical frames {:?} (planted {:?})", fwd.selection.frame_indices, sample.planted_frames);
        println!("  logits {:.4?}, label {}", g.value(fwd.logits).data(), sample.label);
    }
    Ok(())
}
