//! Short ablation study on a reduced task; prints the comparison table.
//!
//! cargo run --release --example ablation -- [epochs]

use raformer::train::{ablate, ablation_report, Ablation};
use raformer::RunConfig;

fn main() -> raformer::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.optim.epochs = std::env::args().nth(1).map_or(3, |s| s.parse().expect("epochs must be an integer"));
    cfg.optim.lr = 3e-4;
    cfg.split.train_samples = 400;
    cfg.split.eval_samples = 100;
    let mut rows = Vec::new();
    for v in Ablation::ALL {
        eprintln!("training {}", v.name());
        rows.push(ablate(&cfg, v)?);
    }
    print!("{}", ablation_report(&rows));
    Ok(())
}
