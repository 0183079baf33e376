//! Trains once, then re-evaluates the same weights at several N.
//!
//! cargo run --release --example sweep_n -- [epochs]

use raformer::train::{sweep_csv, sweep_n, train, SweepMode};
use raformer::RunConfig;

fn main() -> raformer::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.optim.epochs = std::env::args().nth(1).map_or(3, |s| s.parse().expect("epochs must be an integer"));
    cfg.optim.lr = 3e-4;
    cfg.split.train_samples = 400;
    cfg.split.eval_samples = 100;
    let trained = train(&cfg)?;
    let rows = sweep_n(&cfg, &[1, 2, 5, 10, 20, 40], &SweepMode::Reevaluate(trained.best_params))?;
    print!("{}", sweep_csv(&rows));
    Ok(())
}
