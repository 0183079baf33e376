//! Trains the default model on the synthetic task and prints per-epoch
//! evaluation metrics.
//!
//! cargo run --release --example train_synthetic -- [epochs] [lr] [train_samples]

use raformer::{train, RunConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut cfg = match std::env::var("RAFORMER_CONFIG") {
        Ok(path) => RunConfig::load(path.as_ref())?,
        Err(_) => RunConfig::default(),
    };
    if let Some(e) = args.first() {
        cfg.optim.epochs = e.parse()?;
    }
    if let Some(lr) = args.get(1) {
        cfg.optim.lr = lr.parse()?;
    }
    if let Some(n) = args.get(2) {
        cfg.split.train_samples = n.parse()?;
        cfg.split.eval_samples = (n.parse::<usize>()? / 4).max(1);
    }
    let outcome = train::train(&cfg)?;
    println!("epoch 0: accuracy {:.3}", outcome.initial.accuracy);
    for m in &outcome.history {
        println!(
            "epoch {:2}: train loss {:.4}  eval loss {:.4}  accuracy {:.3}  |f^c| {:.2}  recall {:.3} (random {:.3})  {:.1}s",
            m.epoch,
            m.train_loss,
            m.eval.loss,
            m.eval.accuracy,
            m.eval.mean_critical_frames,
            m.eval.rationale_recall,
            m.eval.random_recall_baseline,
            m.wall_clock_secs
        );
    }
    println!("best epoch {}", outcome.best_epoch);
    Ok(())
}
