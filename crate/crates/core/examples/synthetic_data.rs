//! Generates a few synthetic samples, prints one, and reports dataset stats.
//!
//! cargo run --example synthetic_data -- [count] [oe]

use raformer::synthetic::{generate_dataset, oracle_answer};
use raformer::{SyntheticConfig, TaskMode};

fn main() -> raformer::Result<()> {
    let mut args = std::env::args().skip(1);
    let count: usize = args.next().map_or(200, |s| s.parse().expect("count must be an integer"));
    let task = if args.next().as_deref() == Some("oe") { TaskMode::Oe } else { TaskMode::Mc };
    let cfg = SyntheticConfig { task, ..SyntheticConfig::default() };
    let data = generate_dataset(&cfg, count)?;
    let s = &data.samples[0];
    println!("question tokens {:?} (filler = {})", s.question_tokens, cfg.filler_token());
    println!("frame patterns  {:?}", s.frame_patterns);
    println!("planted frames  {:?}  query {} -> answer {}", s.planted_frames, s.query_pattern, s.answer_pattern);
    println!("candidates      {:?}", s.candidates);
    println!("label {}  oracle {:?}", s.label, oracle_answer(&cfg, s));
    println!("{}", serde_json::to_string_pretty(&data.stats()).expect("stats serialize"));
    Ok(())
}
