//! Command-line front end. Errors print one line to stderr,
//! `raformer: error[<code>]: <message>`, and exit with status 2 for usage
//! errors and 1 otherwise.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use raformer::synthetic::generate_range;
use raformer::train::{self, Ablation, SweepMode};
use raformer::{Error, ParamStore, RaFormer, RunConfig, SamplerMode, TaskMode};

#[derive(Parser)]
#[command(name = "raformer", version, about = "Redundancy-aware video QA on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory, depending on the subcommand.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Sampled interactions per question.
    #[arg(long, global = true)]
    n: Option<usize>,
    #[arg(long, global = true)]
    leap_step: Option<usize>,
    /// Comma-separated window sizes, one per encoder head.
    #[arg(long, global = true, value_delimiter = ',')]
    windows: Option<Vec<usize>>,
    /// adaptive | hard_topn | cls | none
    #[arg(long, global = true)]
    sampler: Option<SamplerMode>,
    /// mc | oe
    #[arg(long, global = true)]
    task: Option<TaskMode>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (binary) plus a JSON-lines dump.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Number of samples; defaults to train + eval sizes.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train and write checkpoints and metrics to --out.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on the eval split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Accuracy and critical-frame counts as a function of N.
    SweepN {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "1,2,5,10,20,40")]
        n_values: Vec<usize>,
        /// Train a fresh model per N instead of re-evaluating one model.
        #[arg(long)]
        retrain: bool,
        /// Weights to re-evaluate; trained from the config when omitted.
        #[arg(long, conflicts_with = "retrain")]
        checkpoint: Option<PathBuf>,
    },
    /// Train ablated variants and print a comparison table.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated: none, wo_wca, wo_la, wo_wca_la, wo_as, hard_topn, cls_sampling.
        #[arg(long, value_delimiter = ',', default_value = "none,wo_wca,wo_as,hard_topn")]
        variants: Vec<Ablation>,
    },
    /// Dataset statistics, plus selection statistics with --checkpoint.
    Stats {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn resolve(common: &Common) -> raformer::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(n) = common.n {
        cfg.model.num_samples = n;
    }
    if let Some(e) = common.leap_step {
        cfg.model.leap_step = e;
    }
    if let Some(w) = &common.windows {
        cfg.model.window_sizes = w.clone();
    }
    if let Some(s) = common.sampler {
        cfg.model.sampler = s;
    }
    if let Some(t) = common.task {
        cfg.data.task = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_or_print(out: Option<&Path>, text: &str) -> raformer::Result<()> {
    match out {
        Some(path) => raformer::error::write_file(path, text.as_bytes())?,
        None => print!("{text}"),
    }
    Ok(())
}

fn json_line<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("report serializes") + "\n"
}

fn run(command: Command) -> raformer::Result<()> {
    match command {
        Command::Generate { common, count } => {
            let cfg = resolve(&common)?;
            let out = common
                .out
                .ok_or_else(|| Error::Config("generate needs --out <file>".into()))?;
            let count = count.unwrap_or(cfg.split.train_samples + cfg.split.eval_samples);
            let data = generate_range(&cfg.data, 0, count)?;
            data.save(&out)?;
            let mut dump = Vec::new();
            data.write_jsonl(&mut dump)?;
            write_or_print(Some(&out.with_extension("jsonl")), &String::from_utf8_lossy(&dump))?;
            print!("{}", json_line(&data.stats()));
        }
        Command::Train { common } => {
            let mut cfg = resolve(&common)?;
            if common.out.is_some() {
                cfg.output_dir = common.out.clone();
            }
            let outcome = train::train(&cfg)?;
            for m in &outcome.history {
                eprintln!(
                    "epoch {:>3}  train_loss {:.4}  eval_acc {:.4}  |f^c| {:.2}  recall {:.3}",
                    m.epoch, m.train_loss, m.eval.accuracy, m.eval.mean_critical_frames, m.eval.rationale_recall
                );
            }
            print!(
                "{}",
                json_line(&serde_json::json!({
                    "best_epoch": outcome.best_epoch,
                    "best": outcome.best().eval,
                }))
            );
        }
        Command::Eval { common, checkpoint } => {
            let cfg = resolve(&common)?;
            let (_, eval) = train::load_splits(&cfg)?;
            let metrics = train::evaluate_checkpoint(&cfg, &checkpoint, &eval)?;
            write_or_print(common.out.as_deref(), &json_line(&metrics))?;
        }
        Command::SweepN {
            common,
            n_values,
            retrain,
            checkpoint,
        } => {
            let cfg = resolve(&common)?;
            let mode = if retrain {
                SweepMode::Retrain
            } else {
                let params = match checkpoint {
                    Some(path) => ParamStore::load(&path)?,
                    None => train::train(&RunConfig {
                        output_dir: None,
                        ..cfg.clone()
                    })?
                    .best_params,
                };
                SweepMode::Reevaluate(params)
            };
            let rows = train::sweep_n(&cfg, &n_values, &mode)?;
            write_or_print(common.out.as_deref(), &train::sweep_csv(&rows))?;
        }
        Command::Ablate { common, variants } => {
            let cfg = resolve(&common)?;
            let rows = variants
                .iter()
                .map(|&v| {
                    eprintln!("training variant {}", v.name());
                    train::ablate(&cfg, v)
                })
                .collect::<raformer::Result<Vec<_>>>()?;
            write_or_print(common.out.as_deref(), &train::ablation_report(&rows))?;
        }
        Command::Stats { common, checkpoint } => {
            let cfg = resolve(&common)?;
            let (train_set, eval_set) = train::load_splits(&cfg)?;
            let mut report = serde_json::json!({
                "train": train_set.stats(),
                "eval": eval_set.stats(),
            });
            if let Some(path) = checkpoint {
                let model = RaFormer::new(cfg.model.clone(), cfg.data.clone())?;
                let params = ParamStore::load(&path)?;
                report["selection"] = serde_json::to_value(train::selection_stats(&model, &params, &eval_set)?)
                    .expect("stats serialize");
            }
            write_or_print(common.out.as_deref(), &json_line(&report))?;
        }
    }
    Ok(())
}

fn one_line(msg: &str) -> String {
    msg.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("raformer: error[usage]: {}", one_line(first.trim_start_matches("error: ")));
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("raformer: error[{}]: {}", e.code(), one_line(&e.to_string()));
            ExitCode::FAILURE
        }
    }
}
