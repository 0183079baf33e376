//! Run configuration files: round trips, defaults, and rejection.

use proptest::prelude::*;
use raformer::{RunConfig, SamplerMode, TaskMode};

fn sampler() -> impl Strategy<Value = SamplerMode> {
    prop_oneof![
        Just(SamplerMode::Adaptive),
        Just(SamplerMode::HardTopn),
        Just(SamplerMode::Cls),
        Just(SamplerMode::None),
    ]
}

proptest! {
    #[test]
    fn toml_round_trip(
        seed in 0..=i64::MAX as u64,
        n in 1usize..64,
        windows in prop::collection::vec((0usize..4).prop_map(|h| 2 * h + 1), 1..5),
        sampler in sampler(),
        oe in any::<bool>(),
        lr in 1e-6f64..1e-1,
        noise in 0.0f64..1.0,
    ) {
        let mut cfg = RunConfig { seed, ..RunConfig::default() };
        cfg.model.num_samples = n;
        cfg.model.window_sizes = windows;
        cfg.model.sampler = sampler;
        cfg.data.task = if oe { TaskMode::Oe } else { TaskMode::Mc };
        cfg.data.noise_sigma = noise;
        cfg.optim.lr = lr;
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}

#[test]
fn load_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(&path, "seed = 9\n[data]\ntask = \"oe\"\n[model]\nsampler = \"hard_topn\"\n").unwrap();
    let cfg = RunConfig::load(&path).unwrap();
    assert_eq!(cfg.seed, 9);
    assert_eq!(cfg.data.task, TaskMode::Oe);
    assert_eq!(cfg.model.sampler, SamplerMode::HardTopn);
    cfg.validate().unwrap();
}

#[test]
fn load_errors_name_the_problem() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.toml");
    let err = RunConfig::load(&missing).unwrap_err();
    assert_eq!(err.code(), "io");
    assert!(err.to_string().contains("absent.toml"));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[model]\nsampler = \"random\"\n").unwrap();
    assert_eq!(RunConfig::load(&bad).unwrap_err().code(), "format");
}

#[test]
fn invalid_combinations_fail_validation() {
    let mut cfg = RunConfig::default();
    cfg.model.leap_step = 17;
    assert_eq!(cfg.validate().unwrap_err().code(), "config");
    let mut cfg = RunConfig::default();
    cfg.model.window_sizes = vec![1, 3, 5];
    assert!(cfg.validate().is_err(), "head count must match d_model split");
    let mut cfg = RunConfig::default();
    cfg.model.num_samples = 0;
    assert!(cfg.validate().is_err());
    let cfg = RunConfig { seed: u64::MAX, ..RunConfig::default() };
    assert!(cfg.validate().is_err());
}
