//! Shared fixtures for the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use swan_core::env::{make_scenario, EnvAction, EnvSettings, ScenarioKind, SwanEnv};
use swan_core::{Scenario, SystemConfig};

/// Default system with `segments` segments.
pub fn system(segments: usize) -> SystemConfig {
    SystemConfig {
        segment_count: segments,
        ..SystemConfig::default()
    }
}

pub fn scenario(cfg: &SystemConfig, seed: u64) -> Scenario {
    make_scenario(ScenarioKind::Sparse, cfg, seed)
}

/// A reset environment on a fixed sparse scenario.
pub fn env(cfg: &SystemConfig) -> SwanEnv {
    let mut env = SwanEnv::new(cfg, EnvSettings::default()).expect("valid config");
    env.reset(scenario(cfg, 7), 7).expect("reset");
    env
}

/// Uniform raw actions in a broad box, deterministic in `seed`.
pub fn random_actions(cfg: &SystemConfig, count: usize, seed: u64) -> Vec<EnvAction> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = EnvAction::dim(cfg);
    (0..count)
        .map(|_| {
            let flat: Vec<f64> = (0..dim).map(|_| rng.random_range(-50.0..50.0)).collect();
            EnvAction::from_flat(cfg, &flat).expect("dimension")
        })
        .collect()
}
