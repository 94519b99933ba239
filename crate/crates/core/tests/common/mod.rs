//! Shared synthetic experiment setup for the integration tests.
#![allow(dead_code)]

use protofed::federation::{DomainData, Federation, Mode, RunConfig, SimulationResult};
use protofed::synthetic::{self, SyntheticSpec};

/// Desk-scale experiment: 3 domains of 2,000 steps, L=96, F=24, M=64, D=32,
/// 20 rounds. One local epoch over every 4th training window at lr 1e-3
/// keeps a run within seconds on one core.
pub const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

pub fn spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        domains: 3,
        length: 2000,
        seed,
        ..SyntheticSpec::default()
    }
}

pub fn experiment(seed: u64, mode: Mode) -> (RunConfig, Vec<DomainData>) {
    let spec = spec(seed);
    let generated = synthetic::generate(&spec).expect("synthetic domains");
    let mut manifest = synthetic::default_manifest();
    manifest.train_stride = 4;
    let domains = synthetic::domain_data(&spec, &generated, &manifest).expect("domain data");
    let config = RunConfig {
        run_id: format!("seed{seed}"),
        seed,
        mode,
        rounds: 20,
        local_epochs: 1,
        memory_size: 64,
        dim: 32,
        learning_rate: 1e-3,
        datasets: domains.iter().map(|d| d.manifest.clone()).collect(),
        ..RunConfig::default()
    };
    (config, domains)
}

pub fn run(seed: u64, mode: Mode, edit: impl FnOnce(&mut RunConfig)) -> SimulationResult {
    let (mut config, domains) = experiment(seed, mode);
    edit(&mut config);
    Federation::from_domains(config, domains)
        .expect("federation")
        .run(None)
        .expect("simulation")
}

/// Per-domain test MSE of one run.
pub fn test_mse(result: &SimulationResult) -> Vec<f64> {
    result.summary.iter().map(|s| s.mse).collect()
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}
