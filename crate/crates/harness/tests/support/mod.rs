#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use inavit::synthdata::{generate_dataset, SynthConfig};
use inavit_harness::config::RunConfig;
use inavit_harness::dataset::Dataset;

pub fn dataset(episodes: usize, seed: u64) -> Dataset {
    let (eps, manifest) = generate_dataset(&SynthConfig { seed, ..SynthConfig::default() }, episodes, seed).unwrap();
    Dataset::from_episodes(eps, manifest)
}

pub fn run_config(seed: u64, steps: u64, batch: usize) -> RunConfig {
    RunConfig { seed: Some(seed), steps, batch_size: batch, warmup_steps: steps.min(10), ..RunConfig::default() }
}

pub fn inavit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_inavit")).current_dir(dir).args(args).output().expect("binary runs")
}

pub fn stdout_json(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}
