//! Runs the toy experiment end to end and prints the dev score.

use std::time::Instant;

use sidecar_core::train::{build_dataset, pretrain_host_for, run_experiment, ExperimentConfig};

fn main() -> sidecar_core::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cfg = ExperimentConfig::toy();
    let started = Instant::now();
    let ds = build_dataset(&cfg.data)?;
    let (host, _) = pretrain_host_for(&cfg, &ds)?;
    let (_, m) = run_experiment(&cfg, &ds, &host)?;
    println!("dev WER {:.4}, {:.0}s", m.dev.wer, started.elapsed().as_secs_f64());
    Ok(())
}
