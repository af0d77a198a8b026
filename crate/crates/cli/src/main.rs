use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use sidecar_core::host::{parameter_report, MultiStreamModel};
use sidecar_core::maskviz::{model_masks, render, visualize};
use sidecar_core::mixsim::{read_manifest, write_manifest, MixedUtterance, Protocol};
use sidecar_core::objectives::ReconKind;
use sidecar_core::params::Parameterized;
use sidecar_core::train::{
    ablate_locations, ablate_recon, build_dataset, evaluate, load_checkpoint, pretrain_host_for, run_experiment,
    save_checkpoint, write_ablation_csv, ExperimentConfig,
};

#[derive(Parser)]
#[command(name = "sidecar", version, about = "Multi-speaker recognition with a mask separator inside a frozen CTC host")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and write mixture manifests per split.
    Simulate {
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value = "left")]
        protocol: Protocol,
        #[arg(long)]
        out: PathBuf,
        /// Experiment config whose data section is used (seed and protocol still apply).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Pretrain the host, train the multi-speaker system and save a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Best-permutation token error rate of a checkpoint on a manifest.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Injection-location ablation, or reconstruction-loss ablation with --recon.
    Ablate {
        #[arg(long, value_delimiter = ',')]
        locations: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        recon: Vec<ReconKind>,
        #[arg(long)]
        config: PathBuf,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Heatmap data for the masks a checkpoint produces on one mixture.
    Viz {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        utterance: String,
        #[arg(long)]
        out: PathBuf,
        /// Look the utterance up here; otherwise regenerate the checkpoint's dataset.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        png: bool,
    },
    /// Trainable and frozen parameter counts of a checkpoint.
    Params {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Simulate { seed, protocol, out, config } => simulate(seed, protocol, &out, config.as_deref()),
        Command::Train { config, out } => train(&config, &out),
        Command::Evaluate { checkpoint, manifest } => {
            let (system, _) = load_checkpoint(&checkpoint)?;
            let mixtures = read_manifest(&manifest)?;
            let report = evaluate(&system, &mixtures)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
        Command::Ablate { locations, recon, config, out } => ablate(&locations, &recon, &config, out.as_deref()),
        Command::Viz { checkpoint, utterance, out, manifest, png } => viz(&checkpoint, &utterance, &out, manifest.as_deref(), png),
        Command::Params { checkpoint } => {
            let (system, meta) = load_checkpoint(&checkpoint)?;
            let report = parameter_report(&system);
            let sidecar = system.as_sidecar().map(|m| m.sidecar.count_parameters());
            let value = json!({
                "system": meta.system,
                "trainable": report.trainable_count,
                "frozen": report.frozen_count,
                "trainable_fraction": report.trainable_fraction,
                "host": system.host().num_parameters(),
                "sidecar": sidecar,
            });
            println!("{}", serde_json::to_string_pretty(&value)?);
            Ok(())
        }
    }
}

fn read_config(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::from_file(path).with_context(|| format!("reading config {}", path.display()))
}

fn simulate(seed: u64, protocol: Protocol, out: &Path, config: Option<&Path>) -> Result<()> {
    let mut data = match config {
        Some(p) => read_config(p)?.data,
        None => ExperimentConfig::toy().data,
    };
    data.corpus.seed = seed;
    data.mix_seed = None;
    data.protocol = protocol;
    let ds = build_dataset(&data)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for (name, split) in [("train", &ds.train), ("dev", &ds.dev), ("test", &ds.test)] {
        write_manifest(&out.join(format!("{name}.jsonl")), split)?;
        log::info!("{name}: {} mixtures", split.len());
    }
    fs::write(out.join("data.json"), serde_json::to_vec_pretty(&data)?)?;
    Ok(())
}

fn train(config: &Path, out: &Path) -> Result<()> {
    let cfg = read_config(config)?;
    let ds = build_dataset(&cfg.data)?;
    let (host, host_log) = pretrain_host_for(&cfg, &ds)?;
    let (system, metrics) = run_experiment(&cfg, &ds, &host)?;
    save_checkpoint(out, &system, &cfg.sidecar, Some(&cfg))?;
    let host_lines: Vec<String> = host_log.iter().map(serde_json::to_string).collect::<Result<_, _>>()?;
    fs::write(out.join("host_metrics.jsonl"), host_lines.join("\n") + "\n")?;
    metrics.write_jsonl(&out.join("metrics.jsonl"))?;
    let summary = json!({
        "dev": metrics.dev,
        "test": metrics.test,
        "parameters": metrics.parameters,
        "wall_clock_secs": metrics.wall_clock_secs,
    });
    fs::write(out.join("summary.json"), serde_json::to_vec_pretty(&summary)?)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn ablate(locations: &[usize], recon: &[ReconKind], config: &Path, out: Option<&Path>) -> Result<()> {
    if !locations.is_empty() && !recon.is_empty() {
        bail!("pass either --locations or --recon, not both");
    }
    let cfg = read_config(config)?;
    let ds = build_dataset(&cfg.data)?;
    let (host, _) = pretrain_host_for(&cfg, &ds)?;
    let (key, rows) = if recon.is_empty() {
        ("location", ablate_locations(locations, &cfg, &ds, &host)?)
    } else {
        ("recon", ablate_recon(recon, &cfg, &ds, &host)?)
    };
    match out {
        Some(p) => write_ablation_csv(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?, key, &rows)?,
        None => write_ablation_csv(io::stdout().lock(), key, &rows)?,
    }
    Ok(())
}

fn find_utterance(split: Vec<MixedUtterance>, id: &str) -> Option<MixedUtterance> {
    split.into_iter().find(|m| m.id == id)
}

fn viz(checkpoint: &Path, utterance: &str, out: &Path, manifest: Option<&Path>, png: bool) -> Result<()> {
    let (system, meta) = load_checkpoint(checkpoint)?;
    let Some(model) = system.as_sidecar() else {
        bail!("checkpoint holds a baseline model, which has no masks");
    };
    let mixture = match manifest {
        Some(p) => find_utterance(read_manifest(p)?, utterance),
        None => {
            let Some(exp) = meta.experiment else {
                bail!("checkpoint has no experiment config; pass --manifest");
            };
            let ds = build_dataset(&exp.data)?;
            [ds.dev, ds.test, ds.train].into_iter().find_map(|s| find_utterance(s, utterance))
        }
    };
    let Some(mixture) = mixture else {
        bail!("utterance {utterance:?} not found");
    };
    let viz = visualize(&model_masks(model, &mixture)?, &mixture)?;
    let files = render(&viz, out, &mixture.id, png)?;
    println!("{}", files.csv.display());
    println!("{}", files.json.display());
    if let Some(p) = files.png {
        println!("{}", p.display());
    }
    Ok(())
}
