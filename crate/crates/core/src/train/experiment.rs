//! End-to-end runs: dataset construction, host pretraining, system training,
//! evaluation, checkpoints and the ablation tables.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::{evaluate, pretrain_host, train, EvalReport, StepLog, TrainConfig};
use crate::checkpoint::{load_parameters, save_parameters};
use crate::error::{Error, Result};
use crate::host::{
    build_baseline_control, build_host, inject_sidecar, parameter_report, BaselineModel, HostConfig, HostModel,
    InjectionPoint, MultiSpeakerModel, MultiStreamModel, ParameterReport, StreamOutput,
};
use crate::layers::FrameMask;
use crate::mixsim::{gen_synthetic_corpus, make_mixtures, Corpus, CorpusConfig, MixedUtterance, Protocol, SplitCounts};
use crate::objectives::{Alphabet, ObjectiveConfig, ReconKind};
use crate::params::{deep_copy, Param, Parameterized};
use crate::sidecar::{init_sidecar, NormKind, SidecarConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub corpus: CorpusConfig,
    /// Mixtures per split.
    pub mixtures: SplitCounts,
    pub protocol: Protocol,
    /// Seed for pairing/gains/delays; defaults to the corpus seed.
    #[serde(default)]
    pub mix_seed: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub alphabet: Alphabet,
    pub corpus: Corpus,
    pub train: Vec<MixedUtterance>,
    pub dev: Vec<MixedUtterance>,
    pub test: Vec<MixedUtterance>,
}

pub fn build_dataset(cfg: &DataConfig) -> Result<Dataset> {
    let corpus = gen_synthetic_corpus(cfg.corpus.clone())?;
    let seed = cfg.mix_seed.unwrap_or(cfg.corpus.seed);
    let train = make_mixtures(&corpus.train, cfg.mixtures.train, cfg.protocol, seed, "train")?;
    let dev = make_mixtures(&corpus.dev, cfg.mixtures.dev, cfg.protocol, seed, "dev")?;
    let test = make_mixtures(&corpus.test, cfg.mixtures.test, cfg.protocol, seed, "test")?;
    Ok(Dataset {
        alphabet: Alphabet::numbered(cfg.corpus.vocab_size),
        corpus,
        train,
        dev,
        test,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    #[default]
    Sidecar,
    Baseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    /// An empty `vocab` is filled from the corpus alphabet.
    pub host: HostConfig,
    pub sidecar: SidecarConfig,
    /// Single-speaker CTC training of the host before it is frozen.
    pub pretrain: TrainConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub system: SystemKind,
}

impl ExperimentConfig {
    /// Synthetic toy setup: seed 17, 12 tokens, 4 voices, 2000/200/200
    /// left-aligned mixtures, 4-block 64-dim host with the separator after
    /// block 2.
    pub fn toy() -> Self {
        let feature_dim = 32;
        let mut pretrain = TrainConfig::new(500);
        pretrain.peak_lr = 1e-3;
        let mut train = TrainConfig::new(2500);
        train.peak_lr = 1.5e-3;
        train.injection = InjectionPoint::new(2);
        ExperimentConfig {
            data: DataConfig {
                corpus: CorpusConfig {
                    seed: 17,
                    vocab_size: 12,
                    num_voices: 4,
                    feature_dim,
                    utterances: SplitCounts { train: 1000, dev: 200, test: 200 },
                    min_tokens: 3,
                    max_tokens: 8,
                },
                mixtures: SplitCounts { train: 2000, dev: 200, test: 200 },
                protocol: Protocol::Left,
                mix_seed: None,
            },
            host: HostConfig::toy(feature_dim, &Alphabet::numbered(12), 5),
            sidecar: SidecarConfig {
                num_speakers: 2,
                blocks_per_repeat: 4,
                repeats: 2,
                bottleneck_channels: 32,
                hidden_channels: Some(64),
                io_channels: 64,
                block_kernel: 3,
                norm: NormKind::Channel,
                seed: 3,
            },
            pretrain,
            train,
            system: SystemKind::Sidecar,
        }
    }

    pub fn resolved_host(&self) -> Result<HostConfig> {
        let mut host = self.host.clone();
        if host.vocab.is_empty() {
            let alphabet = Alphabet::numbered(self.data.corpus.vocab_size);
            host.vocab = alphabet.tokens().to_vec();
            host.blank_index = alphabet.blank();
        }
        if host.feature_dim != self.data.corpus.feature_dim {
            return Err(Error::shape("host feature_dim", self.data.corpus.feature_dim, host.feature_dim));
        }
        if host.vocab.len() != self.data.corpus.vocab_size + 1 {
            return Err(Error::shape("host vocab (tokens + blank)", self.data.corpus.vocab_size + 1, host.vocab.len()));
        }
        Ok(host)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&text)?)
    }
}

/// Either multi-speaker wrapper behind one type.
#[derive(Debug, Clone)]
pub enum System {
    Sidecar(MultiSpeakerModel),
    Baseline(BaselineModel),
}

impl System {
    pub fn kind(&self) -> SystemKind {
        match self {
            System::Sidecar(_) => SystemKind::Sidecar,
            System::Baseline(_) => SystemKind::Baseline,
        }
    }

    pub fn as_sidecar(&self) -> Option<&MultiSpeakerModel> {
        match self {
            System::Sidecar(m) => Some(m),
            System::Baseline(_) => None,
        }
    }
}

impl MultiStreamModel for System {
    fn forward(&self, features: &Tensor, mask: &FrameMask) -> Result<StreamOutput> {
        match self {
            System::Sidecar(m) => m.forward(features, mask),
            System::Baseline(m) => m.forward(features, mask),
        }
    }
    fn host(&self) -> &HostModel {
        match self {
            System::Sidecar(m) => m.host(),
            System::Baseline(m) => m.host(),
        }
    }
    fn host_mut(&mut self) -> &mut HostModel {
        match self {
            System::Sidecar(m) => m.host_mut(),
            System::Baseline(m) => m.host_mut(),
        }
    }
    fn injection(&self) -> InjectionPoint {
        match self {
            System::Sidecar(m) => m.injection(),
            System::Baseline(m) => m.injection(),
        }
    }
    fn num_speakers(&self) -> usize {
        match self {
            System::Sidecar(m) => m.num_speakers(),
            System::Baseline(m) => m.num_speakers(),
        }
    }
}

impl Parameterized for System {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        match self {
            System::Sidecar(m) => m.visit(f),
            System::Baseline(m) => m.visit(f),
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        match self {
            System::Sidecar(m) => m.visit_mut(f),
            System::Baseline(m) => m.visit_mut(f),
        }
    }
}

/// Wraps an independent copy of `host`.
pub fn build_system(kind: SystemKind, host: &HostModel, sidecar: &SidecarConfig, injection: InjectionPoint) -> Result<System> {
    let host = deep_copy(host)?;
    Ok(match kind {
        SystemKind::Sidecar => System::Sidecar(inject_sidecar(host, init_sidecar(sidecar.clone())?, injection)?),
        SystemKind::Baseline => System::Baseline(build_baseline_control(host, injection, sidecar.num_speakers)?),
    })
}

/// Builds the host from `cfg` and trains it on the clean training utterances.
pub fn pretrain_host_for(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<(HostModel, Vec<StepLog>)> {
    let mut host = build_host(cfg.resolved_host()?)?;
    let log = pretrain_host(&mut host, &dataset.corpus.train, &cfg.pretrain)?;
    Ok((host, log))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMetrics {
    pub steps: Vec<StepLog>,
    pub dev: EvalReport,
    pub test: Option<EvalReport>,
    pub parameters: ParameterReport,
    pub wall_clock_secs: f64,
}

impl RunMetrics {
    /// One `{step, loss, lr}` object per line.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for s in &self.steps {
            serde_json::to_writer(&mut out, s)?;
            out.push(b'\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Trains `cfg.system` on top of a copy of the (frozen) `host` and scores
/// the dev split, and the test split when it is non-empty.
pub fn run_experiment(cfg: &ExperimentConfig, dataset: &Dataset, host: &HostModel) -> Result<(System, RunMetrics)> {
    let started = Instant::now();
    let mut system = build_system(cfg.system, host, &cfg.sidecar, cfg.train.injection)?;
    let steps = train(&mut system, &dataset.train, &cfg.train)?;
    let dev = evaluate(&system, &dataset.dev)?;
    let test = if dataset.test.is_empty() {
        None
    } else {
        Some(evaluate(&system, &dataset.test)?)
    };
    let metrics = RunMetrics {
        steps,
        dev,
        test,
        parameters: parameter_report(&system),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok((system, metrics))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub dev_wer: f64,
    pub test_wer: f64,
}

fn ablation_run(cfg: &ExperimentConfig, dataset: &Dataset, host: &HostModel, label: String) -> Result<AblationRow> {
    let (_, m) = run_experiment(cfg, dataset, host)?;
    let row = AblationRow {
        label,
        dev_wer: m.dev.wer,
        test_wer: m.test.map_or(f64::NAN, |t| t.wer),
    };
    log::info!("ablation {}: dev {:.4} test {:.4}", row.label, row.dev_wer, row.test_wer);
    Ok(row)
}

/// One run per injection location, all sharing the host, seed and budget.
pub fn ablate_locations(locations: &[usize], cfg: &ExperimentConfig, dataset: &Dataset, host: &HostModel) -> Result<Vec<AblationRow>> {
    locations
        .iter()
        .map(|&loc| {
            let mut run = cfg.clone();
            run.system = SystemKind::Sidecar;
            run.train.injection = InjectionPoint::new(loc);
            ablation_run(&run, dataset, host, loc.to_string())
        })
        .collect()
}

/// One run per reconstruction objective, all sharing the host, seed and budget.
pub fn ablate_recon(kinds: &[ReconKind], cfg: &ExperimentConfig, dataset: &Dataset, host: &HostModel) -> Result<Vec<AblationRow>> {
    kinds
        .iter()
        .map(|&kind| {
            let mut run = cfg.clone();
            run.system = SystemKind::Sidecar;
            run.train.objective = ObjectiveConfig::with_recon(kind);
            ablation_run(&run, dataset, host, kind.as_str().to_string())
        })
        .collect()
}

/// CSV with header `<key>,dev_wer,test_wer`.
pub fn write_ablation_csv<W: Write>(out: W, key: &str, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Invalid(format!("csv: {e}"));
    w.write_record([key, "dev_wer", "test_wer"]).map_err(csv_err)?;
    for r in rows {
        w.write_record([r.label.clone(), r.dev_wer.to_string(), r.test_wer.to_string()])
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

/// Parses a table written by [`write_ablation_csv`], checking the header.
pub fn read_ablation_csv(text: &str, key: &str) -> Result<Vec<AblationRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let csv_err = |e: csv::Error| Error::Invalid(format!("csv: {e}"));
    let header = r.headers().map_err(csv_err)?.clone();
    if header.iter().collect::<Vec<_>>() != [key, "dev_wer", "test_wer"] {
        return Err(Error::Invalid(format!("unexpected ablation header {header:?}")));
    }
    r.records()
        .map(|rec| {
            let rec = rec.map_err(csv_err)?;
            let num = |i: usize| -> Result<f64> {
                rec[i]
                    .parse::<f64>()
                    .map_err(|e| Error::Invalid(format!("column {i}: {e}")))
            };
            Ok(AblationRow {
                label: rec[0].to_string(),
                dev_wer: num(1)?,
                test_wer: num(2)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub system: SystemKind,
    pub host: HostConfig,
    pub sidecar: SidecarConfig,
    pub injection: InjectionPoint,
    pub num_speakers: usize,
    pub host_frozen: bool,
    #[serde(default)]
    pub experiment: Option<ExperimentConfig>,
}

pub const PARAMS_BIN: &str = "params.bin";
pub const PARAMS_HEADER: &str = "params.json";
pub const META_FILE: &str = "meta.json";

pub fn save_checkpoint(dir: &Path, system: &System, sidecar: &SidecarConfig, experiment: Option<&ExperimentConfig>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_parameters(system, &dir.join(PARAMS_BIN), &dir.join(PARAMS_HEADER))?;
    let meta = CheckpointMeta {
        system: system.kind(),
        host: system.host().config().clone(),
        sidecar: sidecar.clone(),
        injection: system.injection(),
        num_speakers: system.num_speakers(),
        host_frozen: system.host().is_frozen(),
        experiment: experiment.cloned(),
    };
    let path = dir.join(META_FILE);
    fs::write(&path, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&path, e))
}

/// Accepts the checkpoint directory or any file inside it.
pub fn checkpoint_dir(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.to_path_buf()
    } else {
        path.parent().map(Path::to_path_buf).unwrap_or_default()
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(System, CheckpointMeta)> {
    let dir = checkpoint_dir(path);
    let meta_path = dir.join(META_FILE);
    let meta: CheckpointMeta = serde_json::from_slice(&fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?)?;
    let host = build_host(meta.host.clone())?;
    let mut system = build_system(meta.system, &host, &meta.sidecar, meta.injection)?;
    load_parameters(&mut system, &dir.join(PARAMS_BIN), &dir.join(PARAMS_HEADER), true)?;
    Ok((system, meta))
}
