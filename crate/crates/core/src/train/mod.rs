//! Host pretraining, permutation-invariant training of the multi-speaker
//! wrappers, decoding, scoring and the ablation harnesses.

mod decode;
mod experiment;
mod schedule;

use std::time::Instant;

use candle_core::{Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use decode::{best_permutation_edits, edit_distance, greedy_ctc_decode, wer};
pub use experiment::{
    checkpoint_dir, load_checkpoint, save_checkpoint, CheckpointMeta,
    ablate_locations, ablate_recon, build_dataset, build_system, pretrain_host_for, read_ablation_csv, run_experiment,
    write_ablation_csv, AblationRow, DataConfig, Dataset, ExperimentConfig, RunMetrics, System, SystemKind,
};
pub use schedule::TriStage;

use crate::error::{Error, Result};
use crate::host::{HostModel, InjectionPoint, MultiStreamModel};
use crate::layers::{pad_batch, FrameMask};
use crate::mixsim::{item_rng, MixedUtterance, SourceUtterance};
use crate::objectives::{combined_objective, ctc_loss_with_grad, LogProbs, ObjectiveConfig, ReconKind};
use crate::params::Parameterized;

pub const ADAM_BETAS: (f64, f64) = (0.9, 0.98);
pub const ADAM_EPS: f64 = 1e-8;

fn default_peak_lr() -> f64 {
    2e-4
}
fn default_fractions() -> [f64; 3] {
    [0.1, 0.4, 0.5]
}
fn default_final_ratio() -> f64 {
    0.05
}
fn default_batch() -> usize {
    8
}
fn default_log_every() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_peak_lr")]
    pub peak_lr: f64,
    pub max_steps: usize,
    #[serde(default = "default_fractions")]
    pub stage_fractions: [f64; 3],
    #[serde(default = "default_final_ratio")]
    pub final_lr_ratio: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub objective: ObjectiveConfig,
    #[serde(default)]
    pub injection: InjectionPoint,
    /// Also update the host (full fine-tuning); breaks the frozen-host contract.
    #[serde(default)]
    pub unfreeze_host: bool,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
}

impl TrainConfig {
    pub fn new(max_steps: usize) -> Self {
        TrainConfig {
            peak_lr: default_peak_lr(),
            max_steps,
            stage_fractions: default_fractions(),
            final_lr_ratio: default_final_ratio(),
            batch_size: default_batch(),
            seed: 0,
            objective: ObjectiveConfig::default(),
            injection: InjectionPoint::default(),
            unfreeze_host: false,
            log_every: default_log_every(),
        }
    }

    pub fn schedule(&self) -> TriStage {
        TriStage {
            peak_lr: self.peak_lr,
            total_steps: self.max_steps,
            stage_fractions: self.stage_fractions,
            final_ratio: self.final_lr_ratio,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule().validate()?;
        self.objective.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        Ok(())
    }
}

/// Learning rate for update `step` (1-based; step 0 is before any update).
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    cfg.schedule().lr(step)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

fn optimizer(vars: Vec<candle_core::Var>) -> Result<AdamW> {
    Ok(AdamW::new(
        vars,
        ParamsAdamW {
            lr: 0.0,
            beta1: ADAM_BETAS.0,
            beta2: ADAM_BETAS.1,
            eps: ADAM_EPS,
            weight_decay: 0.0,
        },
    )?)
}

/// Index batches for `steps` updates: reshuffled every pass over the data.
fn batch_order(n: usize, batch: usize, steps: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut out = Vec::with_capacity(steps);
    let mut epoch = 0u64;
    while out.len() < steps {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut item_rng(seed, "epoch", epoch));
        for chunk in order.chunks(batch) {
            if out.len() == steps {
                break;
            }
            out.push(chunk.to_vec());
        }
        epoch += 1;
    }
    out
}

fn to_f64(x: &Tensor) -> Result<Vec<f64>> {
    Ok(x.flatten_all()?.to_vec1::<f32>()?.into_iter().map(f64::from).collect())
}

fn grad_tensor(values: Vec<f32>, like: &Tensor) -> Result<Tensor> {
    Ok(Tensor::from_vec(values, like.dims(), &Device::Cpu)?)
}

/// Loss and gradient bookkeeping for one batch of mixtures.
struct BatchLoss {
    mean_loss: f64,
    surrogate: Tensor,
}

fn mixture_batch_loss<M: MultiStreamModel + ?Sized>(
    model: &M,
    batch: &[&MixedUtterance],
    objective: &ObjectiveConfig,
    blank: usize,
) -> Result<BatchLoss> {
    let f = batch[0].feature_dim;
    let items: Vec<(&[f32], usize)> = batch.iter().map(|m| (m.mixture.as_slice(), m.frames)).collect();
    let (x, mask) = pad_batch(&items, f)?;
    let out = model.forward(&x, &mask)?;
    let (nb, t, v) = out.log_probs.dims3()?;
    let b = batch.len();
    let n = out.num_speakers;
    let lp = to_f64(&out.log_probs)?;

    let recon = objective.recon_kind != ReconKind::None;
    let (sep, clean, c) = if recon {
        let c = out.separated.dim(3)?;
        let sep = to_f64(&out.separated)?;
        (sep, Some(clean_batch(model.host(), batch, model.injection(), t)?), c)
    } else {
        (Vec::new(), None, 0)
    };

    let mut g_lp = vec![0f32; nb * t * v];
    let mut g_sep = vec![0f32; if recon { n * b * t * c } else { 0 }];
    let mut total = 0.0;
    for (bi, m) in batch.iter().enumerate() {
        let frames = m.frames;
        let stream_slices: Vec<&[f64]> = (0..n)
            .map(|s| {
                let start = (s * b + bi) * t * v;
                &lp[start..start + frames * v]
            })
            .collect();
        let streams = stream_slices
            .iter()
            .map(|sl| LogProbs::new(sl, frames, v))
            .collect::<Result<Vec<_>>>()?;
        let targets = m.transcripts();
        if targets.len() != n {
            return Err(Error::shape("mixture sources", n, targets.len()));
        }
        let sep_slices: Vec<&[f64]> = if recon {
            (0..n)
                .map(|s| {
                    let start = (s * b + bi) * t * c;
                    &sep[start..start + frames * c]
                })
                .collect()
        } else {
            Vec::new()
        };
        let clean_slices: Option<Vec<&[f64]>> = clean.as_ref().map(|cl| {
            (0..n)
                .map(|j| {
                    let start = (bi * n + j) * t * c;
                    &cl[start..start + frames * c]
                })
                .collect()
        });
        let outcome = combined_objective(&streams, &targets, blank, &sep_slices, clean_slices.as_deref(), objective)?;
        total += outcome.total;
        for (s, g) in outcome.grad_log_probs.iter().enumerate() {
            let start = (s * b + bi) * t * v;
            for (dst, src) in g_lp[start..start + frames * v].iter_mut().zip(g) {
                *dst = (*src / b as f64) as f32;
            }
        }
        for (s, g) in outcome.grad_separated.iter().enumerate() {
            let start = (s * b + bi) * t * c;
            for (dst, src) in g_sep[start..start + frames * c].iter_mut().zip(g) {
                *dst = (*src / b as f64) as f32;
            }
        }
    }
    let mut surrogate = out.log_probs.mul(&grad_tensor(g_lp, &out.log_probs)?)?.sum_all()?;
    if recon {
        surrogate = (surrogate + out.separated.mul(&grad_tensor(g_sep, &out.separated)?)?.sum_all()?)?;
    }
    Ok(BatchLoss {
        mean_loss: total / b as f64,
        surrogate,
    })
}

/// Clean reconstruction targets for a batch, `(B, N, T, C)` flattened, from
/// each gain-scaled source placed on a mixture-length canvas.
fn clean_batch(host: &HostModel, batch: &[&MixedUtterance], point: InjectionPoint, frames: usize) -> Result<Vec<f64>> {
    let f = batch[0].feature_dim;
    let canvases: Vec<(Vec<f32>, usize)> = batch
        .iter()
        .flat_map(|m| (0..m.sources.len()).map(move |j| (m.source_canvas(j), m.frames)))
        .collect();
    let items: Vec<(&[f32], usize)> = canvases.iter().map(|(v, t)| (v.as_slice(), *t)).collect();
    let (x, mask) = pad_batch(&items, f)?;
    let x = x.pad_with_zeros(1, 0, frames - x.dim(1)?)?;
    let mask = FrameMask::new(mask.lengths(), frames)?;
    let h = host.hidden_at(&x, &mask, point.location)?.detach();
    to_f64(&h)
}

/// Trains the trainable parameters of `model` with permutation-invariant CTC
/// (plus the configured reconstruction term) on `data`.
pub fn train<M: MultiStreamModel + ?Sized>(model: &mut M, data: &[MixedUtterance], cfg: &TrainConfig) -> Result<Vec<StepLog>> {
    cfg.validate()?;
    if cfg.unfreeze_host {
        model.host_mut().unfreeze();
    }
    if data.is_empty() && cfg.max_steps > 0 {
        return Err(Error::Invalid("no training mixtures".into()));
    }
    let blank = model.host().config().blank_index;
    let vars = model.trainable_vars();
    if vars.is_empty() && cfg.max_steps > 0 {
        return Err(Error::Invalid("model has no trainable parameters".into()));
    }
    let mut opt = optimizer(vars)?;
    let mut log = Vec::with_capacity(cfg.max_steps);
    let started = Instant::now();
    for (i, idx) in batch_order(data.len(), cfg.batch_size, cfg.max_steps, cfg.seed).into_iter().enumerate() {
        let step = i + 1;
        let lr = lr_schedule(step, cfg);
        let batch: Vec<&MixedUtterance> = idx.iter().map(|&j| &data[j]).collect();
        let loss = mixture_batch_loss(&*model, &batch, &cfg.objective, blank)?;
        if !loss.mean_loss.is_finite() {
            return Err(Error::Diverged { step, loss: loss.mean_loss });
        }
        opt.set_learning_rate(lr);
        opt.backward_step(&loss.surrogate)?;
        log.push(StepLog { step, loss: loss.mean_loss, lr });
        if cfg.log_every > 0 && step % cfg.log_every == 0 {
            let recent = &log[log.len().saturating_sub(cfg.log_every)..];
            let avg = recent.iter().map(|s| s.loss).sum::<f64>() / recent.len() as f64;
            log::info!("step {step:>6}  loss {avg:9.4}  lr {lr:.3e}  {:.1}s", started.elapsed().as_secs_f64());
        }
    }
    Ok(log)
}

/// Plain CTC training of the single-speaker host on clean utterances.
pub fn pretrain_host(host: &mut HostModel, data: &[SourceUtterance], cfg: &TrainConfig) -> Result<Vec<StepLog>> {
    cfg.validate()?;
    if data.is_empty() && cfg.max_steps > 0 {
        return Err(Error::Invalid("no pretraining utterances".into()));
    }
    host.unfreeze();
    let blank = host.config().blank_index;
    let f = host.config().feature_dim;
    let mut opt = optimizer(host.trainable_vars())?;
    let mut log = Vec::with_capacity(cfg.max_steps);
    let started = Instant::now();
    for (i, idx) in batch_order(data.len(), cfg.batch_size, cfg.max_steps, cfg.seed).into_iter().enumerate() {
        let step = i + 1;
        let lr = lr_schedule(step, cfg);
        let items: Vec<(&[f32], usize)> = idx.iter().map(|&j| (data[j].features.as_slice(), data[j].frames)).collect();
        let (x, mask) = pad_batch(&items, f)?;
        let out = host.forward(&x, &mask)?;
        let (b, t, v) = out.dims3()?;
        let lp = to_f64(&out)?;
        let mut grad = vec![0f32; b * t * v];
        let mut total = 0.0;
        for (bi, &j) in idx.iter().enumerate() {
            let frames = data[j].frames;
            let start = bi * t * v;
            let stream = LogProbs::new(&lp[start..start + frames * v], frames, v)?;
            let (loss, g) = ctc_loss_with_grad(stream, &data[j].transcript, blank)?;
            total += loss;
            for (dst, src) in grad[start..start + frames * v].iter_mut().zip(&g) {
                *dst = (*src / b as f64) as f32;
            }
        }
        let mean = total / b as f64;
        if !mean.is_finite() {
            return Err(Error::Diverged { step, loss: mean });
        }
        let surrogate = out.mul(&grad_tensor(grad, &out)?)?.sum_all()?;
        opt.set_learning_rate(lr);
        opt.backward_step(&surrogate)?;
        log.push(StepLog { step, loss: mean, lr });
        if cfg.log_every > 0 && step % cfg.log_every == 0 {
            log::info!("host step {step:>6}  loss {mean:9.4}  {:.1}s", started.elapsed().as_secs_f64());
        }
    }
    host.freeze();
    Ok(log)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub wer: f64,
    pub errors: usize,
    pub reference_tokens: usize,
    pub mixtures: usize,
}

/// Greedy hypotheses for every stream of every mixture.
pub fn decode_streams<M: MultiStreamModel + ?Sized>(model: &M, mixtures: &[MixedUtterance], batch_size: usize) -> Result<Vec<Vec<Vec<usize>>>> {
    let blank = model.host().config().blank_index;
    let mut hyps = Vec::with_capacity(mixtures.len());
    for chunk in mixtures.chunks(batch_size.max(1)) {
        let f = chunk[0].feature_dim;
        let items: Vec<(&[f32], usize)> = chunk.iter().map(|m| (m.mixture.as_slice(), m.frames)).collect();
        let (x, mask) = pad_batch(&items, f)?;
        let out = model.forward(&x, &mask)?;
        let (_, t, v) = out.log_probs.dims3()?;
        let lp = to_f64(&out.log_probs)?;
        let b = chunk.len();
        for (bi, m) in chunk.iter().enumerate() {
            let streams = (0..out.num_speakers)
                .map(|s| {
                    let start = (s * b + bi) * t * v;
                    Ok(greedy_ctc_decode(LogProbs::new(&lp[start..start + m.frames * v], m.frames, v)?, blank))
                })
                .collect::<Result<Vec<_>>>()?;
            hyps.push(streams);
        }
    }
    Ok(hyps)
}

/// Token error rate over a split with the best stream-to-reference pairing
/// per mixture.
pub fn score_hypotheses(hyps: &[Vec<Vec<usize>>], mixtures: &[MixedUtterance]) -> Result<EvalReport> {
    if hyps.len() != mixtures.len() {
        return Err(Error::shape("hypotheses", mixtures.len(), hyps.len()));
    }
    let (mut errors, mut tokens) = (0, 0);
    for (h, m) in hyps.iter().zip(mixtures) {
        let refs = m.transcripts();
        errors += best_permutation_edits(h, &refs)?.0;
        tokens += refs.iter().map(Vec::len).sum::<usize>();
    }
    if tokens == 0 {
        return Err(Error::Invalid("no reference tokens to score".into()));
    }
    Ok(EvalReport {
        wer: errors as f64 / tokens as f64,
        errors,
        reference_tokens: tokens,
        mixtures: mixtures.len(),
    })
}

pub fn evaluate<M: MultiStreamModel + ?Sized>(model: &M, mixtures: &[MixedUtterance]) -> Result<EvalReport> {
    score_hypotheses(&decode_streams(model, mixtures, 16)?, mixtures)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_every_item_each_epoch() {
        let order = batch_order(10, 4, 6, 1);
        assert_eq!(order.len(), 6);
        let mut first: Vec<usize> = order[..3].iter().flatten().copied().collect();
        first.sort();
        assert_eq!(first, (0..10).collect::<Vec<_>>());
        assert_eq!(order, batch_order(10, 4, 6, 1));
    }

    #[test]
    fn default_schedule_ends_at_a_twentieth() {
        let cfg = TrainConfig::new(400);
        assert_eq!(lr_schedule(0, &cfg), 0.0);
        assert_eq!(lr_schedule(100, &cfg), 2e-4);
        assert!((lr_schedule(400, &cfg) - 1e-5).abs() < 1e-9);
    }
}
