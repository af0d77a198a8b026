//! Toy single-speaker recognizer (frame convolution, self-attention encoder,
//! linear token decoder) and the two multi-speaker wrappers built on it: the
//! mask separator injected between encoder blocks, and the duplicated-block
//! baseline.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{pad_batch, Conv1d, EncoderBlock, FrameMask, Linear};
use crate::objectives::Alphabet;
use crate::params::{Param, Parameterized};
use crate::sidecar::{Embedding, SidecarModule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HostConfig {
    pub feature_dim: usize,
    pub model_dim: usize,
    pub encoder_blocks: usize,
    pub attention_heads: usize,
    pub vocab: Vec<String>,
    pub blank_index: usize,
    #[serde(default)]
    pub seed: u64,
    /// Feed-forward width; `None` means four times `model_dim`.
    #[serde(default)]
    pub ff_dim: Option<usize>,
    #[serde(default = "default_extractor_kernel")]
    pub extractor_kernel: usize,
}

fn default_extractor_kernel() -> usize {
    3
}

impl HostConfig {
    /// Four blocks of width 64 with four heads.
    pub fn toy(feature_dim: usize, alphabet: &Alphabet, seed: u64) -> Self {
        HostConfig {
            feature_dim,
            model_dim: 64,
            encoder_blocks: 4,
            attention_heads: 4,
            vocab: alphabet.tokens().to_vec(),
            blank_index: alphabet.blank(),
            seed,
            ff_dim: None,
            extractor_kernel: 3,
        }
    }

    pub fn ff(&self) -> usize {
        self.ff_dim.unwrap_or(4 * self.model_dim)
    }

    pub fn alphabet(&self) -> Result<Alphabet> {
        Alphabet::new(self.vocab.clone(), self.blank_index)
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("feature_dim", self.feature_dim),
            ("model_dim", self.model_dim),
            ("encoder_blocks", self.encoder_blocks),
            ("attention_heads", self.attention_heads),
            ("ff_dim", self.ff()),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be >= 1"));
            }
        }
        if self.model_dim % self.attention_heads != 0 {
            return Err(Error::config(
                "attention_heads",
                format!("{} does not divide model_dim {}", self.attention_heads, self.model_dim),
            ));
        }
        if self.extractor_kernel % 2 == 0 {
            return Err(Error::config("extractor_kernel", "must be odd"));
        }
        self.alphabet().map(|_| ())
    }
}

/// Where the separator sits: `0` before the first encoder block, `k` after block `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectionPoint {
    pub location: usize,
}

impl InjectionPoint {
    pub fn new(location: usize) -> Self {
        InjectionPoint { location }
    }

    fn check(&self, blocks: usize) -> Result<()> {
        if self.location > blocks {
            return Err(Error::Range {
                what: "injection location",
                value: self.location as i64,
                min: 0,
                max: blocks as i64,
            });
        }
        Ok(())
    }
}

impl Default for InjectionPoint {
    fn default() -> Self {
        InjectionPoint { location: 2 }
    }
}

#[derive(Debug, Clone)]
pub struct HostModel {
    config: HostConfig,
    pub extractor: Conv1d,
    pub blocks: Vec<EncoderBlock>,
    pub decoder: Linear,
}

impl HostModel {
    pub fn new(config: HostConfig) -> Result<Self> {
        config.validate()?;
        let extractor = Conv1d::new(
            "host.extractor",
            config.seed,
            config.feature_dim,
            config.model_dim,
            config.extractor_kernel,
            1,
        )?;
        let blocks = (0..config.encoder_blocks)
            .map(|i| {
                EncoderBlock::new(
                    &format!("host.blocks.{i}"),
                    config.seed,
                    config.model_dim,
                    config.attention_heads,
                    config.ff(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let decoder = Linear::new("host.decoder", config.seed, config.model_dim, config.vocab.len(), true)?;
        Ok(HostModel {
            config,
            extractor,
            blocks,
            decoder,
        })
    }

    pub fn config(&self) -> &HostConfig {
        &self.config
    }

    /// Excludes every parameter from gradient updates. Idempotent.
    pub fn freeze(&mut self) {
        self.set_trainable(false);
    }

    pub fn unfreeze(&mut self) {
        self.set_trainable(true);
    }

    pub fn is_frozen(&self) -> bool {
        let mut frozen = true;
        self.visit(&mut |p| frozen &= !p.is_trainable());
        frozen
    }

    fn check_features(&self, x: &Tensor) -> Result<()> {
        let f = x.dim(D::Minus1)?;
        if f != self.config.feature_dim {
            return Err(Error::shape("host feature dim", self.config.feature_dim, f));
        }
        Ok(())
    }

    /// Features `(B, T, F)` to the input of the first encoder block.
    pub fn embed(&self, features: &Tensor, mask: &FrameMask) -> Result<Tensor> {
        self.check_features(features)?;
        mask.apply(&self.extractor.forward(features)?.gelu_erf()?)
    }

    /// Encoder blocks `from+1 ..= to` (1-based, as injection locations count them).
    pub fn run_blocks(&self, x: &Tensor, from: usize, to: usize, mask: &FrameMask) -> Result<Tensor> {
        let mut h = x.clone();
        for block in &self.blocks[from..to] {
            h = block.forward(&h, mask)?;
        }
        Ok(h)
    }

    /// Per-frame log-probabilities over the vocabulary.
    pub fn decode(&self, x: &Tensor) -> Result<Tensor> {
        Ok(candle_nn::ops::log_softmax(&self.decoder.forward(x)?, D::Minus1)?)
    }

    /// Hidden state after `depth` encoder blocks.
    pub fn hidden_at(&self, features: &Tensor, mask: &FrameMask, depth: usize) -> Result<Tensor> {
        InjectionPoint::new(depth).check(self.blocks.len())?;
        self.run_blocks(&self.embed(features, mask)?, 0, depth, mask)
    }

    pub fn forward(&self, features: &Tensor, mask: &FrameMask) -> Result<Tensor> {
        let h = self.hidden_at(features, mask, self.blocks.len())?;
        self.decode(&h)
    }
}

impl Parameterized for HostModel {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.extractor.visit(f);
        self.blocks.visit(f);
        self.decoder.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.extractor.visit_mut(f);
        self.blocks.visit_mut(f);
        self.decoder.visit_mut(f);
    }
}

pub fn build_host(config: HostConfig) -> Result<HostModel> {
    HostModel::new(config)
}

/// Concatenates per-speaker `(B, ...)` tensors along the batch axis,
/// speaker-major: all items of speaker 0, then all items of speaker 1, ...
pub fn stack_speakers(streams: &[Tensor]) -> Result<Tensor> {
    Ok(Tensor::cat(streams, 0)?)
}

/// Inverse of [`stack_speakers`].
pub fn unstack_speakers(stacked: &Tensor, speakers: usize) -> Result<Vec<Tensor>> {
    let total = stacked.dim(0)?;
    if speakers == 0 || total % speakers != 0 {
        return Err(Error::shape("stacked batch", format!("multiple of {speakers}"), total));
    }
    let b = total / speakers;
    (0..speakers).map(|s| Ok(stacked.narrow(0, s * b, b)?)).collect()
}

/// Output of a multi-speaker forward pass over a batch of `B` mixtures.
#[derive(Debug, Clone)]
pub struct StreamOutput {
    /// `(N * B, T, V)` log-probabilities, speaker-major.
    pub log_probs: Tensor,
    /// `(N, B, T, C)` separated embeddings at the injection point.
    pub separated: Tensor,
    /// `(N, B, T, C)` masks, when the model predicts masks.
    pub masks: Option<Tensor>,
    pub num_speakers: usize,
}

/// A recognizer that splits a mixture into one stream per speaker.
pub trait MultiStreamModel: Parameterized {
    fn forward(&self, features: &Tensor, mask: &FrameMask) -> Result<StreamOutput>;
    fn host(&self) -> &HostModel;
    fn host_mut(&mut self) -> &mut HostModel;
    fn injection(&self) -> InjectionPoint;
    fn num_speakers(&self) -> usize;
}

#[derive(Debug, Clone)]
pub struct MultiSpeakerModel {
    host: HostModel,
    pub sidecar: SidecarModule,
    pub conv_in: Conv1d,
    pub conv_out: Conv1d,
    injection: InjectionPoint,
}

/// Freezes `host` and mounts `sidecar` after encoder block `point.location`,
/// with kernel-3 channel-preserving convolutions on either side.
pub fn inject_sidecar(mut host: HostModel, sidecar: SidecarModule, point: InjectionPoint) -> Result<MultiSpeakerModel> {
    point.check(host.blocks.len())?;
    let c = host.config.model_dim;
    if sidecar.config().io_channels != c {
        return Err(Error::shape("sidecar io_channels", c, sidecar.config().io_channels));
    }
    host.freeze();
    let seed = sidecar.config().seed;
    Ok(MultiSpeakerModel {
        conv_in: Conv1d::new("coord.conv_in", seed, c, c, 3, 1)?,
        conv_out: Conv1d::new("coord.conv_out", seed, c, c, 3, 1)?,
        host,
        sidecar,
        injection: point,
    })
}

impl MultiSpeakerModel {
    /// Mixed embedding at the injection point after the input convolution.
    pub fn filtered(&self, features: &Tensor, mask: &FrameMask) -> Result<Tensor> {
        let x = self.host.hidden_at(features, mask, self.injection.location)?;
        mask.apply(&self.conv_in.forward(&x)?)
    }
}

impl MultiStreamModel for MultiSpeakerModel {
    fn forward(&self, features: &Tensor, mask: &FrameMask) -> Result<StreamOutput> {
        let filtered = self.filtered(features, mask)?;
        let masks = self.sidecar.forward(&filtered, mask)?;
        let n = self.num_speakers();
        let streams = (0..n)
            .map(|s| {
                let gated = filtered.mul(&masks.get(s)?)?;
                mask.apply(&self.conv_out.forward(&gated)?)
            })
            .collect::<Result<Vec<_>>>()?;
        let separated = Tensor::stack(&streams, 0)?;
        let stacked = stack_speakers(&streams)?;
        let stacked_mask = mask.repeat(n)?;
        let l = self.injection.location;
        let h = self.host.run_blocks(&stacked, l, self.host.blocks.len(), &stacked_mask)?;
        Ok(StreamOutput {
            log_probs: self.host.decode(&h)?,
            separated,
            masks: Some(masks),
            num_speakers: n,
        })
    }

    fn host(&self) -> &HostModel {
        &self.host
    }

    fn host_mut(&mut self) -> &mut HostModel {
        &mut self.host
    }

    fn injection(&self) -> InjectionPoint {
        self.injection
    }

    fn num_speakers(&self) -> usize {
        self.sidecar.config().num_speakers
    }
}

impl Parameterized for MultiSpeakerModel {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.host.visit(f);
        self.conv_in.visit(f);
        self.sidecar.visit(f);
        self.conv_out.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.host.visit_mut(f);
        self.conv_in.visit_mut(f);
        self.sidecar.visit_mut(f);
        self.conv_out.visit_mut(f);
    }
}

/// Control system: encoder block `location` is replaced by `N` trainable
/// copies of itself, one per speaker; everything else stays frozen.
#[derive(Debug, Clone)]
pub struct BaselineModel {
    host: HostModel,
    pub duplicates: Vec<EncoderBlock>,
    injection: InjectionPoint,
}

pub fn build_baseline_control(mut host: HostModel, point: InjectionPoint, speakers: usize) -> Result<BaselineModel> {
    point.check(host.blocks.len())?;
    if point.location == 0 {
        return Err(Error::Invalid(
            "baseline needs a preceding encoder block; location 0 has none".into(),
        ));
    }
    if speakers < 2 {
        return Err(Error::config("num_speakers", "must be >= 2"));
    }
    host.freeze();
    let source = &host.blocks[point.location - 1];
    let mut duplicates = (0..speakers)
        .map(|s| source.duplicate(&format!("baseline.dup.{s}")))
        .collect::<Result<Vec<_>>>()?;
    duplicates.set_trainable(true);
    Ok(BaselineModel {
        host,
        duplicates,
        injection: point,
    })
}

impl MultiStreamModel for BaselineModel {
    fn forward(&self, features: &Tensor, mask: &FrameMask) -> Result<StreamOutput> {
        let l = self.injection.location;
        let x = self.host.hidden_at(features, mask, l - 1)?;
        let streams = self
            .duplicates
            .iter()
            .map(|block| block.forward(&x, mask))
            .collect::<Result<Vec<_>>>()?;
        let n = streams.len();
        let separated = Tensor::stack(&streams, 0)?;
        let stacked = stack_speakers(&streams)?;
        let stacked_mask = mask.repeat(n)?;
        let h = self.host.run_blocks(&stacked, l, self.host.blocks.len(), &stacked_mask)?;
        Ok(StreamOutput {
            log_probs: self.host.decode(&h)?,
            separated,
            masks: None,
            num_speakers: n,
        })
    }

    fn host(&self) -> &HostModel {
        &self.host
    }

    fn host_mut(&mut self) -> &mut HostModel {
        &mut self.host
    }

    fn injection(&self) -> InjectionPoint {
        self.injection
    }

    fn num_speakers(&self) -> usize {
        self.duplicates.len()
    }
}

impl Parameterized for BaselineModel {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.host.visit(f);
        self.duplicates.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.host.visit_mut(f);
        self.duplicates.visit_mut(f);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParameterReport {
    pub trainable_count: usize,
    pub frozen_count: usize,
    pub trainable_fraction: f64,
}

impl ParameterReport {
    pub fn from_counts(trainable_count: usize, frozen_count: usize) -> Self {
        let total = trainable_count + frozen_count;
        ParameterReport {
            trainable_count,
            frozen_count,
            trainable_fraction: if total == 0 {
                0.0
            } else {
                trainable_count as f64 / total as f64
            },
        }
    }

    pub fn total(&self) -> usize {
        self.trainable_count + self.frozen_count
    }
}

pub fn parameter_report(model: &dyn Parameterized) -> ParameterReport {
    let (mut trainable, mut frozen) = (0, 0);
    model.visit(&mut |p| {
        if p.is_trainable() {
            trainable += p.elem_count()
        } else {
            frozen += p.elem_count()
        }
    });
    ParameterReport::from_counts(trainable, frozen)
}

/// Hidden states of each clean single-speaker source after `point.location`
/// encoder blocks of the frozen host. Sources are `(frames, feature_dim)`
/// row-major.
pub fn clean_embedding_targets(host: &HostModel, clean_sources: &[(&[f32], usize)], point: InjectionPoint) -> Result<Vec<Embedding>> {
    point.check(host.blocks.len())?;
    clean_sources
        .iter()
        .map(|&(values, frames)| {
            let (x, mask) = pad_batch(&[(values, frames)], host.config.feature_dim)?;
            let h = host.hidden_at(&x, &mask, point.location)?.detach();
            Embedding::from_frames_major(&h.squeeze(0)?)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sidecar::{init_sidecar, NormKind, SidecarConfig};
    use candle_core::Device;

    fn tiny_host() -> HostModel {
        let alphabet = Alphabet::numbered(4);
        let cfg = HostConfig {
            feature_dim: 6,
            model_dim: 8,
            encoder_blocks: 3,
            attention_heads: 2,
            vocab: alphabet.tokens().to_vec(),
            blank_index: 0,
            seed: 3,
            ff_dim: Some(16),
            extractor_kernel: 3,
        };
        build_host(cfg).unwrap()
    }

    fn tiny_sidecar(c: usize) -> SidecarModule {
        init_sidecar(SidecarConfig {
            num_speakers: 2,
            blocks_per_repeat: 2,
            repeats: 1,
            bottleneck_channels: 4,
            hidden_channels: Some(6),
            io_channels: c,
            block_kernel: 3,
            norm: NormKind::Channel,
            seed: 9,
        })
        .unwrap()
    }

    fn features(b: usize, t: usize, f: usize) -> Tensor {
        let v: Vec<f32> = (0..b * t * f).map(|i| ((i * 31 % 17) as f32 - 8.0) / 8.0).collect();
        Tensor::from_vec(v, (b, t, f), &Device::Cpu).unwrap()
    }

    #[test]
    fn toy_shapes() {
        let alphabet = Alphabet::numbered(12);
        let host = build_host(HostConfig::toy(10, &alphabet, 1)).unwrap();
        let out = host.forward(&features(2, 5, 10), &FrameMask::full(2, 5).unwrap()).unwrap();
        assert_eq!(out.dims(), &[2, 5, 13]);
        let one = host.forward(&features(1, 1, 10), &FrameMask::full(1, 1).unwrap()).unwrap();
        assert_eq!(one.dims(), &[1, 1, 13]);
    }

    #[test]
    fn host_config_errors() {
        let mut cfg = tiny_host().config().clone();
        cfg.attention_heads = 3;
        assert!(build_host(cfg).unwrap_err().to_string().contains("attention_heads"));
        let mut cfg = tiny_host().config().clone();
        cfg.blank_index = 9;
        assert!(build_host(cfg).is_err());
        let mut cfg = tiny_host().config().clone();
        cfg.encoder_blocks = 0;
        assert!(build_host(cfg).is_err());
    }

    #[test]
    fn freeze_is_idempotent() {
        let mut host = tiny_host();
        assert!(!host.is_frozen());
        host.freeze();
        host.freeze();
        assert!(host.is_frozen());
        assert_eq!(parameter_report(&host).trainable_count, 0);
        assert_eq!(parameter_report(&host).trainable_fraction, 0.0);
    }

    #[test]
    fn stacking_is_speaker_major() {
        let model = inject_sidecar(tiny_host(), tiny_sidecar(8), InjectionPoint::new(1)).unwrap();
        let out = model.forward(&features(3, 4, 6), &FrameMask::full(3, 4).unwrap()).unwrap();
        assert_eq!(out.log_probs.dims(), &[6, 4, 5]);
        assert_eq!(out.separated.dims(), &[2, 3, 4, 8]);
        // stream item 4 is batch item 1 of speaker 1
        let from_stack = unstack_speakers(&out.log_probs, 2).unwrap();
        assert_eq!(from_stack.len(), 2);
        let a: Vec<f32> = out.log_probs.get(4).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = from_stack[1].get(1).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn injection_range_and_channels() {
        assert!(inject_sidecar(tiny_host(), tiny_sidecar(8), InjectionPoint::new(4)).is_err());
        assert!(inject_sidecar(tiny_host(), tiny_sidecar(8), InjectionPoint::new(3)).is_ok());
        assert!(inject_sidecar(tiny_host(), tiny_sidecar(7), InjectionPoint::new(1)).is_err());
    }

    #[test]
    fn trainable_set_is_the_wrapper() {
        let model = inject_sidecar(tiny_host(), tiny_sidecar(8), InjectionPoint::new(2)).unwrap();
        model.visit(&mut |p| assert_eq!(p.is_trainable(), !p.name().starts_with("host."), "{}", p.name()));
        let r = parameter_report(&model);
        assert_eq!(r.frozen_count, tiny_host().num_parameters());
        assert_eq!(
            r.trainable_count,
            model.sidecar.num_parameters() + 2 * (8 * 8 * 3 + 8)
        );
    }

    #[test]
    fn baseline_copies_agree_before_training() {
        let base = build_baseline_control(tiny_host(), InjectionPoint::new(2), 2).unwrap();
        let out = base.forward(&features(2, 5, 6), &FrameMask::full(2, 5).unwrap()).unwrap();
        let streams = unstack_speakers(&out.log_probs, 2).unwrap();
        let d = (&streams[0] - &streams[1]).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(d, 0.0);
        base.visit(&mut |p| assert_eq!(p.is_trainable(), p.name().starts_with("baseline.dup."), "{}", p.name()));
        assert_eq!(parameter_report(&base).trainable_count, 2 * tiny_host().blocks[1].num_parameters());
        assert!(build_baseline_control(tiny_host(), InjectionPoint::new(0), 2).is_err());
    }

    #[test]
    fn clean_targets_match_instrumented_forward() {
        let host = tiny_host();
        let x = features(1, 7, 6);
        let values: Vec<f32> = x.flatten_all().unwrap().to_vec1().unwrap();
        let targets = clean_embedding_targets(&host, &[(&values, 7), (&values, 7)], InjectionPoint::new(2)).unwrap();
        assert_eq!(targets[0], targets[1]);
        assert_eq!((targets[0].channels(), targets[0].frames()), (8, 7));
        let mask = FrameMask::full(1, 7).unwrap();
        let mut h = host.embed(&x, &mask).unwrap();
        for block in &host.blocks[..2] {
            h = block.forward(&h, &mask).unwrap();
        }
        let direct = Embedding::from_frames_major(&h.squeeze(0).unwrap()).unwrap();
        assert_eq!(direct, targets[0]);
    }
}
