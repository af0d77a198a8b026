//! The mask separator: a stack of dilated depthwise-separable convolution
//! blocks mapping a mixed embedding to one nonnegative mask per speaker.

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{DepthwiseConv1d, FrameMask, GlobalLayerNorm, LayerNorm, Linear, PRelu};
use crate::params::{Param, Parameterized};

/// Normalization used inside each convolution block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    /// Per-frame normalization over channels. Keeps the separator local in time.
    #[default]
    Channel,
    /// Normalization over all (channel, frame) entries of an utterance.
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidecarConfig {
    pub num_speakers: usize,
    pub blocks_per_repeat: usize,
    pub repeats: usize,
    pub bottleneck_channels: usize,
    /// Width of the depthwise stage; `None` means four times the bottleneck.
    #[serde(default)]
    pub hidden_channels: Option<usize>,
    pub io_channels: usize,
    pub block_kernel: usize,
    #[serde(default)]
    pub norm: NormKind,
    #[serde(default)]
    pub seed: u64,
}

impl SidecarConfig {
    /// N=2, K=8, R=3, B=128, C=768, P=3.
    pub fn reference() -> Self {
        SidecarConfig {
            num_speakers: 2,
            blocks_per_repeat: 8,
            repeats: 3,
            bottleneck_channels: 128,
            hidden_channels: None,
            io_channels: 768,
            block_kernel: 3,
            norm: NormKind::Channel,
            seed: 0,
        }
    }

    pub fn hidden(&self) -> usize {
        self.hidden_channels.unwrap_or(4 * self.bottleneck_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_speakers < 2 {
            return Err(Error::config("num_speakers", format!("must be >= 2, got {}", self.num_speakers)));
        }
        let positive = [
            ("blocks_per_repeat", self.blocks_per_repeat),
            ("repeats", self.repeats),
            ("bottleneck_channels", self.bottleneck_channels),
            ("hidden_channels", self.hidden()),
            ("io_channels", self.io_channels),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be >= 1"));
            }
        }
        if self.blocks_per_repeat > 30 {
            return Err(Error::config("blocks_per_repeat", "dilation 2^(K-1) overflows"));
        }
        if self.block_kernel % 2 == 0 {
            return Err(Error::config("block_kernel", format!("must be odd, got {}", self.block_kernel)));
        }
        Ok(())
    }

    /// Dilations of all blocks in repeat-major order.
    pub fn dilations(&self) -> Vec<usize> {
        (0..self.repeats)
            .flat_map(|_| (0..self.blocks_per_repeat).map(|k| 1usize << k))
            .collect()
    }
}

/// Width in frames of the input window that can influence one output frame.
pub fn receptive_field(config: &SidecarConfig) -> Result<usize> {
    if config.block_kernel % 2 == 0 {
        return Err(Error::config("block_kernel", format!("must be odd, got {}", config.block_kernel)));
    }
    let per_repeat = (1usize << config.blocks_per_repeat) - 1;
    Ok(1 + (config.block_kernel - 1) * config.repeats * per_repeat)
}

/// A `channels x frames` activation matrix, row-major by channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    channels: usize,
    frames: usize,
    values: Vec<f32>,
}

impl Embedding {
    pub fn new(channels: usize, frames: usize, values: Vec<f32>) -> Result<Self> {
        if channels == 0 || frames == 0 {
            return Err(Error::shape("embedding", "channels, frames >= 1", format!("{channels}x{frames}")));
        }
        if values.len() != channels * frames {
            return Err(Error::shape("embedding values", channels * frames, values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("embedding contains non-finite values".into()));
        }
        Ok(Embedding { channels, frames, values })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, channel: usize, frame: usize) -> f32 {
        self.values[channel * self.frames + frame]
    }

    /// As a `(1, frames, channels)` tensor.
    pub fn to_tensor(&self) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.values, (self.channels, self.frames), &Device::Cpu)?;
        Ok(t.t()?.contiguous()?.unsqueeze(0)?)
    }

    /// From one item `(frames, channels)` of a batch tensor.
    pub fn from_frames_major(x: &Tensor) -> Result<Self> {
        let (frames, channels) = x.dims2()?;
        let values = x.t()?.contiguous()?.flatten_all()?.to_vec1::<f32>()?;
        Self::new(channels, frames, values)
    }
}

/// Nonnegative masks, `speakers x channels x frames`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskTensor {
    pub speakers: usize,
    pub channels: usize,
    pub frames: usize,
    pub values: Vec<f32>,
}

impl MaskTensor {
    pub fn get(&self, speaker: usize, channel: usize, frame: usize) -> f32 {
        self.values[(speaker * self.channels + channel) * self.frames + frame]
    }

    pub fn speaker(&self, speaker: usize) -> &[f32] {
        let n = self.channels * self.frames;
        &self.values[speaker * n..(speaker + 1) * n]
    }

    pub fn min(&self) -> f32 {
        self.values.iter().copied().fold(f32::INFINITY, f32::min)
    }
}

#[derive(Debug, Clone)]
pub enum BlockNorm {
    Channel(LayerNorm),
    Global(GlobalLayerNorm),
}

impl BlockNorm {
    fn new(kind: NormKind, name: &str, channels: usize) -> Result<Self> {
        Ok(match kind {
            NormKind::Channel => BlockNorm::Channel(LayerNorm::new(name, channels)?),
            NormKind::Global => BlockNorm::Global(GlobalLayerNorm::new(name, channels)?),
        })
    }

    fn forward(&self, x: &Tensor, mask: &FrameMask) -> Result<Tensor> {
        match self {
            BlockNorm::Channel(n) => n.forward(x),
            BlockNorm::Global(n) => n.forward(x, mask),
        }
    }
}

impl Parameterized for BlockNorm {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        match self {
            BlockNorm::Channel(n) => n.visit(f),
            BlockNorm::Global(n) => n.visit(f),
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        match self {
            BlockNorm::Channel(n) => n.visit_mut(f),
            BlockNorm::Global(n) => n.visit_mut(f),
        }
    }
}

/// 1x1 expand, PReLU, norm, dilated depthwise, PReLU, norm, 1x1 project back,
/// added to the block input. No skip-connection output.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub expand: Linear,
    pub act_in: PRelu,
    pub norm_in: BlockNorm,
    pub depthwise: DepthwiseConv1d,
    pub act_out: PRelu,
    pub norm_out: BlockNorm,
    pub residual: Linear,
}

impl ConvBlock {
    fn new(name: &str, cfg: &SidecarConfig, dilation: usize) -> Result<Self> {
        let (b, h) = (cfg.bottleneck_channels, cfg.hidden());
        Ok(ConvBlock {
            expand: Linear::new(&format!("{name}.expand"), cfg.seed, b, h, true)?,
            act_in: PRelu::new(&format!("{name}.act_in"))?,
            norm_in: BlockNorm::new(cfg.norm, &format!("{name}.norm_in"), h)?,
            depthwise: DepthwiseConv1d::new(&format!("{name}.depthwise"), cfg.seed, h, cfg.block_kernel, dilation)?,
            act_out: PRelu::new(&format!("{name}.act_out"))?,
            norm_out: BlockNorm::new(cfg.norm, &format!("{name}.norm_out"), h)?,
            residual: Linear::new(&format!("{name}.residual"), cfg.seed, h, b, true)?,
        })
    }

    pub fn dilation(&self) -> usize {
        self.depthwise.dilation
    }

    fn forward(&self, x: &Tensor, mask: &FrameMask) -> Result<Tensor> {
        let h = self.norm_in.forward(&self.act_in.forward(&self.expand.forward(x)?)?, mask)?;
        let h = mask.apply(&h)?;
        let h = self.depthwise.forward(&h)?;
        let h = self.norm_out.forward(&self.act_out.forward(&h)?, mask)?;
        let y = (x + self.residual.forward(&h)?)?;
        mask.apply(&y)
    }
}

impl Parameterized for ConvBlock {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.expand.visit(f);
        self.act_in.visit(f);
        self.norm_in.visit(f);
        self.depthwise.visit(f);
        self.act_out.visit(f);
        self.norm_out.visit(f);
        self.residual.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.expand.visit_mut(f);
        self.act_in.visit_mut(f);
        self.norm_in.visit_mut(f);
        self.depthwise.visit_mut(f);
        self.act_out.visit_mut(f);
        self.norm_out.visit_mut(f);
        self.residual.visit_mut(f);
    }
}

#[derive(Debug, Clone)]
pub struct SidecarModule {
    config: SidecarConfig,
    pub bottleneck: Linear,
    pub blocks: Vec<ConvBlock>,
    /// 1x1 projection to `N * C` mask channels, followed by ReLU.
    pub output: Linear,
}

impl SidecarModule {
    pub fn new(config: SidecarConfig) -> Result<Self> {
        config.validate()?;
        let bottleneck = Linear::new(
            "sidecar.bottleneck",
            config.seed,
            config.io_channels,
            config.bottleneck_channels,
            true,
        )?;
        let blocks = config
            .dilations()
            .into_iter()
            .enumerate()
            .map(|(i, d)| ConvBlock::new(&format!("sidecar.blocks.{i}"), &config, d))
            .collect::<Result<Vec<_>>>()?;
        let output = Linear::new(
            "sidecar.output",
            config.seed,
            config.bottleneck_channels,
            config.num_speakers * config.io_channels,
            true,
        )?;
        Ok(SidecarModule {
            config,
            bottleneck,
            blocks,
            output,
        })
    }

    pub fn config(&self) -> &SidecarConfig {
        &self.config
    }

    /// Masks before the final rectifier, `(N, batch, frames, C)`.
    pub fn mask_logits(&self, x: &Tensor, mask: &FrameMask) -> Result<Tensor> {
        let (b, t, c) = x.dims3()?;
        if c != self.config.io_channels {
            return Err(Error::shape("sidecar input channels", self.config.io_channels, c));
        }
        let mut h = mask.apply(&self.bottleneck.forward(x)?)?;
        for block in &self.blocks {
            h = block.forward(&h, mask)?;
        }
        let n = self.config.num_speakers;
        let out = self.output.forward(&h)?.reshape((b, t, n, c))?;
        Ok(out.permute((2, 0, 1, 3))?.contiguous()?)
    }

    /// Per-speaker masks for a padded batch, `(N, batch, frames, C)`, zero on padding.
    pub fn forward(&self, x: &Tensor, mask: &FrameMask) -> Result<Tensor> {
        let m = self.mask_logits(x, mask)?.relu()?;
        Ok(m.broadcast_mul(&mask.tensor().unsqueeze(0)?)?)
    }

    pub fn forward_masks(&self, emb: &Embedding) -> Result<MaskTensor> {
        if emb.channels() != self.config.io_channels {
            return Err(Error::shape("sidecar input channels", self.config.io_channels, emb.channels()));
        }
        let x = emb.to_tensor()?;
        let mask = FrameMask::full(1, emb.frames())?;
        let m = self.forward(&x, &mask)?.squeeze(1)?; // (N, T, C)
        let values = m.transpose(1, 2)?.contiguous()?.flatten_all()?.to_vec1::<f32>()?;
        Ok(MaskTensor {
            speakers: self.config.num_speakers,
            channels: emb.channels(),
            frames: emb.frames(),
            values,
        })
    }

    pub fn count_parameters(&self) -> usize {
        self.num_parameters()
    }
}

impl Parameterized for SidecarModule {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.bottleneck.visit(f);
        self.blocks.visit(f);
        self.output.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.bottleneck.visit_mut(f);
        self.blocks.visit_mut(f);
        self.output.visit_mut(f);
    }
}

pub fn init_sidecar(config: SidecarConfig) -> Result<SidecarModule> {
    SidecarModule::new(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(k: usize, r: usize) -> SidecarConfig {
        SidecarConfig {
            num_speakers: 2,
            blocks_per_repeat: k,
            repeats: r,
            bottleneck_channels: 6,
            hidden_channels: Some(8),
            io_channels: 5,
            block_kernel: 3,
            norm: NormKind::Channel,
            seed: 11,
        }
    }

    fn ramp(c: usize, t: usize) -> Embedding {
        let v = (0..c * t).map(|i| ((i * 7919 % 23) as f32 - 11.0) / 7.0).collect();
        Embedding::new(c, t, v).unwrap()
    }

    #[test]
    fn reference_block_layout() {
        let cfg = SidecarConfig::reference();
        let d = cfg.dilations();
        assert_eq!(d.len(), 24);
        let one_repeat: Vec<usize> = vec![1, 2, 4, 8, 16, 32, 64, 128];
        for r in 0..3 {
            assert_eq!(&d[r * 8..(r + 1) * 8], one_repeat.as_slice());
        }
    }

    #[test]
    fn smallest_config_has_one_block() {
        let m = init_sidecar(small(1, 1)).unwrap();
        assert_eq!(m.blocks.len(), 1);
        assert_eq!(m.blocks[0].dilation(), 1);
    }

    #[test]
    fn invalid_fields_are_named() {
        let mut cfg = small(2, 1);
        cfg.block_kernel = 4;
        let err = init_sidecar(cfg).unwrap_err().to_string();
        assert!(err.contains("block_kernel"), "{err}");
        let mut cfg = small(2, 1);
        cfg.num_speakers = 1;
        assert!(init_sidecar(cfg).unwrap_err().to_string().contains("num_speakers"));
        let mut cfg = small(2, 1);
        cfg.repeats = 0;
        assert!(init_sidecar(cfg).unwrap_err().to_string().contains("repeats"));
    }

    #[test]
    fn receptive_field_closed_form() {
        assert_eq!(receptive_field(&small(1, 1)).unwrap(), 3);
        assert_eq!(receptive_field(&small(2, 1)).unwrap(), 7);
        assert_eq!(receptive_field(&SidecarConfig::reference()).unwrap(), 1531);
        let mut even = small(2, 1);
        even.block_kernel = 2;
        assert!(receptive_field(&even).is_err());
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = init_sidecar(small(3, 2)).unwrap().named_parameters();
        let b = init_sidecar(small(3, 2)).unwrap().named_parameters();
        for (pa, pb) in a.iter().zip(&b) {
            assert_eq!(pa.name(), pb.name());
            let (va, vb) = (pa.values().unwrap(), pb.values().unwrap());
            assert!(va.iter().zip(&vb).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn mask_shape_and_sign() {
        let m = init_sidecar(small(2, 2)).unwrap();
        let masks = m.forward_masks(&ramp(5, 9)).unwrap();
        assert_eq!((masks.speakers, masks.channels, masks.frames), (2, 5, 9));
        assert_eq!(masks.values.len(), 2 * 5 * 9);
        assert!(masks.min() >= 0.0);
    }

    #[test]
    fn negative_output_bias_zeroes_masks() {
        let m = init_sidecar(small(2, 1)).unwrap();
        m.visit(&mut |p| p.set_values(&vec![0.0; p.elem_count()]).unwrap());
        m.output.bias.as_ref().unwrap().set_values(&[-1.0; 10]).unwrap();
        let masks = m.forward_masks(&ramp(5, 6)).unwrap();
        assert!(masks.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_mismatch_is_a_shape_error() {
        let m = init_sidecar(small(1, 1)).unwrap();
        let err = m.forward_masks(&ramp(4, 6)).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }), "{err}");
        assert!(err.to_string().contains("expected 5, got 4"));
    }

    #[test]
    fn single_conv_parameter_count() {
        let lin = Linear::new("x", 0, 2, 3, true).unwrap();
        assert_eq!(lin.num_parameters(), 9);
        let empty: Vec<Linear> = Vec::new();
        assert_eq!(empty.num_parameters(), 0);
    }

    #[test]
    fn global_norm_couples_all_frames() {
        let mut cfg = small(1, 1);
        cfg.norm = NormKind::Global;
        let m = init_sidecar(cfg).unwrap();
        let base = ramp(5, 20);
        let mut v = base.values().to_vec();
        v[10] += 1.0; // channel 0, frame 10
        let bumped = Embedding::new(5, 20, v).unwrap();
        let x0 = m.mask_logits(&base.to_tensor().unwrap(), &FrameMask::full(1, 20).unwrap()).unwrap();
        let x1 = m.mask_logits(&bumped.to_tensor().unwrap(), &FrameMask::full(1, 20).unwrap()).unwrap();
        let d: Vec<f32> = (x1 - x0).unwrap().abs().unwrap().flatten_all().unwrap().to_vec1().unwrap();
        // frame 0 lies outside the 3-frame window yet still moves
        assert!(d[..5].iter().any(|&x| x > 0.0));
    }
}
