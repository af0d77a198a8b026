//! Building blocks shared by the host encoder and the separator.
//!
//! All activations use the `(batch, frames, channels)` layout. Sequences in a
//! batch are right-padded; a [`FrameMask`] carries the valid frames and every
//! layer that mixes frames re-zeroes the padding so a padded item computes
//! exactly what it would compute alone.

use candle_core::{Device, Tensor, D};

use crate::error::{Error, Result};
use crate::params::{Param, Parameterized};

/// `(batch, frames, 1)` tensor of ones over valid frames, zeros over padding.
#[derive(Debug, Clone)]
pub struct FrameMask {
    mask: Tensor,
    lengths: Vec<usize>,
}

impl FrameMask {
    pub fn new(lengths: &[usize], frames: usize) -> Result<Self> {
        let mut m = vec![0f32; lengths.len() * frames];
        for (b, &len) in lengths.iter().enumerate() {
            if len > frames {
                return Err(Error::shape("frame mask length", format!("<= {frames}"), len));
            }
            m[b * frames..b * frames + len].fill(1.0);
        }
        Ok(FrameMask {
            mask: Tensor::from_vec(m, (lengths.len(), frames, 1), &Device::Cpu)?,
            lengths: lengths.to_vec(),
        })
    }

    pub fn full(batch: usize, frames: usize) -> Result<Self> {
        Self::new(&vec![frames; batch], frames)
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn frames(&self) -> usize {
        self.mask.dims()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.mask
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_mul(&self.mask)?)
    }

    /// The same mask tiled `n` times along the batch axis.
    pub fn repeat(&self, n: usize) -> Result<Self> {
        let lengths: Vec<usize> = (0..n).flat_map(|_| self.lengths.iter().copied()).collect();
        Self::new(&lengths, self.frames())
    }

    /// Additive attention bias `(batch, 1, 1, frames)`: 0 on valid keys, -1e9 on padding.
    fn key_bias(&self) -> Result<Tensor> {
        let (b, t, _) = self.mask.dims3()?;
        Ok(((self.mask.reshape((b, 1, 1, t))? - 1.0)? * 1e9)?)
    }
}

/// `out[:, t] = x[:, t + offset]`, zero where `t + offset` falls outside.
pub(crate) fn shift_frames(x: &Tensor, offset: isize) -> Result<Tensor> {
    let t = x.dim(1)?;
    let a = offset.unsigned_abs();
    if offset == 0 {
        return Ok(x.clone());
    }
    if a >= t {
        return Ok(x.zeros_like()?);
    }
    Ok(if offset > 0 {
        x.narrow(1, a, t - a)?.pad_with_zeros(1, 0, a)?
    } else {
        x.narrow(1, 0, t - a)?.pad_with_zeros(1, a, 0)?
    })
}

/// `(B, T, in) x (out, in)^T -> (B, T, out)`.
fn project(x: &Tensor, weight: &Tensor) -> Result<Tensor> {
    let (b, t, c) = x.dims3()?;
    let out = weight.dim(0)?;
    Ok(x.reshape((b * t, c))?.matmul(&weight.t()?)?.reshape((b, t, out))?)
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
}

impl Linear {
    pub fn new(name: &str, seed: u64, input: usize, output: usize, bias: bool) -> Result<Self> {
        let bound = 1.0 / (input as f32).sqrt();
        Ok(Linear {
            weight: Param::uniform(format!("{name}.weight"), seed, bound, &[output, input])?,
            bias: if bias {
                Some(Param::uniform(format!("{name}.bias"), seed, bound, &[output])?)
            } else {
                None
            },
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = project(x, &self.weight.tensor())?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.tensor())?),
            None => Ok(y),
        }
    }
}

impl Parameterized for Linear {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        self.bias.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        self.bias.visit_mut(f);
    }
}

impl Parameterized for Param {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(self)
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(self)
    }
}

/// Dense 1-D convolution over frames with symmetric zero padding.
/// Weight layout is `(out, in, kernel)`.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub weight: Param,
    pub bias: Param,
    pub kernel: usize,
    pub dilation: usize,
}

impl Conv1d {
    pub fn new(name: &str, seed: u64, input: usize, output: usize, kernel: usize, dilation: usize) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::config("kernel", format!("must be odd, got {kernel}")));
        }
        let bound = 1.0 / ((input * kernel) as f32).sqrt();
        Ok(Conv1d {
            weight: Param::uniform(format!("{name}.weight"), seed, bound, &[output, input, kernel])?,
            bias: Param::uniform(format!("{name}.bias"), seed, bound, &[output])?,
            kernel,
            dilation,
        })
    }

    /// Identity map: centre tap is the identity matrix, everything else zero.
    pub fn set_identity(&self) -> Result<()> {
        let dims = self.weight.shape();
        let (out, inp, k) = (dims[0], dims[1], dims[2]);
        if out != inp {
            return Err(Error::shape("identity conv", format!("{inp} outputs"), out));
        }
        let mut w = vec![0f32; out * inp * k];
        for c in 0..out {
            w[(c * inp + c) * k + k / 2] = 1.0;
        }
        self.weight.set_values(&w)?;
        self.bias.set_values(&vec![0.0; out])
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let w = self.weight.tensor();
        let centre = (self.kernel / 2) as isize;
        let mut acc: Option<Tensor> = None;
        for j in 0..self.kernel {
            let offset = (j as isize - centre) * self.dilation as isize;
            let tap = w.narrow(2, j, 1)?.squeeze(2)?;
            let term = project(&shift_frames(x, offset)?, &tap)?;
            acc = Some(match acc {
                None => term,
                Some(a) => (a + term)?,
            });
        }
        Ok(acc.expect("kernel >= 1").broadcast_add(&self.bias.tensor())?)
    }
}

impl Parameterized for Conv1d {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Depthwise dilated convolution, weight layout `(channels, 1, kernel)`.
#[derive(Debug, Clone)]
pub struct DepthwiseConv1d {
    pub weight: Param,
    pub bias: Param,
    pub kernel: usize,
    pub dilation: usize,
}

impl DepthwiseConv1d {
    pub fn new(name: &str, seed: u64, channels: usize, kernel: usize, dilation: usize) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::config("block_kernel", format!("must be odd, got {kernel}")));
        }
        let bound = 1.0 / (kernel as f32).sqrt();
        Ok(DepthwiseConv1d {
            weight: Param::uniform(format!("{name}.weight"), seed, bound, &[channels, 1, kernel])?,
            bias: Param::uniform(format!("{name}.bias"), seed, bound, &[channels])?,
            kernel,
            dilation,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let w = self.weight.tensor();
        let centre = (self.kernel / 2) as isize;
        let mut acc: Option<Tensor> = None;
        for j in 0..self.kernel {
            let offset = (j as isize - centre) * self.dilation as isize;
            let tap = w.narrow(2, j, 1)?.flatten_all()?;
            let term = shift_frames(x, offset)?.broadcast_mul(&tap)?;
            acc = Some(match acc {
                None => term,
                Some(a) => (a + term)?,
            });
        }
        Ok(acc.expect("kernel >= 1").broadcast_add(&self.bias.tensor())?)
    }
}

impl Parameterized for DepthwiseConv1d {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Parametric rectifier with one shared slope.
#[derive(Debug, Clone)]
pub struct PRelu {
    pub slope: Param,
}

impl PRelu {
    pub fn new(name: &str) -> Result<Self> {
        Ok(PRelu {
            slope: Param::constant(format!("{name}.slope"), 0.25, &[1])?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let neg = x.neg()?.relu()?.broadcast_mul(&self.slope.tensor())?;
        Ok((x.relu()? - neg)?)
    }
}

impl Parameterized for PRelu {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.slope);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.slope);
    }
}

const NORM_EPS: f64 = 1e-5;

/// Per-frame layer normalization over channels.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
}

impl LayerNorm {
    pub fn new(name: &str, channels: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: Param::constant(format!("{name}.gamma"), 1.0, &[channels])?,
            beta: Param::constant(format!("{name}.beta"), 0.0, &[channels])?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centred = x.broadcast_sub(&mean)?;
        let var = centred.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centred.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.gamma.tensor())?
            .broadcast_add(&self.beta.tensor())?)
    }
}

impl Parameterized for LayerNorm {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.gamma);
        f(&self.beta);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

/// Layer normalization over (frames, channels) of each item, valid frames only.
#[derive(Debug, Clone)]
pub struct GlobalLayerNorm {
    pub gamma: Param,
    pub beta: Param,
}

impl GlobalLayerNorm {
    pub fn new(name: &str, channels: usize) -> Result<Self> {
        Ok(GlobalLayerNorm {
            gamma: Param::constant(format!("{name}.gamma"), 1.0, &[channels])?,
            beta: Param::constant(format!("{name}.beta"), 0.0, &[channels])?,
        })
    }

    pub fn forward(&self, x: &Tensor, mask: &FrameMask) -> Result<Tensor> {
        let (b, _, c) = x.dims3()?;
        let counts: Vec<f32> = mask.lengths().iter().map(|&l| (l.max(1) * c) as f32).collect();
        let counts = Tensor::from_vec(counts, (b, 1, 1), x.device())?;
        let x = mask.apply(x)?;
        let mean = x.sum_keepdim(1)?.sum_keepdim(2)?.div(&counts)?;
        let centred = mask.apply(&x.broadcast_sub(&mean)?)?;
        let var = centred.sqr()?.sum_keepdim(1)?.sum_keepdim(2)?.div(&counts)?;
        let normed = centred.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.gamma.tensor())?
            .broadcast_add(&self.beta.tensor())?)
    }
}

impl Parameterized for GlobalLayerNorm {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.gamma);
        f(&self.beta);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(name: &str, seed: u64, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config(
                "attention_heads",
                format!("{heads} heads do not divide model_dim {dim}"),
            ));
        }
        Ok(MultiHeadAttention {
            query: Linear::new(&format!("{name}.query"), seed, dim, dim, true)?,
            key: Linear::new(&format!("{name}.key"), seed, dim, dim, true)?,
            value: Linear::new(&format!("{name}.value"), seed, dim, dim, true)?,
            output: Linear::new(&format!("{name}.output"), seed, dim, dim, true)?,
            heads,
        })
    }

    pub fn forward(&self, x: &Tensor, mask: &FrameMask) -> Result<Tensor> {
        let (b, t, c) = x.dims3()?;
        let hd = c / self.heads;
        let split = |y: Tensor| -> Result<Tensor> {
            Ok(y.reshape((b, t, self.heads, hd))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(self.query.forward(x)?)?;
        let k = split(self.key.forward(x)?)?;
        let v = split(self.value.forward(x)?)?;
        let scores = (q.matmul(&k.t()?)? / (hd as f64).sqrt())?;
        let scores = scores.broadcast_add(&mask.key_bias()?)?;
        let attn = candle_nn::ops::softmax_last_dim(&scores)?;
        let ctx = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, t, c))?;
        self.output.forward(&ctx)
    }
}

impl Parameterized for MultiHeadAttention {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.query.visit(f);
        self.key.visit(f);
        self.value.visit(f);
        self.output.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.query.visit_mut(f);
        self.key.visit_mut(f);
        self.value.visit_mut(f);
        self.output.visit_mut(f);
    }
}

/// Pre-norm self-attention block followed by a two-layer GELU feed-forward.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub attn_norm: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ff_norm: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

impl EncoderBlock {
    pub fn new(name: &str, seed: u64, dim: usize, heads: usize, ff_dim: usize) -> Result<Self> {
        Ok(EncoderBlock {
            attn_norm: LayerNorm::new(&format!("{name}.attn_norm"), dim)?,
            attn: MultiHeadAttention::new(&format!("{name}.attn"), seed, dim, heads)?,
            ff_norm: LayerNorm::new(&format!("{name}.ff_norm"), dim)?,
            ff_in: Linear::new(&format!("{name}.ff_in"), seed, dim, ff_dim, true)?,
            ff_out: Linear::new(&format!("{name}.ff_out"), seed, ff_dim, dim, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mask: &FrameMask) -> Result<Tensor> {
        let h = (x + self.attn.forward(&self.attn_norm.forward(x)?, mask)?)?;
        let ff = self.ff_out.forward(&self.ff_in.forward(&self.ff_norm.forward(&h)?)?.gelu_erf()?)?;
        mask.apply(&(h + ff)?)
    }

    /// Independent copy with fresh storage and renamed parameters.
    pub fn duplicate(&self, name: &str) -> Result<Self> {
        let mut copy = self.clone();
        let mut err = None;
        let old_prefix = self.attn_norm.gamma.name().trim_end_matches(".attn_norm.gamma").to_string();
        copy.visit_mut(&mut |p| {
            let renamed = format!("{name}{}", &p.name()[old_prefix.len()..]);
            match p.deep_clone(renamed) {
                Ok(fresh) => *p = fresh,
                Err(e) => err = Some(e),
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(copy),
        }
    }
}

impl Parameterized for EncoderBlock {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.attn_norm.visit(f);
        self.attn.visit(f);
        self.ff_norm.visit(f);
        self.ff_in.visit(f);
        self.ff_out.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.attn_norm.visit_mut(f);
        self.attn.visit_mut(f);
        self.ff_norm.visit_mut(f);
        self.ff_in.visit_mut(f);
        self.ff_out.visit_mut(f);
    }
}

/// Pads `(frames, channels)` row-major items into one `(batch, max_frames, channels)` tensor.
pub fn pad_batch(items: &[(&[f32], usize)], channels: usize) -> Result<(Tensor, FrameMask)> {
    let frames = items.iter().map(|(_, t)| *t).max().unwrap_or(0).max(1);
    let mut data = vec![0f32; items.len() * frames * channels];
    for (b, (values, t)) in items.iter().enumerate() {
        if values.len() != t * channels {
            return Err(Error::shape("batch item", t * channels, values.len()));
        }
        let start = b * frames * channels;
        data[start..start + values.len()].copy_from_slice(values);
    }
    let lengths: Vec<usize> = items.iter().map(|(_, t)| *t).collect();
    let x = Tensor::from_vec(data, (items.len(), frames, channels), &Device::Cpu)?;
    Ok((x, FrameMask::new(&lengths, frames)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(b: usize, t: usize, c: usize) -> Tensor {
        let v: Vec<f32> = (0..b * t * c).map(|i| ((i * 37 % 11) as f32 - 5.0) / 5.0).collect();
        Tensor::from_vec(v, (b, t, c), &Device::Cpu).unwrap()
    }

    #[test]
    fn shift_moves_frames_and_zero_fills() {
        let x = Tensor::from_vec(vec![1f32, 2., 3., 4.], (1, 4, 1), &Device::Cpu).unwrap();
        let fwd: Vec<f32> = shift_frames(&x, 1).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let back: Vec<f32> = shift_frames(&x, -2).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let gone: Vec<f32> = shift_frames(&x, 9).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(fwd, vec![2., 3., 4., 0.]);
        assert_eq!(back, vec![0., 0., 1., 2.]);
        assert_eq!(gone, vec![0.; 4]);
    }

    #[test]
    fn identity_conv_is_identity() {
        let conv = Conv1d::new("c", 1, 5, 5, 3, 1).unwrap();
        conv.set_identity().unwrap();
        let x = seq(2, 6, 5);
        let y = conv.forward(&x).unwrap();
        let diff = (y - &x).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn conv_matches_direct_sum() {
        let conv = Conv1d::new("c", 3, 2, 3, 3, 2).unwrap();
        let x = seq(1, 7, 2);
        let y: Vec<f32> = conv.forward(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let w = conv.weight.values().unwrap();
        let bias = conv.bias.values().unwrap();
        let xv: Vec<f32> = x.flatten_all().unwrap().to_vec1().unwrap();
        for t in 0..7isize {
            for o in 0..3 {
                let mut acc = bias[o];
                for j in 0..3isize {
                    let src = t + (j - 1) * 2;
                    if !(0..7).contains(&src) {
                        continue;
                    }
                    for i in 0..2 {
                        acc += w[(o * 2 + i) * 3 + j as usize] * xv[src as usize * 2 + i];
                    }
                }
                assert!((acc - y[t as usize * 3 + o]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn padded_item_matches_unpadded_block() {
        let block = EncoderBlock::new("b", 5, 8, 2, 16).unwrap();
        let short = seq(1, 3, 8);
        let alone = block.forward(&short, &FrameMask::full(1, 3).unwrap()).unwrap();
        let padded = short.pad_with_zeros(1, 0, 4).unwrap();
        let mask = FrameMask::new(&[3], 7).unwrap();
        let batched = block.forward(&padded, &mask).unwrap().narrow(1, 0, 3).unwrap();
        let diff = (alone - batched).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(diff < 1e-6, "{diff}");
    }

    #[test]
    fn duplicate_has_independent_storage() {
        let block = EncoderBlock::new("enc.1", 5, 8, 2, 16).unwrap();
        let copy = block.duplicate("dup.0").unwrap();
        assert_eq!(copy.attn.query.weight.name(), "dup.0.attn.query.weight");
        copy.ff_in.weight.set_values(&vec![0.0; 128]).unwrap();
        assert_ne!(block.ff_in.weight.values().unwrap(), vec![0.0; 128]);
    }
}
