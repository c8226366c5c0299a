//! Strided 1-D convolutional encoder for raw waveforms.
//!
//! Feature maps are channel-last, `[B, T, C]`.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{conv_out_len, BatchNorm, Conv1d, Ctx, Scope};
use crate::tensor::Real;

pub const PADDING: usize = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AudioEncoderConfig {
    pub num_blocks: usize,
    pub kernel: usize,
    pub stride: usize,
    pub stage_channels: Vec<usize>,
    pub latent_dim: usize,
    pub bn_epsilon: f64,
}

impl Default for AudioEncoderConfig {
    fn default() -> Self {
        Self { num_blocks: 4, kernel: 4, stride: 2, stage_channels: vec![16, 32, 64, 128], latent_dim: 128, bn_epsilon: 1e-5 }
    }
}

impl AudioEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_blocks == 0 || self.num_blocks != self.stage_channels.len() {
            return Err(Error::Config(format!(
                "audio encoder: num_blocks ({}) must equal the number of stage widths ({})",
                self.num_blocks,
                self.stage_channels.len()
            )));
        }
        if self.kernel < self.stride || self.stride == 0 {
            return Err(Error::Config("audio encoder: kernel must be at least the stride".into()));
        }
        if self.stage_channels.contains(&0) || self.latent_dim == 0 {
            return Err(Error::Config("audio encoder: widths must be positive".into()));
        }
        Ok(())
    }

    /// Factor by which the encoder shortens its input.
    pub fn downsample(&self) -> usize {
        self.stride.pow(self.num_blocks as u32)
    }
}

/// Encoder length arithmetic; exact halving for stride 2 and divisible inputs.
pub fn encoded_length(t: usize, cfg: &AudioEncoderConfig) -> usize {
    let f = cfg.downsample();
    if t % f == 0 && cfg.kernel == 2 * PADDING + cfg.stride {
        return t / f;
    }
    (0..cfg.num_blocks).fold(t, |l, _| conv_out_len(l, cfg.kernel, cfg.stride, PADDING))
}

/// Per-stage encoder activations plus the input waveform as `[B, T, 1]`.
#[derive(Clone)]
pub struct SkipStack<T> {
    pub stages: Vec<Var<T>>,
    pub input: Var<T>,
}

#[derive(Clone, Debug)]
pub struct AudioEncoder {
    pub cfg: AudioEncoderConfig,
    convs: Vec<Conv1d>,
    norms: Vec<BatchNorm>,
    proj: Conv1d,
}

impl AudioEncoder {
    pub fn new<T: Real>(scope: &mut Scope<'_, T>, cfg: &AudioEncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut in_ch = 1;
        for (i, &c) in cfg.stage_channels.iter().enumerate() {
            let mut s = scope.sub(&format!("block{i}"));
            convs.push(Conv1d::new(&mut s, "conv", in_ch, c, cfg.kernel, cfg.stride, PADDING, true));
            norms.push(BatchNorm::new(&mut s, "bn", c, cfg.bn_epsilon));
            in_ch = c;
        }
        let proj = Conv1d::new(scope, "proj", in_ch, cfg.latent_dim, 1, 1, 0, true);
        Ok(Self { cfg: cfg.clone(), convs, norms, proj })
    }

    /// `wave` is `[B, T]`; returns `[B, T', D]` and the skip stack.
    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, wave: &Var<T>) -> Result<(Var<T>, SkipStack<T>)> {
        if wave.shape().len() != 2 {
            return Err(Error::Shape(format!("audio batch must be [B, T], got {:?}", wave.shape())));
        }
        let (b, t) = (wave.dim(0), wave.dim(1));
        let f = self.cfg.downsample();
        if t < f || t % f != 0 {
            return Err(Error::Shape(format!(
                "waveform length {t} is not a multiple of {f}; pad it to {} samples",
                t.div_ceil(f).max(1) * f
            )));
        }
        let input = ctx.g.reshape(wave, &[b, t, 1]);
        let mut h = input.clone();
        let mut stages = Vec::with_capacity(self.convs.len());
        for (conv, bn) in self.convs.iter().zip(&self.norms) {
            h = ctx.g.relu(&bn.forward(ctx, &conv.forward(ctx, &h)));
            stages.push(h.clone());
        }
        let out = self.proj.forward(ctx, &h);
        Ok((out, SkipStack { stages, input }))
    }
}

/// Functional entry point: `encode_audio(batch, ..) -> (features, skips)`.
pub fn encode_audio<T: Real>(
    ctx: &Ctx<'_, T>,
    encoder: &AudioEncoder,
    wave: &Var<T>,
) -> Result<(Var<T>, SkipStack<T>)> {
    encoder.forward(ctx, wave)
}
