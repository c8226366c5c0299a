//! Waveform decoder mirroring the audio encoder.
//!
//! Every block doubles the time axis (frame repetition and a linear map),
//! concatenates the matching encoder activation, then applies
//! linear → layer norm → ReLU. The last block, at full resolution, takes the
//! raw input waveform as its skip.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::audio_encoder::{AudioEncoderConfig, SkipStack};
use crate::autograd::{Graph, RowPlan, Var};
use crate::error::{Error, Result};
use crate::nn::{Ctx, LayerNorm, Linear, Scope};
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub num_blocks: usize,
    pub hidden_dims: Vec<usize>,
    pub output_clamp: [f64; 2],
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self::mirror(&AudioEncoderConfig::default())
    }
}

impl DecoderConfig {
    pub fn mirror(enc: &AudioEncoderConfig) -> Self {
        Self {
            num_blocks: enc.num_blocks,
            hidden_dims: enc.stage_channels.iter().rev().copied().collect(),
            output_clamp: [-1.0, 1.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_blocks == 0 || self.hidden_dims.len() != self.num_blocks {
            return Err(Error::Config(format!(
                "decoder: num_blocks ({}) must equal the number of hidden widths ({})",
                self.num_blocks,
                self.hidden_dims.len()
            )));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::Config("decoder: hidden widths must be positive".into()));
        }
        let [lo, hi] = self.output_clamp;
        if !(lo < hi) {
            return Err(Error::Config("decoder: output_clamp must be an increasing pair".into()));
        }
        Ok(())
    }
}

/// Bring `[B, L, C]` to `target_len` frames: off by one → zero-pad or drop the
/// tail; further off → linear interpolation.
pub fn align_skip<T: Real>(g: &Graph<T>, skip: &Var<T>, target_len: usize) -> Var<T> {
    let l = skip.dim(1);
    if l == target_len {
        skip.clone()
    } else if l.abs_diff(target_len) == 1 {
        g.mix_rows(skip, Rc::new(RowPlan::pad_or_truncate(l, target_len)))
    } else {
        g.mix_rows(skip, Rc::new(RowPlan::linear_interp(l, target_len)))
    }
}

#[derive(Clone, Debug)]
struct UpBlock {
    up: Linear,
    merge: Linear,
    norm: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    skip_channels: Vec<usize>,
    entry: Linear,
    blocks: Vec<UpBlock>,
    out: Linear,
}

impl Decoder {
    /// `stage_channels` are the encoder widths, shallow to deep; `latent_dim` is the input width.
    pub fn new<T: Real>(
        scope: &mut Scope<'_, T>,
        cfg: &DecoderConfig,
        stage_channels: &[usize],
        latent_dim: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        if stage_channels.len() != cfg.num_blocks {
            return Err(Error::Config(format!(
                "decoder has {} blocks but the encoder has {} stages",
                cfg.num_blocks,
                stage_channels.len()
            )));
        }
        let nb = cfg.num_blocks;
        let deep = stage_channels[nb - 1];
        let entry = Linear::new(scope, "entry", latent_dim, deep, true);
        let mut width = 2 * deep;
        let mut blocks = Vec::with_capacity(nb);
        for (i, &hidden) in cfg.hidden_dims.iter().enumerate() {
            let skip_ch = if i + 1 < nb { stage_channels[nb - 2 - i] } else { 1 };
            let mut s = scope.sub(&format!("block{i}"));
            blocks.push(UpBlock {
                up: Linear::new(&mut s, "up", width, hidden, true),
                merge: Linear::new(&mut s, "merge", hidden + skip_ch, hidden, true),
                norm: LayerNorm::new(&mut s, "norm", hidden),
            });
            width = hidden;
        }
        let out = Linear::new(scope, "out", width, 1, true);
        Ok(Self { cfg: cfg.clone(), skip_channels: stage_channels.to_vec(), entry, blocks, out })
    }

    /// `fused` is `[B, T', D]`; returns `[B, T' * 2^num_blocks]`.
    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, fused: &Var<T>, skips: &SkipStack<T>) -> Result<Var<T>> {
        let nb = self.cfg.num_blocks;
        if skips.stages.len() != nb {
            return Err(Error::Shape(format!("decoder expects {nb} skip stages, got {}", skips.stages.len())));
        }
        for (i, (s, &c)) in skips.stages.iter().zip(&self.skip_channels).enumerate() {
            if s.shape().len() != 3 || s.dim(2) != c || s.dim(0) != fused.dim(0) {
                return Err(Error::Shape(format!("skip stage {i} has shape {:?}, expected width {c}", s.shape())));
            }
        }
        let g = ctx.g;
        let (b, t0) = (fused.dim(0), fused.dim(1));
        let mut h = self.entry.forward(ctx, fused);
        h = g.concat(&[&h, &align_skip(g, &skips.stages[nb - 1], t0)], 2);
        let mut len = t0;
        for (i, blk) in self.blocks.iter().enumerate() {
            len *= 2;
            let up = blk.up.forward(ctx, &g.mix_rows(&h, Rc::new(RowPlan::repeat(len / 2, 2))));
            let skip = if i + 1 < nb { &skips.stages[nb - 2 - i] } else { &skips.input };
            let cat = g.concat(&[&up, &align_skip(g, skip, len)], 2);
            h = g.relu(&blk.norm.forward(ctx, &blk.merge.forward(ctx, &cat)));
        }
        let y = g.tanh(&self.out.forward(ctx, &h));
        let [lo, hi] = self.cfg.output_clamp;
        let y = g.clamp(&y, T::lit(lo), T::lit(hi));
        Ok(g.reshape(&y, &[b, len]))
    }
}

/// Functional entry point.
pub fn decode<T: Real>(ctx: &Ctx<'_, T>, decoder: &Decoder, fused: &Var<T>, skips: &SkipStack<T>) -> Result<Var<T>> {
    decoder.forward(ctx, fused, skips)
}
