//! The composed enhancement network and its size presets.
//!
//! `enhance = decode(temporal(fuse(encode_audio, encode_video)), skips)`.

use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio_encoder::{AudioEncoder, AudioEncoderConfig};
use crate::autograd::{Graph, Var};
use crate::decoder::{Decoder, DecoderConfig};
use crate::error::{Error, Result};
use crate::fusion::{Fusion, FusionConfig};
use crate::media_io::{AudioClip, VideoClip, FRAME_SIZE};
use crate::nn::{Ctx, ParamStore, Scope};
use crate::scene_data::{Scene, SynthConfig};
use crate::temporal::{SqueezeMode, SqueezeformerConfig, TemporalModel};
use crate::tensor::{Real, Tensor};
use crate::video_encoder::{SwinConfig, VideoEncoder};

/// Quoted trainable parameter count of the full-size reference configuration.
pub const REPORTED_PARAMS: f64 = 54.2e6;

/// Top-level parameter groups, one per model stage.
pub const MODULE_GROUPS: [&str; 5] = ["audio", "video", "fusion", "temporal", "decoder"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub audio: AudioEncoderConfig,
    pub video: SwinConfig,
    pub fusion: FusionConfig,
    pub temporal: SqueezeformerConfig,
    pub decoder: DecoderConfig,
    pub seed: u64,
    /// Square frame side the video encoder is built for.
    pub frame_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Preset::Full.model()
    }
}

impl ModelConfig {
    /// Cross-stage compatibility; errors name both mismatched sizes.
    pub fn validate(&self) -> Result<()> {
        self.audio.validate()?;
        self.video.validate_for(self.frame_size)?;
        self.fusion.validate()?;
        self.temporal.validate()?;
        self.decoder.validate()?;
        let mismatch = |what: &str, a: usize, b: usize| {
            Err(Error::Config(format!("{what}: {a} != {b}")))
        };
        if self.audio.latent_dim != self.fusion.d_model {
            return mismatch("audio.latent_dim vs fusion.d_model", self.audio.latent_dim, self.fusion.d_model);
        }
        if self.fusion.d_model != self.temporal.d_model {
            return mismatch("fusion.d_model vs temporal.d_model", self.fusion.d_model, self.temporal.d_model);
        }
        if self.decoder.num_blocks != self.audio.num_blocks {
            return mismatch("decoder.num_blocks vs audio.num_blocks", self.decoder.num_blocks, self.audio.num_blocks);
        }
        Ok(())
    }
}

/// Named configurations. `Full` uses the full-size widths; the others are
/// scaled down for CPU runs and tests.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Preset {
    Full,
    /// Full-length clips, narrow layers: end-to-end shape runs in seconds.
    Toy,
    /// Finite-difference sized: 64 samples, 4 frames of 16x16.
    Tiny,
    /// Short clips for the memorization run.
    Overfit,
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Preset::Full),
            "toy" => Ok(Preset::Toy),
            "tiny" => Ok(Preset::Tiny),
            "overfit" => Ok(Preset::Overfit),
            _ => Err(Error::Argument(format!("unknown preset '{s}' (full, toy, tiny, overfit)"))),
        }
    }
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Full, Preset::Toy, Preset::Tiny, Preset::Overfit];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Full => "full",
            Preset::Toy => "toy",
            Preset::Tiny => "tiny",
            Preset::Overfit => "overfit",
        }
    }

    pub fn model(self) -> ModelConfig {
        let small = |channels: Vec<usize>, d: usize, swin: SwinConfig, frame_size: usize| {
            let audio = AudioEncoderConfig { stage_channels: channels, latent_dim: d, ..Default::default() };
            ModelConfig {
                decoder: DecoderConfig::mirror(&audio),
                audio,
                video: swin,
                fusion: FusionConfig { d_model: d, heads: 2, iterations: 1, ..Default::default() },
                temporal: SqueezeformerConfig { num_blocks: 1, d_model: d, heads: 2, ..Default::default() },
                seed: 0,
                frame_size,
            }
        };
        match self {
            Preset::Full => {
                let audio = AudioEncoderConfig::default();
                ModelConfig {
                    decoder: DecoderConfig::mirror(&audio),
                    audio,
                    // 512-wide frame embedding; the remaining widths are the module defaults.
                    video: SwinConfig { out_dim: 512, ..Default::default() },
                    fusion: FusionConfig::default(),
                    temporal: SqueezeformerConfig::default(),
                    seed: 0,
                    frame_size: FRAME_SIZE,
                }
            }
            Preset::Toy => small(
                vec![8, 16, 16, 32],
                32,
                SwinConfig { embed_dim: 16, depths: vec![2, 1], heads: vec![1, 2], out_dim: 32, cpb_hidden: 16, mlp_ratio: 2, ..Default::default() },
                FRAME_SIZE,
            ),
            Preset::Tiny => {
                let mut c = small(
                    vec![3, 4, 4, 5],
                    6,
                    SwinConfig {
                        patch_size: 4,
                        embed_dim: 4,
                        depths: vec![2, 1],
                        heads: vec![1, 2],
                        window: 2,
                        out_dim: 5,
                        cpb_hidden: 4,
                        mlp_ratio: 2,
                        ..Default::default()
                    },
                    16,
                );
                c.temporal.conv_kernel = 3;
                c.temporal.ff_expansion = 2;
                c.temporal.squeeze_mode = SqueezeMode::StridedConv;
                c
            }
            Preset::Overfit => small(
                vec![8, 16, 16, 32],
                32,
                SwinConfig { embed_dim: 16, depths: vec![2, 1], heads: vec![1, 2], window: 4, out_dim: 32, cpb_hidden: 16, mlp_ratio: 2, ..Default::default() },
                32,
            ),
        }
    }

    /// Scene geometry matching the preset.
    pub fn synth(self) -> SynthConfig {
        match self {
            Preset::Full | Preset::Toy => SynthConfig::default(),
            Preset::Tiny => SynthConfig { samples: 64, frames: 4, frame_size: 16, ..Default::default() },
            Preset::Overfit => SynthConfig { samples: 9600, frames: 15, frame_size: 32, ..Default::default() },
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub audio: AudioEncoder,
    pub video: VideoEncoder,
    pub fusion: Fusion,
    pub temporal: TemporalModel,
    pub decoder: Decoder,
}

/// Build the network and its freshly initialised parameters from `cfg.seed`.
pub fn build_model<T: Real>(cfg: &ModelConfig) -> Result<(Model, ParamStore<T>)> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut root = Scope::new(&mut store, &mut rng, "");
    let audio = AudioEncoder::new(&mut root.sub("audio"), &cfg.audio)?;
    let video = VideoEncoder::new(&mut root.sub("video"), &cfg.video, cfg.frame_size)?;
    let fusion = Fusion::new(&mut root.sub("fusion"), &cfg.fusion, cfg.video.out_dim)?;
    let temporal = TemporalModel::new(&mut root.sub("temporal"), &cfg.temporal)?;
    let decoder = Decoder::new(&mut root.sub("decoder"), &cfg.decoder, &cfg.audio.stage_channels, cfg.temporal.d_model)?;
    Ok((Model { cfg: cfg.clone(), audio, video, fusion, temporal, decoder }, store))
}

/// Trainable scalars, in total and per stage.
pub fn count_params<T: Real>(params: &ParamStore<T>) -> (usize, Vec<(&'static str, usize)>) {
    let per = MODULE_GROUPS.iter().map(|&g| (g, params.count_with_prefix(&format!("{g}.")))).collect();
    (params.count_trainable(), per)
}

impl Model {
    /// `mixture` is `[B, T]`, `video` is `[B, F, H, W, 3]`; returns `[B, T]`.
    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, mixture: &Var<T>, video: &Tensor<T>) -> Result<Var<T>> {
        let (lat, skips) = self.audio.forward(ctx, mixture)?;
        let vis = self.video.forward(ctx, video)?;
        let fused = self.fusion.forward(ctx, &lat, &vis)?;
        let seq = self.temporal.forward(ctx, &fused)?;
        self.decoder.forward(ctx, &seq, &skips)
    }

    fn check_scene(&self, mixture: &AudioClip, video: &VideoClip) -> Result<()> {
        let s = self.cfg.frame_size;
        if video.height != s || video.width != s {
            return Err(Error::Shape(format!(
                "model expects {s}x{s} frames, scene has {}x{}",
                video.height, video.width
            )));
        }
        let f = self.cfg.audio.downsample();
        if mixture.len() % f != 0 || mixture.is_empty() {
            return Err(Error::Shape(format!("mixture length {} is not a multiple of {f}", mixture.len())));
        }
        Ok(())
    }

    /// Inference-mode forward on raw mixture and frames.
    pub fn enhance_clip<T: Real>(&self, params: &ParamStore<T>, mixture: &AudioClip, video: &VideoClip) -> Result<AudioClip> {
        self.check_scene(mixture, video)?;
        let g = Graph::inference();
        let ctx = Ctx::new(&g, params, false);
        let wave: Vec<T> = mixture.samples.iter().map(|&v| T::lit(v as f64)).collect();
        let frames: Vec<T> = video.frames.iter().map(|&v| T::lit(v as f64)).collect();
        let x = ctx.constant(Tensor::from_vec(&[1, mixture.len()], wave));
        let v = Tensor::from_vec(&[1, video.num_frames, video.height, video.width, 3], frames);
        let y = self.forward(&ctx, &x, &v)?;
        let samples = y.value().data().iter().map(|v| v.as_f64() as f32).collect();
        Ok(AudioClip { samples, sample_rate_hz: mixture.sample_rate_hz })
    }

    pub fn enhance<T: Real>(&self, params: &ParamStore<T>, scene: &Scene) -> Result<AudioClip> {
        self.enhance_clip(params, &scene.mixture, &scene.video)
    }
}

/// Deterministic inference on one scene.
pub fn enhance<T: Real>(model: &Model, params: &ParamStore<T>, scene: &Scene) -> Result<AudioClip> {
    model.enhance(params, scene)
}
