//! Scenes: SNR-controlled mixing, the procedural scene generator and the
//! manifest-driven loader.
//!
//! A generated scene has a harmonic "voice" target whose amplitude envelope
//! also drives the vertical position of a bright blob in the video, so the
//! visual stream carries information about the target.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::media_io::{
    self, clip_or_pad_audio, clip_or_pad_video, load_frame_dir, load_frame_tensor, load_wav, resize_frames,
    save_frame_tensor, save_wav, AudioClip, VideoClip, PEAK_TARGET, SAMPLE_RATE_HZ,
};

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const MAX_INTERFERERS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: String,
    pub target: AudioClip,
    pub interferers: Vec<AudioClip>,
    pub mixture: AudioClip,
    pub video: VideoClip,
    pub snr_db: f64,
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MixOptions {
    /// Measure powers after a 300-5000 Hz band-pass instead of broadband.
    pub bandpass: bool,
}

fn mean_power(x: &[f32]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / x.len() as f64
}

/// RBJ biquad, direct form I.
#[derive(Clone, Copy)]
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
}

impl Biquad {
    fn butterworth(kind: char, cutoff_hz: f64, fs: f64) -> Self {
        let w0 = 2.0 * std::f64::consts::PI * cutoff_hz / fs;
        let (sin, cos) = w0.sin_cos();
        let alpha = sin / (2.0 * std::f64::consts::FRAC_1_SQRT_2);
        let a0 = 1.0 + alpha;
        let (b0, b1, b2) = if kind == 'l' {
            ((1.0 - cos) / 2.0, 1.0 - cos, (1.0 - cos) / 2.0)
        } else {
            ((1.0 + cos) / 2.0, -(1.0 + cos), (1.0 + cos) / 2.0)
        };
        Self { b: [b0 / a0, b1 / a0, b2 / a0], a: [-2.0 * cos / a0, (1.0 - alpha) / a0] }
    }

    fn run(&self, x: &[f64]) -> Vec<f64> {
        let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
        x.iter()
            .map(|&x0| {
                let y0 = self.b[0] * x0 + self.b[1] * x1 + self.b[2] * x2 - self.a[0] * y1 - self.a[1] * y2;
                x2 = x1;
                x1 = x0;
                y2 = y1;
                y1 = y0;
                y0
            })
            .collect()
    }
}

/// Power used for SNR bookkeeping, optionally after the speech-band filter.
pub fn measured_power(x: &[f32], opts: MixOptions) -> f64 {
    if !opts.bandpass {
        return mean_power(x);
    }
    let fs = SAMPLE_RATE_HZ as f64;
    let xs: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    let hp = Biquad::butterworth('h', 300.0, fs).run(&xs);
    let bp = Biquad::butterworth('l', 5000.0, fs).run(&hp);
    bp.iter().map(|v| v * v).sum::<f64>() / bp.len().max(1) as f64
}

fn sum_clips(clips: &[AudioClip], len: usize) -> Vec<f32> {
    let mut n = vec![0.0f32; len];
    for c in clips {
        for (a, &b) in n.iter_mut().zip(&c.samples) {
            *a += b;
        }
    }
    n
}

/// Gain applied to the interferer sum so that target-to-interferer power is `snr_db`.
pub fn mix_gain(target: &AudioClip, interferers: &[AudioClip], snr_db: f64, opts: MixOptions) -> Result<f64> {
    for c in interferers {
        if c.len() != target.len() {
            return Err(Error::Argument(format!(
                "interferer has {} samples, target has {}",
                c.len(),
                target.len()
            )));
        }
    }
    if interferers.is_empty() {
        return Ok(0.0);
    }
    let p_t = measured_power(&target.samples, opts);
    if p_t <= 0.0 {
        return Err(Error::Degenerate("target has zero energy; SNR is undefined".into()));
    }
    let n = sum_clips(interferers, target.len());
    let p_n = measured_power(&n, opts);
    if p_n <= 0.0 {
        return Err(Error::Degenerate("interferers have zero energy; SNR is undefined".into()));
    }
    Ok((p_t / (p_n * 10f64.powf(snr_db / 10.0))).sqrt())
}

/// `target + g * sum(interferers)` with `g` chosen to hit `snr_db`.
pub fn mix_scene(target: &AudioClip, interferers: &[AudioClip], snr_db: f64) -> Result<AudioClip> {
    mix_scene_with(target, interferers, snr_db, MixOptions::default())
}

pub fn mix_scene_with(
    target: &AudioClip,
    interferers: &[AudioClip],
    snr_db: f64,
    opts: MixOptions,
) -> Result<AudioClip> {
    let g = mix_gain(target, interferers, snr_db, opts)?;
    if interferers.is_empty() {
        return Ok(target.clone());
    }
    let n = sum_clips(interferers, target.len());
    let samples = target
        .samples
        .iter()
        .zip(&n)
        .map(|(&t, &nv)| (t as f64 + g * nv as f64) as f32)
        .collect();
    Ok(AudioClip { samples, sample_rate_hz: target.sample_rate_hz })
}

/// Broadband target-to-residual ratio in dB, with the residual `mixture - target`.
pub fn achieved_snr_db(target: &AudioClip, mixture: &AudioClip) -> f64 {
    let resid: Vec<f64> = mixture.samples.iter().zip(&target.samples).map(|(&m, &t)| m as f64 - t as f64).collect();
    let p_t = mean_power(&target.samples);
    let p_n = resid.iter().map(|v| v * v).sum::<f64>() / resid.len().max(1) as f64;
    10.0 * (p_t / p_n).log10()
}

// ---------------------------------------------------------------------------
// Procedural scenes

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub samples: usize,
    pub frames: usize,
    pub frame_size: usize,
    pub min_interferers: usize,
    pub max_interferers: usize,
    pub snr_min_db: f64,
    pub snr_max_db: f64,
    pub f0_min_hz: f64,
    pub f0_max_hz: f64,
    pub harmonics: usize,
    pub bandpass_snr: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            samples: media_io::CLIP_SAMPLES,
            frames: media_io::CLIP_FRAMES,
            frame_size: media_io::FRAME_SIZE,
            min_interferers: 1,
            max_interferers: MAX_INTERFERERS,
            snr_min_db: -10.0,
            snr_max_db: 10.0,
            f0_min_hz: 90.0,
            f0_max_hz: 250.0,
            harmonics: 4,
            bandpass_snr: false,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 || self.frames == 0 {
            return Err(Error::Config("synthetic clips need samples > 0 and frames > 0".into()));
        }
        if self.samples % self.frames != 0 {
            return Err(Error::Config(format!(
                "samples ({}) must be a whole number of frames ({})",
                self.samples, self.frames
            )));
        }
        if self.max_interferers > MAX_INTERFERERS || self.min_interferers > self.max_interferers {
            return Err(Error::Config("interferer count range must lie within 0..=3".into()));
        }
        if self.snr_min_db > self.snr_max_db || self.f0_min_hz <= 0.0 || self.f0_min_hz > self.f0_max_hz {
            return Err(Error::Config("empty SNR or f0 range".into()));
        }
        if self.frame_size < 8 {
            return Err(Error::Config("frame_size must be at least 8".into()));
        }
        Ok(())
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum InterfererKind {
    White,
    Pink,
    DetunedHarmonic,
}

const CONTROL_HOP: usize = 160;

fn smoothed_walk(rng: &mut ChaCha8Rng, n: usize, step: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, step).unwrap();
    let mut r = 0.0;
    let raw: Vec<f64> = (0..n)
        .map(|_| {
            r += normal.sample(rng);
            r *= 0.97;
            r
        })
        .collect();
    let k = 3isize;
    (0..n as isize)
        .map(|i| {
            let lo = (i - k).max(0) as usize;
            let hi = ((i + k) as usize).min(n - 1);
            raw[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect()
}

fn control_to_samples(ctrl: &[f64], len: usize) -> Vec<f64> {
    (0..len)
        .map(|i| {
            let pos = i as f64 / CONTROL_HOP as f64;
            let lo = (pos.floor() as usize).min(ctrl.len() - 1);
            let hi = (lo + 1).min(ctrl.len() - 1);
            let f = pos - lo as f64;
            ctrl[lo] * (1.0 - f) + ctrl[hi] * f
        })
        .collect()
}

/// Harmonic stack with a drifting f0 and a smoothed random-walk envelope, peak-normalized.
fn harmonic_stack(rng: &mut ChaCha8Rng, len: usize, f0_range: (f64, f64), harmonics: usize) -> Vec<f32> {
    let n_ctrl = len / CONTROL_HOP + 2;
    let (lo, hi) = f0_range;
    let mut log_f0 = rng.random_range(lo.ln()..=hi.ln());
    let drift = Normal::new(0.0, 0.015).unwrap();
    let f0_ctrl: Vec<f64> = (0..n_ctrl)
        .map(|_| {
            log_f0 += drift.sample(rng);
            if log_f0 < lo.ln() {
                log_f0 = 2.0 * lo.ln() - log_f0;
            }
            if log_f0 > hi.ln() {
                log_f0 = 2.0 * hi.ln() - log_f0;
            }
            log_f0.exp().clamp(lo, hi)
        })
        .collect();
    let walk = smoothed_walk(rng, n_ctrl, 0.45);
    let env_ctrl: Vec<f64> = walk.iter().map(|&w| 0.05 + 0.95 / (1.0 + (-2.5 * w).exp())).collect();
    let f0 = control_to_samples(&f0_ctrl, len);
    let env = control_to_samples(&env_ctrl, len);
    let amps: Vec<f64> = (1..=harmonics).map(|h| rng.random_range(0.6..=1.0) / h as f64).collect();
    let phases: Vec<f64> = (0..harmonics).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
    let mut phase = 0.0f64;
    let fs = SAMPLE_RATE_HZ as f64;
    let raw: Vec<f32> = (0..len)
        .map(|i| {
            phase += std::f64::consts::TAU * f0[i] / fs;
            let s: f64 = (0..harmonics).map(|h| amps[h] * ((h + 1) as f64 * phase + phases[h]).sin()).sum();
            (env[i] * s) as f32
        })
        .collect();
    media_io::peak_normalize(&AudioClip::new(raw)).samples
}

fn white_noise(rng: &mut ChaCha8Rng, len: usize) -> Vec<f32> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    (0..len).map(|_| normal.sample(rng) as f32).collect()
}

/// Paul Kellet's refined pink-noise filter applied to white noise.
fn pink_noise(rng: &mut ChaCha8Rng, len: usize) -> Vec<f32> {
    let white = white_noise(rng, len);
    let mut b = [0.0f64; 7];
    white
        .iter()
        .map(|&w| {
            let w = w as f64;
            b[0] = 0.99886 * b[0] + w * 0.0555179;
            b[1] = 0.99332 * b[1] + w * 0.0750759;
            b[2] = 0.96900 * b[2] + w * 0.1538520;
            b[3] = 0.86650 * b[3] + w * 0.3104856;
            b[4] = 0.55000 * b[4] + w * 0.5329522;
            b[5] = -0.7616 * b[5] - w * 0.0168980;
            let out = b[0] + b[1] + b[2] + b[3] + b[4] + b[5] + b[6] + w * 0.5362;
            b[6] = w * 0.115926;
            (out * 0.11) as f32
        })
        .collect()
}

/// RMS of the target over each video frame's span of samples.
pub fn frame_envelope(target: &[f32], frames: usize) -> Vec<f64> {
    let spf = target.len() / frames.max(1);
    (0..frames)
        .map(|t| {
            let seg = &target[t * spf..((t + 1) * spf).min(target.len())];
            mean_power(seg).sqrt()
        })
        .collect()
}

/// Row of the blob center in frame `t` given the frame envelope.
pub fn blob_rows(envelope: &[f64], frame_size: usize) -> Vec<f64> {
    let max = envelope.iter().copied().fold(0.0, f64::max);
    let h = frame_size as f64;
    envelope
        .iter()
        .map(|&e| {
            let norm = if max > 0.0 { e / max } else { 0.0 };
            h * (0.75 - 0.5 * norm)
        })
        .collect()
}

const BLOB_BACKGROUND: f32 = 0.1;
const BLOB_PEAK: f32 = 0.8;

fn render_blob_video(rows: &[f64], frame_size: usize) -> VideoClip {
    let s = frame_size;
    let sigma = s as f64 / 14.0;
    let col = (s as f64 - 1.0) / 2.0;
    let tint = [1.0f32, 0.8, 0.7];
    let mut frames = Vec::with_capacity(rows.len() * s * s * 3);
    for &row in rows {
        let cy = row - 0.5;
        for y in 0..s {
            for x in 0..s {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - col).powi(2);
                let v = (-d2 / (2.0 * sigma * sigma)).exp() as f32;
                for c in tint {
                    frames.push((BLOB_BACKGROUND + BLOB_PEAK * v * c).clamp(0.0, 1.0));
                }
            }
        }
    }
    VideoClip::new(frames, rows.len(), s, s)
}

/// Deterministic procedural scene.
pub fn synth_scene(seed: u64, cfg: &SynthConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = cfg.samples;
    let target = harmonic_stack(&mut rng, len, (cfg.f0_min_hz, cfg.f0_max_hz), cfg.harmonics);
    let count = rng.random_range(cfg.min_interferers..=cfg.max_interferers);
    let mut interferers = Vec::with_capacity(count);
    for _ in 0..count {
        let kind = match rng.random_range(0..3) {
            0 => InterfererKind::White,
            1 => InterfererKind::Pink,
            _ => InterfererKind::DetunedHarmonic,
        };
        let samples = match kind {
            InterfererKind::White => white_noise(&mut rng, len),
            InterfererKind::Pink => pink_noise(&mut rng, len),
            InterfererKind::DetunedHarmonic => {
                let detune = rng.random_range(1.15..=1.6);
                harmonic_stack(&mut rng, len, (cfg.f0_min_hz * detune, cfg.f0_max_hz * detune), cfg.harmonics)
            }
        };
        interferers.push(AudioClip::new(samples));
    }
    let snr_db = if cfg.snr_min_db == cfg.snr_max_db {
        cfg.snr_min_db
    } else {
        rng.random_range(cfg.snr_min_db..=cfg.snr_max_db)
    };
    let opts = MixOptions { bandpass: cfg.bandpass_snr };
    let target = AudioClip::new(target);
    let mixture = mix_scene_with(&target, &interferers, snr_db, opts)?;

    // Keep the mixture inside the WAV range; one shared factor preserves the SNR.
    let peak = mixture.peak();
    let (target, interferers, mixture) = if peak > PEAK_TARGET {
        let c = PEAK_TARGET / peak;
        let scale = |a: &AudioClip| AudioClip::new(a.samples.iter().map(|&v| v * c).collect());
        (scale(&target), interferers.iter().map(scale).collect(), scale(&mixture))
    } else {
        (target, interferers, mixture)
    };

    let envelope = frame_envelope(&target.samples, cfg.frames);
    let video = render_blob_video(&blob_rows(&envelope, cfg.frame_size), cfg.frame_size);
    Ok(Scene { id: format!("scene_{seed:06}"), target, interferers, mixture, video, snr_db })
}

// ---------------------------------------------------------------------------
// On-disk datasets

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Argument(format!("unknown split tag {other:?}"))),
        }
    }
}

/// File naming templates; `{id}` is replaced by the scene id and `{k}` by the interferer index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NamingPattern {
    pub mixed: String,
    pub target: String,
    pub interferer: String,
    pub frames_dir: String,
    pub frames_tensor: String,
}

impl Default for NamingPattern {
    fn default() -> Self {
        Self {
            mixed: "{id}_mixed.wav".into(),
            target: "{id}_target.wav".into(),
            interferer: "{id}_interferer{k}.wav".into(),
            frames_dir: "{id}_frames".into(),
            frames_tensor: "{id}_frames.bin".into(),
        }
    }
}

impl NamingPattern {
    fn fill(template: &str, id: &str) -> String {
        template.replace("{id}", id)
    }

    pub fn mixed(&self, id: &str) -> String {
        Self::fill(&self.mixed, id)
    }

    pub fn target(&self, id: &str) -> String {
        Self::fill(&self.target, id)
    }

    pub fn interferer(&self, id: &str, k: usize) -> String {
        Self::fill(&self.interferer, id).replace("{k}", &k.to_string())
    }

    pub fn frames_dir(&self, id: &str) -> String {
        Self::fill(&self.frames_dir, id)
    }

    pub fn frames_tensor(&self, id: &str) -> String {
        Self::fill(&self.frames_tensor, id)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    /// Sorted by id, unique.
    pub entries: Vec<ManifestEntry>,
    pub naming: NamingPattern,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, mut entries: Vec<ManifestEntry>) -> Result<Self> {
        entries.sort_by(|a, b| a.id.cmp(&b.id));
        let mut seen = HashSet::new();
        for e in &entries {
            if e.id.is_empty() || e.id.contains(['\t', '\n']) {
                return Err(Error::Argument(format!("invalid scene id {:?}", e.id)));
            }
            if !seen.insert(e.id.clone()) {
                return Err(Error::Argument(format!("duplicate scene id {}", e.id)));
            }
        }
        Ok(Self { root: root.into(), entries, naming: NamingPattern::default() })
    }

    pub fn with_naming(mut self, naming: NamingPattern) -> Self {
        self.naming = naming;
        self
    }

    /// Read `<root>/manifest.tsv` (`<id>\t<split>` per line).
    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::NotFound(path.display().to_string())
            } else {
                Error::io(&path, e)
            }
        })?;
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (id, split) = line
                .split_once('\t')
                .ok_or_else(|| Error::format(&path, format!("line {}: expected <id>\\t<split>", n + 1)))?;
            entries.push(ManifestEntry { id: id.to_string(), split: split.trim().parse()? });
        }
        Self::new(root, entries)
    }

    pub fn save(&self) -> Result<()> {
        let path = self.root.join(MANIFEST_FILE);
        let mut text = String::new();
        for e in &self.entries {
            text.push_str(&format!("{}\t{}\n", e.id, e.split.as_str()));
        }
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Entries of one split, same root and naming.
    pub fn split(&self, split: Split) -> Self {
        Self {
            root: self.root.clone(),
            entries: self.entries.iter().filter(|e| e.split == split).cloned().collect(),
            naming: self.naming.clone(),
        }
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entries.iter().any(|e| e.id == id)
    }

    pub fn ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.id.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Target clip length and frame geometry applied when loading.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct LoadOptions {
    pub samples: usize,
    pub frames: usize,
    pub frame_size: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self { samples: media_io::CLIP_SAMPLES, frames: media_io::CLIP_FRAMES, frame_size: media_io::FRAME_SIZE }
    }
}

impl From<&SynthConfig> for LoadOptions {
    fn from(c: &SynthConfig) -> Self {
        Self { samples: c.samples, frames: c.frames, frame_size: c.frame_size }
    }
}

/// Write a scene's media files under `root` using `naming`.
pub fn write_scene(scene: &Scene, root: impl AsRef<Path>, naming: &NamingPattern) -> Result<()> {
    let root = root.as_ref();
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    save_wav(&scene.mixture, root.join(naming.mixed(&scene.id)))?;
    save_wav(&scene.target, root.join(naming.target(&scene.id)))?;
    for (k, c) in scene.interferers.iter().enumerate() {
        save_wav(c, root.join(naming.interferer(&scene.id, k)))?;
    }
    save_frame_tensor(&scene.video, root.join(naming.frames_tensor(&scene.id)))
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::NotFound(path.display().to_string()))
    }
}

pub fn load_scene(manifest: &DatasetManifest, id: &str, opts: LoadOptions) -> Result<Scene> {
    if !manifest.contains(id) {
        return Err(Error::NotFound(format!("scene {id} is not listed in {}", manifest.root.display())));
    }
    let root = &manifest.root;
    let naming = &manifest.naming;
    let mixture = clip_or_pad_audio(&load_wav(require(root.join(naming.mixed(id)))?)?, opts.samples);
    let target = clip_or_pad_audio(&load_wav(require(root.join(naming.target(id)))?)?, opts.samples);
    let mut interferers = Vec::new();
    for k in 0..MAX_INTERFERERS {
        let p = root.join(naming.interferer(id, k));
        if !p.exists() {
            break;
        }
        interferers.push(clip_or_pad_audio(&load_wav(p)?, opts.samples));
    }
    let tensor_path = root.join(naming.frames_tensor(id));
    let raw_video = if tensor_path.exists() {
        load_frame_tensor(&tensor_path)?
    } else {
        load_frame_dir(require(root.join(naming.frames_dir(id)))?)?
    };
    let mut video = clip_or_pad_video(&raw_video, opts.frames)?;
    if video.height != opts.frame_size || video.width != opts.frame_size {
        video = resize_frames(&video, opts.frame_size)?;
    } else {
        video.frames.iter_mut().for_each(|p| *p = p.clamp(0.0, 1.0));
    }
    let snr_db = achieved_snr_db(&target, &mixture);
    Ok(Scene { id: id.to_string(), target, interferers, mixture, video, snr_db })
}

/// Seed-deterministic permutation of `0..n`.
pub fn epoch_order(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

/// One epoch over a manifest in batches; the last batch may be short.
pub struct SceneBatches<'a> {
    manifest: &'a DatasetManifest,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
    opts: LoadOptions,
}

impl Iterator for SceneBatches<'_> {
    type Item = Result<Vec<Scene>>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.order[self.pos..end]
            .iter()
            .map(|&i| load_scene(self.manifest, &self.manifest.entries[i].id, self.opts))
            .collect();
        self.pos = end;
        Some(batch)
    }
}

pub fn iterate(
    manifest: &DatasetManifest,
    batch_size: usize,
    seed: u64,
    opts: LoadOptions,
) -> Result<SceneBatches<'_>> {
    if manifest.is_empty() {
        return Err(Error::Argument("manifest has no scenes".into()));
    }
    if batch_size == 0 {
        return Err(Error::Argument("batch size must be at least 1".into()));
    }
    Ok(SceneBatches { manifest, order: epoch_order(manifest.len(), seed), batch_size, pos: 0, opts })
}

/// Generate `count` scenes with ids `scene_000000..` and write them plus a manifest.
/// Roughly one scene in ten goes to the dev split (at least one when `count >= 2`).
pub fn write_synthetic_dataset(root: impl AsRef<Path>, count: usize, seed: u64, cfg: &SynthConfig) -> Result<DatasetManifest> {
    let root = root.as_ref();
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let dev_every = 10usize;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let mut scene = synth_scene(seed.wrapping_mul(1_000_003).wrapping_add(i as u64), cfg)?;
        scene.id = format!("scene_{i:06}");
        let split = if count >= 2 && (i % dev_every == dev_every - 1 || (count < dev_every && i == count - 1)) {
            Split::Dev
        } else {
            Split::Train
        };
        write_scene(&scene, root, &NamingPattern::default())?;
        entries.push(ManifestEntry { id: scene.id.clone(), split });
    }
    let manifest = DatasetManifest::new(root, entries)?;
    manifest.save()?;
    Ok(manifest)
}
