//! `avse` command-line workflow.
//!
//! Exit codes: 0 success, 1 operational failure, 2 usage error.

pub mod config;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use avse_core::gradcheck::GradCheckOptions;
use avse_core::history::{export_history, render_chart, TrainHistory};
use avse_core::media_io::{load_wav, save_wav, FPS};
use avse_core::metrics::{evaluate_batch, ClipPair, EvalOptions, PesqCommand};
use avse_core::model::{count_params, Preset, REPORTED_PARAMS};
use avse_core::scene_data::{load_scene, write_synthetic_dataset, DatasetManifest, LoadOptions, Split};
use avse_core::trainer::{grad_check, load_model, ManifestScenes, OptimizerKind, Trainer};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "avse", version, about = "Audio-visual speech enhancement: data synthesis, training, inference and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic scene dataset with a manifest.
    SynthData(SynthArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Enhance one scene with a trained checkpoint.
    Enhance(EnhanceArgs),
    /// Score estimated WAVs against references (per-clip and mean CSV).
    Evaluate(EvalArgs),
    /// Compare analytic and finite-difference gradients on the tiny model.
    GradCheck(GradArgs),
    /// Render the epoch chart from a history CSV.
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of scenes.
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    /// Dataset seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Scene geometry preset (full, toy, tiny, overfit).
    #[arg(long, default_value = config::DEFAULT_PRESET)]
    pub preset: String,
    /// JSON run config; its `synth` section overrides the preset.
    #[arg(long, default_value = "none")]
    pub config: String,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum OptimizerArg {
    SgdMomentum,
    AdaptiveMoment,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// JSON run config (sections: model, train, synth).
    #[arg(long, default_value = "none")]
    pub config: String,
    /// Dataset directory containing manifest.tsv.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for checkpoints, history CSV and chart.
    #[arg(long)]
    pub out: PathBuf,
    /// Size preset; overrides the config file's `preset`.
    #[arg(long, default_value = "from config, else toy")]
    pub preset: String,
    /// Run seed; derives the model and shuffle seeds.
    #[arg(long, default_value = "from config")]
    pub seed: String,
    /// Number of epochs.
    #[arg(long, default_value = "from config, preset 20")]
    pub epochs: String,
    /// Scenes per step.
    #[arg(long, default_value = "from config, preset 4")]
    pub batch_size: String,
    /// Step size.
    #[arg(long, default_value = "from config, preset 1e-3")]
    pub learning_rate: String,
    /// Optimizer.
    #[arg(long, value_enum)]
    pub optimizer: Option<OptimizerArg>,
    /// Validate every N epochs.
    #[arg(long, default_value = "from config, preset 1")]
    pub validate_every: String,
    /// PESQ command template with {ref} and {est}; falls back to $AUREXA_PESQ_CMD.
    #[arg(long, default_value = "none")]
    pub pesq_cmd: String,
}

#[derive(Args, Debug)]
pub struct EnhanceArgs {
    /// Checkpoint file written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Scene id from the dataset manifest.
    #[arg(long)]
    pub scene: String,
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Output WAV path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Directory of reference WAVs.
    #[arg(long)]
    pub ref_dir: PathBuf,
    /// Directory of estimated WAVs, matched to references by name.
    #[arg(long)]
    pub est_dir: PathBuf,
    /// Output CSV path.
    #[arg(long)]
    pub out: PathBuf,
    /// PESQ command template with {ref} and {est}; falls back to $AUREXA_PESQ_CMD.
    #[arg(long, default_value = "none")]
    pub pesq_cmd: String,
}

#[derive(Args, Debug)]
pub struct GradArgs {
    /// Relative error a probe must stay below.
    #[arg(long, default_value_t = 1e-3)]
    pub tolerance: f64,
    /// Number of parameters probed.
    #[arg(long, default_value_t = 200)]
    pub samples: usize,
    /// Probe and data seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    /// History CSV written by `train`.
    #[arg(long)]
    pub history: PathBuf,
    /// Output image (SVG).
    #[arg(long)]
    pub out: PathBuf,
}

/// Flags whose help shows a descriptive default; these literal strings mean "not given".
fn given(s: &str) -> Option<&str> {
    (!(s == "none" || s.starts_with("from config"))).then_some(s)
}

fn parse_flag<T: std::str::FromStr>(name: &str, s: &str) -> Result<Option<T>> {
    match given(s) {
        None => Ok(None),
        Some(v) => v.parse().map(Some).map_err(|_| anyhow::anyhow!("--{name}: cannot parse '{v}'")),
    }
}

/// Parse and run; returns the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            if e.downcast_ref::<Failed>().is_none() {
                eprintln!("error: {e:#}");
            }
            1
        }
    }
}

/// A run that reported its own failure (e.g. a failed gradient check).
#[derive(Debug)]
struct Failed;

impl std::fmt::Display for Failed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("failed")
    }
}

impl std::error::Error for Failed {}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::SynthData(a) => synth_data(a),
        Command::Train(a) => train(a),
        Command::Enhance(a) => enhance(a),
        Command::Evaluate(a) => evaluate(a),
        Command::GradCheck(a) => grad(a),
        Command::Plot(a) => plot(a),
    }
}

fn synth_data(a: SynthArgs) -> Result<()> {
    let cfg = RunConfig::load(given(&a.config).map(Path::new), Some(&a.preset))?;
    cfg.synth.validate()?;
    let m = write_synthetic_dataset(&a.out, a.count, a.seed, &cfg.synth)?;
    let dev = m.split(Split::Dev).len();
    println!("wrote {} scenes ({} train, {dev} dev) to {}", m.len(), m.len() - dev, a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(given(&a.config).map(Path::new), given(&a.preset))?;
    if let Some(s) = parse_flag::<u64>("seed", &a.seed)? {
        cfg.set_seed(s);
    }
    if let Some(v) = parse_flag("epochs", &a.epochs)? {
        cfg.train.epochs = v;
    }
    if let Some(v) = parse_flag("batch-size", &a.batch_size)? {
        cfg.train.batch_size = v;
    }
    if let Some(v) = parse_flag("learning-rate", &a.learning_rate)? {
        cfg.train.learning_rate = v;
    }
    if let Some(v) = parse_flag("validate-every", &a.validate_every)? {
        cfg.train.validate_every = v;
    }
    if let Some(o) = a.optimizer {
        cfg.train.optimizer = match o {
            OptimizerArg::SgdMomentum => OptimizerKind::SgdMomentum,
            OptimizerArg::AdaptiveMoment => OptimizerKind::AdaptiveMoment,
        };
    }
    if let Some(p) = given(&a.pesq_cmd) {
        cfg.pesq_cmd = Some(p.to_string());
    }
    if cfg.synth.frame_size != cfg.model.frame_size {
        bail!("synth.frame_size ({}) != model.frame_size ({})", cfg.synth.frame_size, cfg.model.frame_size);
    }
    cfg.train.checkpoint_dir = a.out.join("checkpoints");
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    std::fs::write(a.out.join("run_config.json"), serde_json::to_string_pretty(&cfg)?)
        .with_context(|| format!("writing run_config.json in {}", a.out.display()))?;

    let manifest = DatasetManifest::load(&a.data)?;
    let opts = LoadOptions::from(&cfg.synth);
    let train_set = ManifestScenes { manifest: manifest.split(Split::Train), opts };
    let dev_set = ManifestScenes { manifest: manifest.split(Split::Dev), opts };
    if train_set.manifest.is_empty() || dev_set.manifest.is_empty() {
        bail!(
            "{} needs scenes in both splits (train {}, dev {})",
            a.data.display(),
            train_set.manifest.len(),
            dev_set.manifest.len()
        );
    }
    let mut t = Trainer::new(&cfg.model, cfg.train.clone())?;
    t.eval = EvalOptions { pesq: PesqCommand::resolve(cfg.pesq_cmd.as_deref()) };
    let (n, _) = count_params(&t.params);
    eprintln!(
        "preset {}: {n} trainable parameters (full-size reference: {:.1} M); {} train / {} dev scenes",
        cfg.preset,
        REPORTED_PARAMS / 1e6,
        train_set.manifest.len(),
        dev_set.manifest.len()
    );
    let history = t.fit(&train_set, &dev_set, |r| {
        let v = |x: Option<f64>| x.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into());
        eprintln!(
            "epoch {:>3}  train_mse {:.5}  val_si_sdr {}  val_stoi {}  ({:.1}s)",
            r.epoch,
            r.train_mse,
            v(r.val_si_sdr),
            v(r.val_stoi),
            r.wall_seconds
        );
    })?;
    let chart = export_history(&history, a.out.join("history.csv"))?;
    println!("history: {}  chart: {}", a.out.join("history.csv").display(), chart.display());
    Ok(())
}

fn enhance(a: EnhanceArgs) -> Result<()> {
    let (model, params) = load_model(&a.checkpoint)?;
    let manifest = DatasetManifest::load(&a.data)?;
    let mixed = a.data.join(manifest.naming.mixed(&a.scene));
    let natural = if manifest.contains(&a.scene) && mixed.exists() { load_wav(&mixed)?.len() } else { 0 };
    // Keep the clip's own duration, rounded up to what the encoder accepts.
    let f = model.cfg.audio.downsample();
    let samples = natural.div_ceil(f).max(1) * f;
    let per_frame = (avse_core::media_io::SAMPLE_RATE_HZ / FPS) as usize;
    let opts = LoadOptions { samples, frames: samples.div_ceil(per_frame), frame_size: model.cfg.frame_size };
    let scene = load_scene(&manifest, &a.scene, opts)?;
    let mut out = model.enhance(&params, &scene)?;
    out.samples.truncate(natural.max(1));
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    save_wav(&out, &a.out)?;
    println!("wrote {} samples to {}", out.len(), a.out.display());
    Ok(())
}

fn wav_key(path: &Path, strip: &[&str]) -> Option<String> {
    if path.extension().and_then(|e| e.to_str()) != Some("wav") {
        return None;
    }
    let stem = path.file_stem()?.to_str()?;
    Some(strip.iter().find_map(|s| stem.strip_suffix(s)).unwrap_or(stem).to_string())
}

fn list_wavs(dir: &Path, strip: &[&str]) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for e in std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let p = e?.path();
        if let Some(k) = wav_key(&p, strip) {
            out.insert(k, p);
        }
    }
    Ok(out)
}

fn evaluate(a: EvalArgs) -> Result<()> {
    // `<id>_target.wav` references pair with `<id>.wav` or `<id>_enhanced.wav` estimates.
    let same = a.ref_dir.canonicalize().ok() == a.est_dir.canonicalize().ok();
    let refs = list_wavs(&a.ref_dir, if same { &[] } else { &["_target"] })?;
    let ests = list_wavs(&a.est_dir, if same { &[] } else { &["_enhanced", "_target"] })?;
    if refs.is_empty() {
        bail!("no .wav files in {}", a.ref_dir.display());
    }
    let mut pairs = Vec::new();
    let mut missing = Vec::new();
    for (id, rp) in &refs {
        match ests.get(id) {
            Some(ep) => pairs.push(ClipPair {
                id: id.clone(),
                est: load_wav(ep)?,
                reference: load_wav(rp)?,
                paths: Some((rp.clone(), ep.clone())),
            }),
            None => missing.push(id.clone()),
        }
    }
    if pairs.is_empty() {
        bail!("no estimate in {} matches a reference in {}", a.est_dir.display(), a.ref_dir.display());
    }
    let opts = EvalOptions { pesq: PesqCommand::resolve(given(&a.pesq_cmd)) };
    let report = evaluate_batch(&pairs, &opts)?;
    report.write_csv(&a.out)?;
    for id in &missing {
        eprintln!("warning: no estimate for {id}");
    }
    for (id, why) in &report.failures {
        eprintln!("warning: {id} skipped: {why}");
    }
    let pesq = report.pesq.map(|p| format!("{p:.3}")).unwrap_or_else(|| "n/a".into());
    println!(
        "{} clips  PESQ {pesq}  STOI {:.3}  SI-SDR {:.3} dB  MSE {:.6}  -> {}",
        report.clips.len(),
        report.stoi,
        report.si_sdr_db,
        report.mse,
        a.out.display()
    );
    Ok(())
}

fn grad(a: GradArgs) -> Result<()> {
    let p = Preset::Tiny;
    let opts = GradCheckOptions { samples: a.samples, tolerance: a.tolerance, seed: a.seed, ..Default::default() };
    let report = grad_check(&p.model(), &p.synth(), &opts)?;
    print!("{}", report.summary());
    if report.passed() {
        Ok(())
    } else {
        Err(Failed.into())
    }
}

fn plot(a: PlotArgs) -> Result<()> {
    if a.out.extension().and_then(|e| e.to_str()) != Some("svg") {
        bail!("{}: charts are written as SVG; use a .svg path", a.out.display());
    }
    let h = TrainHistory::read_csv(&a.history)?;
    render_chart(&h, &a.out)?;
    println!("wrote {} ({} epochs)", a.out.display(), h.records.len());
    Ok(())
}
