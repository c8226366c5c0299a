//! Optimization loop, validation, checkpointing and gradient verification.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::checkpoint::{restore_params, Checkpoint, NamedTensor, OptimizerSlot, OptimizerState, RngState};
use crate::error::{Error, Result};
use crate::gradcheck::{check_gradients, GradCheckOptions, GradCheckReport};
use crate::history::{EpochRecord, TrainHistory};
use crate::metrics::{evaluate_batch, ClipPair, EvalOptions, MetricsReport};
use crate::model::{build_model, Model, ModelConfig};
use crate::nn::{apply_bn_updates, Ctx, ParamId, ParamStore};
use crate::scene_data::{epoch_order, load_scene, synth_scene, DatasetManifest, LoadOptions, Scene, SynthConfig};
use crate::tensor::{Real, Tensor};

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    SgdMomentum,
    AdaptiveMoment,
}

impl OptimizerKind {
    fn tag(self) -> u8 {
        match self {
            OptimizerKind::SgdMomentum => 0,
            OptimizerKind::AdaptiveMoment => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Global L2 norm the gradient is rescaled to when exceeded; 0 disables clipping.
    pub grad_clip_norm: f64,
    pub checkpoint_dir: PathBuf,
    /// Validate on the dev set every this many epochs (and after the last one).
    pub validate_every: usize,
    /// Seeds the epoch shuffles.
    pub seed: u64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub bn_momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 4,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::AdaptiveMoment,
            grad_clip_norm: 5.0,
            checkpoint_dir: PathBuf::from("checkpoints"),
            validate_every: 1,
            seed: 0,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            bn_momentum: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.validate_every == 0 {
            return Err(Error::Config("batch_size and validate_every must be at least 1".into()));
        }
        if self.grad_clip_norm < 0.0 {
            return Err(Error::Config("grad_clip_norm must be non-negative".into()));
        }
        Ok(())
    }
}

/// Scenes addressable by index, in memory or behind a manifest.
pub trait SceneSet {
    fn len(&self) -> usize;
    fn get(&self, i: usize) -> Result<Scene>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SceneSet for [Scene] {
    fn len(&self) -> usize {
        <[Scene]>::len(self)
    }
    fn get(&self, i: usize) -> Result<Scene> {
        Ok(self[i].clone())
    }
}

impl SceneSet for Vec<Scene> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }
    fn get(&self, i: usize) -> Result<Scene> {
        Ok(self[i].clone())
    }
}

/// Lazily loaded manifest entries.
pub struct ManifestScenes {
    pub manifest: DatasetManifest,
    pub opts: LoadOptions,
}

impl SceneSet for ManifestScenes {
    fn len(&self) -> usize {
        self.manifest.len()
    }
    fn get(&self, i: usize) -> Result<Scene> {
        load_scene(&self.manifest, &self.manifest.entries[i].id, self.opts)
    }
}

/// Stack scenes into `([B, T] mixture, [B, T] target, [B, F, H, W, 3] video)`.
pub fn batch_tensors<T: Real>(scenes: &[Scene]) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let first = scenes.first().ok_or_else(|| Error::Argument("empty batch".into()))?;
    let (n, v) = (first.mixture.len(), &first.video);
    let vshape = [v.num_frames, v.height, v.width, 3];
    let mut mix = Vec::with_capacity(scenes.len() * n);
    let mut tgt = Vec::with_capacity(scenes.len() * n);
    let mut vid = Vec::with_capacity(scenes.len() * v.frames.len());
    for s in scenes {
        let sv = &s.video;
        if s.mixture.len() != n || s.target.len() != n || [sv.num_frames, sv.height, sv.width, 3] != vshape {
            return Err(Error::Shape(format!("scene {} does not match the batch geometry of {}", s.id, first.id)));
        }
        mix.extend(s.mixture.samples.iter().map(|&x| T::lit(x as f64)));
        tgt.extend(s.target.samples.iter().map(|&x| T::lit(x as f64)));
        vid.extend(sv.frames.iter().map(|&x| T::lit(x as f64)));
    }
    let b = scenes.len();
    Ok((
        Tensor::from_vec(&[b, n], mix),
        Tensor::from_vec(&[b, n], tgt),
        Tensor::from_vec(&[b, vshape[0], vshape[1], vshape[2], 3], vid),
    ))
}

/// First-order optimizer over the trainable entries of a store.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub t: u64,
    ids: Vec<ParamId>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new<T: Real>(kind: OptimizerKind, params: &ParamStore<T>) -> Self {
        let ids = params.trainable_ids();
        let zeros = |ids: &[ParamId]| ids.iter().map(|&i| vec![0.0; params.get(i).numel()]).collect::<Vec<_>>();
        let m = zeros(&ids);
        let v = if kind == OptimizerKind::AdaptiveMoment { zeros(&ids) } else { Vec::new() };
        Self { kind, t: 0, ids, m, v }
    }

    /// Apply one update from dense per-id gradients (missing ones count as zero).
    pub fn step<T: Real>(&mut self, params: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], cfg: &TrainConfig) {
        self.t += 1;
        let lr = cfg.learning_rate;
        for (k, &id) in self.ids.iter().enumerate() {
            let Some(g) = grads.get(id.0).and_then(|g| g.as_ref()) else { continue };
            let w = params.get_mut(id);
            match self.kind {
                OptimizerKind::SgdMomentum => {
                    for ((w, &g), m) in w.data_mut().iter_mut().zip(g.data()).zip(&mut self.m[k]) {
                        *m = cfg.momentum * *m + g.as_f64();
                        *w = T::lit(w.as_f64() - lr * *m);
                    }
                }
                OptimizerKind::AdaptiveMoment => {
                    let (b1, b2) = (cfg.beta1, cfg.beta2);
                    let c1 = 1.0 - b1.powi(self.t as i32);
                    let c2 = 1.0 - b2.powi(self.t as i32);
                    for (((w, &g), m), v) in w.data_mut().iter_mut().zip(g.data()).zip(&mut self.m[k]).zip(&mut self.v[k]) {
                        let g = g.as_f64();
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                        let upd = lr * (*m / c1) / ((*v / c2).sqrt() + cfg.adam_epsilon);
                        *w = T::lit(w.as_f64() - upd);
                    }
                }
            }
        }
    }

    pub fn state<T: Real>(&self, params: &ParamStore<T>) -> OptimizerState {
        let slots = self
            .ids
            .iter()
            .enumerate()
            .map(|(k, &id)| {
                let mut moments = vec![self.m[k].clone()];
                if self.kind == OptimizerKind::AdaptiveMoment {
                    moments.push(self.v[k].clone());
                }
                OptimizerSlot { name: params.entry(id).name.clone(), moments }
            })
            .collect();
        OptimizerState { kind: self.kind.tag(), t: self.t, slots }
    }

    pub fn restore<T: Real>(params: &ParamStore<T>, state: &OptimizerState) -> Result<Self> {
        let kind = match state.kind {
            0 => OptimizerKind::SgdMomentum,
            1 => OptimizerKind::AdaptiveMoment,
            k => return Err(Error::Checkpoint(format!("unknown optimizer tag {k}"))),
        };
        let mut opt = Self::new(kind, params);
        opt.t = state.t;
        if state.slots.len() != opt.ids.len() {
            return Err(Error::Checkpoint("optimizer state does not match the parameter set".into()));
        }
        for (k, slot) in state.slots.iter().enumerate() {
            let id = opt.ids[k];
            let want = params.get(id).numel();
            if params.entry(id).name != slot.name || slot.moments.iter().any(|m| m.len() != want) {
                return Err(Error::Checkpoint(format!("optimizer slot {} does not match the model", slot.name)));
            }
            opt.m[k] = slot.moments[0].clone();
            if kind == OptimizerKind::AdaptiveMoment {
                opt.v[k] = slot.moments.get(1).cloned().ok_or_else(|| Error::Checkpoint("missing second moment".into()))?;
            }
        }
        Ok(opt)
    }
}

/// Rescale gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Option<Tensor<T>>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g.sum_sq().as_f64()).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::lit(max_norm / norm);
        grads.iter_mut().flatten().for_each(|g| g.scale_in_place(s));
    }
    norm
}

/// Stateful training session; `train` drives it for `cfg.epochs`.
pub struct Trainer {
    pub model: Model,
    pub params: ParamStore<f32>,
    pub opt: Optimizer,
    pub cfg: TrainConfig,
    pub eval: EvalOptions,
    pub rng: ChaCha8Rng,
    pub epoch: u64,
    pub step: u64,
    pub best_si_sdr: f64,
    pub history: TrainHistory,
}

impl Trainer {
    pub fn new(model_cfg: &ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let (model, params) = build_model::<f32>(model_cfg)?;
        let opt = Optimizer::new(cfg.optimizer, &params);
        Ok(Self {
            model,
            params,
            opt,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            eval: EvalOptions::default(),
            epoch: 0,
            step: 0,
            best_si_sdr: f64::NEG_INFINITY,
            history: TrainHistory::default(),
        })
    }

    /// Resume from a checkpoint; training settings come from `cfg`.
    pub fn resume(ck: &Checkpoint, cfg: TrainConfig) -> Result<Self> {
        let mut t = Self::new(&ck.config, cfg)?;
        restore_params(&mut t.params, &ck.params)?;
        t.opt = Optimizer::restore(&t.params, &ck.optimizer)?;
        t.rng = ChaCha8Rng::from_seed(ck.rng.seed);
        t.rng.set_stream(ck.rng.stream);
        t.rng.set_word_pos(ck.rng.word_pos);
        t.epoch = ck.epoch;
        t.step = ck.step;
        t.best_si_sdr = ck.best_si_sdr;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.model.cfg.clone(),
            epoch: self.epoch,
            step: self.step,
            rng: RngState { seed: self.rng.get_seed(), stream: self.rng.get_stream(), word_pos: self.rng.get_word_pos() },
            params: NamedTensor::from_store(&self.params),
            optimizer: self.opt.state(&self.params),
            best_si_sdr: self.best_si_sdr,
        }
    }

    /// One optimization step on a batch; returns the pre-update MSE.
    pub fn train_step(&mut self, scenes: &[Scene]) -> Result<f64> {
        let (mix, target, video) = batch_tensors::<f32>(scenes)?;
        let g = Graph::new();
        let ctx = Ctx::new(&g, &self.params, true);
        let y = self.model.forward(&ctx, &ctx.constant(mix), &video)?;
        let loss = g.mse(&y, &ctx.constant(target));
        let value = loss.value().item().as_f64();
        let step = self.step + 1;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("training loss is {value} at step {step} (epoch {})", self.epoch + 1)));
        }
        let mut grads = g.backward(&loss);
        let mut per = ctx.param_grads(&mut grads);
        let updates = ctx.take_bn_updates();
        drop(ctx);
        if per.iter().flatten().any(|t| !t.all_finite()) {
            return Err(Error::NonFinite(format!("non-finite gradient at step {step}")));
        }
        clip_global_norm(&mut per, self.cfg.grad_clip_norm);
        self.opt.step(&mut self.params, &per, &self.cfg);
        apply_bn_updates(&mut self.params, &updates, self.cfg.bn_momentum);
        self.step = step;
        Ok(value)
    }

    /// One pass over `train` in a seeded order. Returns the mean step loss.
    pub fn run_epoch(&mut self, train: &(impl SceneSet + ?Sized)) -> Result<f64> {
        if train.is_empty() {
            return Err(Error::Argument("training set is empty".into()));
        }
        let order = epoch_order(train.len(), self.rng.random());
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(self.cfg.batch_size) {
            let scenes = chunk.iter().map(|&i| train.get(i)).collect::<Result<Vec<_>>>()?;
            total += self.train_step(&scenes)?;
            steps += 1;
        }
        self.epoch += 1;
        Ok(total / steps as f64)
    }

    pub fn validate(&self, dev: &(impl SceneSet + ?Sized)) -> Result<MetricsReport> {
        let mut pairs = Vec::with_capacity(dev.len());
        for i in 0..dev.len() {
            let s = dev.get(i)?;
            let est = self.model.enhance(&self.params, &s)?;
            pairs.push(ClipPair { id: s.id.clone(), est, reference: s.target, paths: None });
        }
        evaluate_batch(&pairs, &self.eval)
    }

    fn save(&self, name: &str) -> Result<PathBuf> {
        let path = self.cfg.checkpoint_dir.join(name);
        self.checkpoint().save(&path)?;
        Ok(path)
    }

    /// Run the remaining epochs, validating and checkpointing as configured.
    pub fn fit(
        &mut self,
        train: &(impl SceneSet + ?Sized),
        dev: &(impl SceneSet + ?Sized),
        mut on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<TrainHistory> {
        if dev.is_empty() {
            return Err(Error::Argument("dev set is empty".into()));
        }
        while (self.epoch as usize) < self.cfg.epochs {
            let start = Instant::now();
            let train_mse = self.run_epoch(train)?;
            let e = self.epoch as usize;
            let mut rec = EpochRecord { epoch: e, train_mse, ..Default::default() };
            if e % self.cfg.validate_every == 0 || e == self.cfg.epochs {
                let rep = self.validate(dev)?;
                rec.val_mse = Some(rep.mse);
                rec.val_stoi = Some(rep.stoi);
                rec.val_si_sdr = Some(rep.si_sdr_db);
                rec.val_pesq = rep.pesq;
                if rep.si_sdr_db > self.best_si_sdr {
                    self.best_si_sdr = rep.si_sdr_db;
                    self.save(BEST_CHECKPOINT)?;
                }
            }
            rec.wall_seconds = start.elapsed().as_secs_f64();
            self.save(LAST_CHECKPOINT)?;
            on_epoch(&rec);
            self.history.records.push(rec);
        }
        Ok(self.history.clone())
    }
}

/// Build a fresh model from `model_cfg` and train it.
pub fn train(
    model_cfg: &ModelConfig,
    train_set: &(impl SceneSet + ?Sized),
    dev_set: &(impl SceneSet + ?Sized),
    cfg: TrainConfig,
) -> Result<(Trainer, TrainHistory)> {
    let mut t = Trainer::new(model_cfg, cfg)?;
    let h = t.fit(train_set, dev_set, |_| {})?;
    Ok((t, h))
}

/// Load a checkpoint into a ready-to-run f32 model.
pub fn load_model(path: impl AsRef<Path>) -> Result<(Model, ParamStore<f32>)> {
    let ck = Checkpoint::load(path)?;
    let (model, mut params) = build_model::<f32>(&ck.config)?;
    restore_params(&mut params, &ck.params)?;
    Ok((model, params))
}

/// Finite-difference check of the whole network in f64 on a two-scene batch
/// synthesized with `data` geometry.
pub fn grad_check(cfg: &ModelConfig, data: &SynthConfig, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let (model, params) = build_model::<f64>(cfg)?;
    let scenes = vec![synth_scene(opts.seed, data)?, synth_scene(opts.seed + 1, data)?];
    let (mix, target, video) = batch_tensors::<f64>(&scenes)?;
    // Surface geometry errors as errors before the probing closure runs.
    let g0 = Graph::inference();
    let c0 = Ctx::new(&g0, &params, false);
    model.forward(&c0, &c0.constant(mix.clone()), &video)?;
    Ok(check_gradients(&params, opts, |ctx| {
        let y = model.forward(ctx, &ctx.constant(mix.clone()), &video).expect("geometry checked above");
        ctx.g.mse(&y, &ctx.constant(target.clone()))
    }))
}
