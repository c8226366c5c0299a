//! Bidirectional cross-attention between the audio and video streams.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, RowPlan, Var};
use crate::error::{Error, Result};
use crate::nn::{Ctx, LayerNorm, Linear, MultiHeadAttention, Scope};
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub d_model: usize,
    pub heads: usize,
    pub iterations: usize,
    pub clamp_bound: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { d_model: 128, heads: 4, iterations: 2, clamp_bound: 10.0 }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "fusion: d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.iterations == 0 {
            return Err(Error::Config("fusion: iterations must be at least 1".into()));
        }
        if self.clamp_bound <= 0.0 {
            return Err(Error::Config("fusion: clamp_bound must be positive".into()));
        }
        Ok(())
    }
}

/// Resample `[B, Tv, D]` to `[B, target_len, D]` with endpoint-aligned linear interpolation.
pub fn align_temporal<T: Real>(g: &Graph<T>, video: &Var<T>, target_len: usize) -> Var<T> {
    let tv = video.dim(1);
    if tv == target_len {
        return video.clone();
    }
    g.mix_rows(video, Rc::new(RowPlan::linear_interp(tv, target_len)))
}

#[derive(Clone, Debug)]
pub struct CrossStep {
    pub audio_to_video: MultiHeadAttention,
    pub audio_norm: LayerNorm,
    pub video_to_audio: MultiHeadAttention,
    pub video_norm: LayerNorm,
}

impl CrossStep {
    pub fn new<T: Real>(scope: &mut Scope<'_, T>, d: usize, heads: usize) -> Self {
        Self {
            audio_to_video: MultiHeadAttention::new(scope, "a2v", d, heads),
            audio_norm: LayerNorm::new(scope, "norm_a", d),
            video_to_audio: MultiHeadAttention::new(scope, "v2a", d, heads),
            video_norm: LayerNorm::new(scope, "norm_v", d),
        }
    }
}

/// One simultaneous update: both directions read the same input streams.
pub fn cross_attention_step<T: Real>(
    ctx: &Ctx<'_, T>,
    step: &CrossStep,
    audio: &Var<T>,
    video: &Var<T>,
) -> Result<(Var<T>, Var<T>)> {
    if audio.shape() != video.shape() {
        return Err(Error::Shape(format!(
            "cross-attention needs aligned streams, got audio {:?} and video {:?}",
            audio.shape(),
            video.shape()
        )));
    }
    let g = ctx.g;
    let a_ctx = step.audio_to_video.forward(ctx, audio, video);
    let v_ctx = step.video_to_audio.forward(ctx, video, audio);
    let a = step.audio_norm.forward(ctx, &g.add(audio, &a_ctx));
    let v = step.video_norm.forward(ctx, &g.add(video, &v_ctx));
    Ok((a, v))
}

#[derive(Clone, Debug)]
pub struct Fusion {
    pub cfg: FusionConfig,
    video_proj: Option<Linear>,
    pub steps: Vec<CrossStep>,
}

impl Fusion {
    pub fn new<T: Real>(scope: &mut Scope<'_, T>, cfg: &FusionConfig, video_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let video_proj = (video_dim != cfg.d_model).then(|| Linear::new(scope, "video_proj", video_dim, cfg.d_model, true));
        let steps = (0..cfg.iterations)
            .map(|i| CrossStep::new(&mut scope.sub(&format!("iter{i}")), cfg.d_model, cfg.heads))
            .collect();
        Ok(Self { cfg: cfg.clone(), video_proj, steps })
    }

    /// `audio` is `[B, Ta, D]`, `video` is `[B, Tv, out_dim]`; output is `[B, Ta, D]`.
    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, audio: &Var<T>, video: &Var<T>) -> Result<Var<T>> {
        if audio.shape().len() != 3 || video.shape().len() != 3 || audio.dim(0) != video.dim(0) {
            return Err(Error::Shape(format!(
                "fusion expects [B, T, D] streams with equal batch, got {:?} and {:?}",
                audio.shape(),
                video.shape()
            )));
        }
        if audio.dim(2) != self.cfg.d_model {
            return Err(Error::Shape(format!("audio width {} != d_model {}", audio.dim(2), self.cfg.d_model)));
        }
        let g = ctx.g;
        let video = match &self.video_proj {
            Some(p) => p.forward(ctx, video),
            None => video.clone(),
        };
        if video.dim(2) != self.cfg.d_model {
            return Err(Error::Shape(format!("video width {} != d_model {}", video.dim(2), self.cfg.d_model)));
        }
        let mut v = align_temporal(g, &video, audio.dim(1));
        let mut a = audio.clone();
        for step in &self.steps {
            (a, v) = cross_attention_step(ctx, step, &a, &v)?;
        }
        let mean = g.scale(&g.add(&a, &v), T::lit(0.5));
        let b = T::lit(self.cfg.clamp_bound);
        Ok(g.clamp(&mean, -b, b))
    }
}

/// Functional entry point.
pub fn fuse<T: Real>(ctx: &Ctx<'_, T>, fusion: &Fusion, audio: &Var<T>, video: &Var<T>) -> Result<Var<T>> {
    fusion.forward(ctx, audio, video)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheckOptions};
    use crate::nn::ParamStore;
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_f64(shape, &(0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>())
    }

    fn build(cfg: &FusionConfig, video_dim: usize, seed: u64) -> (ParamStore<f64>, Fusion) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = Fusion::new(&mut Scope::new(&mut store, &mut rng, "fusion"), cfg, video_dim).unwrap();
        (store, f)
    }

    fn small(iterations: usize) -> FusionConfig {
        FusionConfig { d_model: 8, heads: 2, iterations, clamp_bound: 10.0 }
    }

    fn zero_param(store: &mut ParamStore<f64>, name: &str) {
        let id = store.id_of(name).unwrap();
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }

    fn layer_norm_rows(x: &[f64], d: usize) -> Vec<f64> {
        x.chunks(d)
            .flat_map(|row| {
                let m = row.iter().sum::<f64>() / d as f64;
                let v = row.iter().map(|a| (a - m).powi(2)).sum::<f64>() / d as f64;
                row.iter().map(move |a| (a - m) / (v + 1e-5).sqrt()).collect::<Vec<_>>()
            })
            .collect()
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let g = Graph::<f64>::inference();
        let v = random(&[1, 75, 4], 0);
        let same = align_temporal(&g, &g.constant(v.clone()), 75);
        assert_eq!(same.value(), &v);
        let up = align_temporal(&g, &g.constant(v.clone()), 3000);
        assert_eq!(&up.value().data()[..4], &v.data()[..4]);
        assert_eq!(&up.value().data()[2999 * 4..], &v.data()[74 * 4..]);
        let two = Tensor::from_f64(&[1, 2, 1], &[1.0, 3.0]);
        let three = align_temporal(&g, &g.constant(two), 3);
        assert_eq!(three.value().data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn full_length_shapes_and_clamp() {
        let cfg = FusionConfig { d_model: 16, heads: 4, iterations: 2, clamp_bound: 10.0 };
        let (store, f) = build(&cfg, 16, 1);
        let g = Graph::inference();
        let ctx = Ctx::new(&g, &store, false);
        let a = ctx.constant(random(&[2, 3000, 16], 2));
        let v = ctx.constant(random(&[2, 75, 16], 3));
        let out = f.forward(&ctx, &a, &v).unwrap();
        assert_eq!(out.shape(), &[2, 3000, 16]);
        assert!(out.value().max_abs() <= 10.0);
        let tight = FusionConfig { clamp_bound: 0.25, ..cfg };
        let (store, f) = build(&tight, 16, 1);
        let ctx = Ctx::new(&g, &store, false);
        let out = f.forward(&ctx, &a, &v).unwrap();
        assert!(out.value().max_abs() <= 0.25);
    }

    #[test]
    fn zeroed_output_projection_passes_the_residual() {
        let (mut store, f) = build(&small(1), 8, 2);
        zero_param(&mut store, "fusion.iter0.a2v.out.weight");
        zero_param(&mut store, "fusion.iter0.a2v.out.bias");
        let g = Graph::inference();
        let ctx = Ctx::new(&g, &store, false);
        let a = random(&[1, 5, 8], 4);
        let v = random(&[1, 5, 8], 5);
        let (a2, v2) = cross_attention_step(&ctx, &f.steps[0], &ctx.constant(a.clone()), &ctx.constant(v)).unwrap();
        let expect = layer_norm_rows(a.data(), 8);
        for (x, y) in a2.value().data().iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(v2.shape(), &[1, 5, 8]);
    }

    #[test]
    fn single_position_attends_with_weight_one() {
        let (store, f) = build(&small(1), 8, 3);
        let g = Graph::inference();
        let ctx = Ctx::new(&g, &store, false);
        let a = random(&[1, 1, 8], 6);
        let v = random(&[1, 1, 8], 7);
        let (a2, _) = cross_attention_step(&ctx, &f.steps[0], &ctx.constant(a.clone()), &ctx.constant(v.clone())).unwrap();
        // Hand evaluation: softmax over one key is 1, so the context is out(v(video)).
        let mha = &f.steps[0].audio_to_video;
        let lin = |w: &Tensor<f64>, b: &Tensor<f64>, x: &[f64]| -> Vec<f64> {
            (0..8).map(|o| b.data()[o] + (0..8).map(|i| w.data()[o * 8 + i] * x[i]).sum::<f64>()).collect()
        };
        let vv = lin(store.get(mha.v.weight), store.get(mha.v.bias.unwrap()), v.data());
        let ctxv = lin(store.get(mha.out.weight), store.get(mha.out.bias.unwrap()), &vv);
        let pre: Vec<f64> = a.data().iter().zip(&ctxv).map(|(x, y)| x + y).collect();
        let expect = layer_norm_rows(&pre, 8);
        for (x, y) in a2.value().data().iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_inputs_reach_the_norm_shift_fixed_point() {
        let (mut store, f) = build(&small(1), 8, 4);
        let names: Vec<String> = store.entries().iter().map(|e| e.name.clone()).filter(|n| n.ends_with(".bias")).collect();
        for n in names {
            zero_param(&mut store, &n);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let beta_a: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let beta_v: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ida = store.id_of("fusion.iter0.norm_a.beta").unwrap();
        let idv = store.id_of("fusion.iter0.norm_v.beta").unwrap();
        store.set(ida, Tensor::from_vec(&[8], beta_a.clone()));
        store.set(idv, Tensor::from_vec(&[8], beta_v.clone()));
        let g = Graph::inference();
        let ctx = Ctx::new(&g, &store, false);
        let out = f.forward(&ctx, &ctx.constant(Tensor::zeros(&[1, 4, 8])), &ctx.constant(Tensor::zeros(&[1, 2, 8]))).unwrap();
        for row in out.value().data().chunks(8) {
            for c in 0..8 {
                assert!((row[c] - (beta_a[c] + beta_v[c]) / 2.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn equal_final_streams_average_to_themselves() {
        // With identical inputs and identical parameters for both directions the
        // streams stay equal, so the average is either stream.
        let (mut store, f) = build(&small(1), 8, 5);
        let names: Vec<String> = store.entries().iter().map(|e| e.name.clone()).collect();
        for n in names.iter().filter(|n| n.contains(".a2v.")) {
            let twin = n.replace(".a2v.", ".v2a.");
            let (src, dst) = (store.id_of(n).unwrap(), store.id_of(&twin).unwrap());
            let value = store.get(src).clone();
            store.set(dst, value);
        }
        let g = Graph::inference();
        let ctx = Ctx::new(&g, &store, false);
        let x = random(&[1, 3, 8], 8);
        let (a, v) = cross_attention_step(&ctx, &f.steps[0], &ctx.constant(x.clone()), &ctx.constant(x.clone())).unwrap();
        assert_eq!(a.value(), v.value());
        let fused = f.forward(&ctx, &ctx.constant(x.clone()), &ctx.constant(x)).unwrap();
        for (p, q) in fused.value().data().iter().zip(a.value().data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn mismatched_widths_are_shape_errors() {
        let (store, f) = build(&small(1), 8, 6);
        let g = Graph::inference();
        let ctx = Ctx::new(&g, &store, false);
        let bad = f.forward(&ctx, &ctx.constant(Tensor::zeros(&[1, 4, 6])), &ctx.constant(Tensor::zeros(&[1, 2, 8])));
        assert!(matches!(bad, Err(Error::Shape(_))));
        let step = cross_attention_step(&ctx, &f.steps[0], &ctx.constant(Tensor::zeros(&[1, 4, 8])), &ctx.constant(Tensor::zeros(&[1, 3, 8])));
        assert!(matches!(step, Err(Error::Shape(_))));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (store, f) = build(&small(1), 12, 7);
        let a = random(&[1, 8, 8], 9);
        let v = random(&[1, 3, 12], 10);
        let w = random(&[1, 8, 8], 11);
        let report = check_gradients(&store, &GradCheckOptions::default(), |ctx| {
            let out = f.forward(ctx, &ctx.constant(a.clone()), &ctx.constant(v.clone())).unwrap();
            ctx.g.sum_all(&ctx.g.mul(&out, &ctx.constant(w.clone())))
        });
        assert!(report.passed(), "{}", report.summary());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10))]
        #[test]
        fn output_length_follows_audio(ta in 1usize..4000, tv in 1usize..100) {
            let cfg = FusionConfig { d_model: 4, heads: 1, iterations: 1, clamp_bound: 10.0 };
            let (store, f) = build(&cfg, 4, 0);
            let g = Graph::inference();
            let ctx = Ctx::new(&g, &store, false);
            let out = f.forward(&ctx, &ctx.constant(Tensor::zeros(&[1, ta, 4])), &ctx.constant(Tensor::zeros(&[1, tv, 4]))).unwrap();
            prop_assert_eq!(out.shape(), &[1, ta, 4]);
        }

        #[test]
        fn batching_matches_individual_scenes(seed in 0u64..1000) {
            let (store, f) = build(&small(2), 8, seed);
            let g = Graph::inference();
            let ctx = Ctx::new(&g, &store, false);
            let a = random(&[2, 6, 8], seed + 1);
            let v = random(&[2, 3, 8], seed + 2);
            let both = f.forward(&ctx, &ctx.constant(a.clone()), &ctx.constant(v.clone())).unwrap();
            for b in 0..2 {
                let one = f.forward(&ctx, &ctx.constant(a.slice_outer(b, 1)), &ctx.constant(v.slice_outer(b, 1))).unwrap();
                for (x, y) in one.value().data().iter().zip(&both.value().data()[b * 48..(b + 1) * 48]) {
                    prop_assert!((x - y).abs() < 1e-5);
                }
            }
        }
    }
}
