//! Length-preserving temporal blocks with an internal squeeze.
//!
//! Each block downsamples time, runs attention, feed-forward and
//! depthwise-separable convolution sublayers at the reduced rate, then
//! interpolates back and adds the pre-squeeze input.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, RowPlan, Var};
use crate::error::{Error, Result};
use crate::fusion::align_temporal;
use crate::nn::{Ctx, Init, LayerNorm, Linear, MultiHeadAttention, ParamId, Scope};
use crate::tensor::Real;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SqueezeMode {
    /// Window mean followed by a linear map.
    Mean,
    /// Strided depthwise convolution (kernel = factor) followed by a linear map.
    StridedConv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SqueezeformerConfig {
    pub num_blocks: usize,
    pub d_model: usize,
    pub heads: usize,
    pub conv_kernel: usize,
    pub ff_expansion: usize,
    pub squeeze_factor: usize,
    pub squeeze_mode: SqueezeMode,
}

impl Default for SqueezeformerConfig {
    fn default() -> Self {
        Self {
            num_blocks: 2,
            d_model: 128,
            heads: 4,
            conv_kernel: 7,
            ff_expansion: 4,
            squeeze_factor: 2,
            squeeze_mode: SqueezeMode::Mean,
        }
    }
}

impl SqueezeformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conv_kernel % 2 == 0 {
            return Err(Error::Config(format!("temporal: conv_kernel must be odd, got {}", self.conv_kernel)));
        }
        if self.squeeze_factor == 0 {
            return Err(Error::Config("temporal: squeeze_factor must be at least 1".into()));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "temporal: d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.ff_expansion == 0 {
            return Err(Error::Config("temporal: ff_expansion must be at least 1".into()));
        }
        Ok(())
    }
}

/// Learned part of the squeeze.
#[derive(Clone, Debug)]
pub struct Squeeze {
    pub factor: usize,
    pub mode: SqueezeMode,
    conv: Option<(ParamId, ParamId)>,
    pub proj: Linear,
}

impl Squeeze {
    fn new<T: Real>(scope: &mut Scope<'_, T>, d: usize, factor: usize, mode: SqueezeMode) -> Self {
        let mut s = scope.sub("squeeze");
        let conv = (mode == SqueezeMode::StridedConv).then(|| {
            (
                s.param("dw_weight", &[factor, d], Init::Const(1.0 / factor as f64)),
                s.param("dw_bias", &[d], Init::Const(0.0)),
            )
        });
        Self { factor, mode, conv, proj: Linear::new(&mut s, "proj", d, d, true) }
    }
}

/// `[B, T, D]` → `[B, ceil(T/factor), D]`.
pub fn squeeze<T: Real>(ctx: &Ctx<'_, T>, sq: &Squeeze, x: &Var<T>) -> Var<T> {
    let g = ctx.g;
    let t = x.dim(1);
    let out_len = t.div_ceil(sq.factor);
    let pooled = match sq.conv {
        None => g.mix_rows(x, Rc::new(RowPlan::window_mean(t, sq.factor))),
        Some((w, b)) => g.depthwise_conv(x, &ctx.p(w), &ctx.p(b), sq.factor, 0, out_len),
    };
    sq.proj.forward(ctx, &pooled)
}

/// Interpolate back to `target_len` and add the pre-squeeze skip.
pub fn unsqueeze<T: Real>(g: &Graph<T>, squeezed: &Var<T>, target_len: usize, skip: &Var<T>) -> Result<Var<T>> {
    if skip.dim(1) != target_len || skip.shape()[2] != squeezed.dim(2) {
        return Err(Error::Shape(format!(
            "unsqueeze: skip {:?} does not match target length {target_len} and width {}",
            skip.shape(),
            squeezed.dim(2)
        )));
    }
    Ok(g.add(&align_temporal(g, squeezed, target_len), skip))
}

#[derive(Clone, Debug)]
struct FeedForward {
    fc1: Linear,
    fc2: Linear,
}

impl FeedForward {
    fn new<T: Real>(scope: &mut Scope<'_, T>, name: &str, d: usize, expansion: usize) -> Self {
        let mut s = scope.sub(name);
        Self { fc1: Linear::new(&mut s, "fc1", d, d * expansion, true), fc2: Linear::new(&mut s, "fc2", d * expansion, d, true) }
    }

    fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, x: &Var<T>) -> Var<T> {
        self.fc2.forward(ctx, &ctx.g.swish(&self.fc1.forward(ctx, x)))
    }
}

#[derive(Clone, Debug)]
struct SeparableConv {
    dw_weight: ParamId,
    dw_bias: ParamId,
    pointwise: Linear,
    kernel: usize,
}

impl SeparableConv {
    fn new<T: Real>(scope: &mut Scope<'_, T>, d: usize, kernel: usize) -> Self {
        let mut s = scope.sub("conv");
        Self {
            dw_weight: s.param("dw_weight", &[kernel, d], Init::FanIn(kernel)),
            dw_bias: s.param("dw_bias", &[d], Init::FanIn(kernel)),
            pointwise: Linear::new(&mut s, "pointwise", d, d, true),
            kernel,
        }
    }

    fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, x: &Var<T>) -> Var<T> {
        let g = ctx.g;
        let t = x.dim(1);
        let dw = g.depthwise_conv(x, &ctx.p(self.dw_weight), &ctx.p(self.dw_bias), 1, self.kernel / 2, t);
        g.swish(&self.pointwise.forward(ctx, &dw))
    }
}

#[derive(Clone, Debug)]
pub struct SqueezeformerBlock {
    pub squeeze: Squeeze,
    pub attn: MultiHeadAttention,
    norm_attn: LayerNorm,
    ff1: FeedForward,
    norm_ff1: LayerNorm,
    conv: SeparableConv,
    norm_conv: LayerNorm,
    ff2: FeedForward,
    norm_ff2: LayerNorm,
}

impl SqueezeformerBlock {
    pub fn new<T: Real>(scope: &mut Scope<'_, T>, cfg: &SqueezeformerConfig) -> Self {
        let d = cfg.d_model;
        Self {
            squeeze: Squeeze::new(scope, d, cfg.squeeze_factor, cfg.squeeze_mode),
            attn: MultiHeadAttention::new(scope, "mhsa", d, cfg.heads),
            norm_attn: LayerNorm::new(scope, "norm_mhsa", d),
            ff1: FeedForward::new(scope, "ff1", d, cfg.ff_expansion),
            norm_ff1: LayerNorm::new(scope, "norm_ff1", d),
            conv: SeparableConv::new(scope, d, cfg.conv_kernel),
            norm_conv: LayerNorm::new(scope, "norm_conv", d),
            ff2: FeedForward::new(scope, "ff2", d, cfg.ff_expansion),
            norm_ff2: LayerNorm::new(scope, "norm_ff2", d),
        }
    }

    /// Attention weights of the self-attention sublayer `[B, H, L, L]` and the block output.
    pub fn forward_with_weights<T: Real>(&self, ctx: &Ctx<'_, T>, x: &Var<T>) -> Result<(Var<T>, Var<T>)> {
        let g = ctx.g;
        let t = x.dim(1);
        let s = squeeze(ctx, &self.squeeze, x);
        let (b, l) = (s.dim(0), s.dim(1));
        let (weights, a) = self.attn.forward_with_weights(ctx, &s, &s);
        let c = &ctx.counters.temporal_logits;
        c.set(c.get() + (b * self.attn.heads * l * l) as u64);
        let h = self.norm_attn.forward(ctx, &g.add(&s, &a));
        let h = self.norm_ff1.forward(ctx, &g.add(&h, &self.ff1.forward(ctx, &h)));
        let h = self.norm_conv.forward(ctx, &g.add(&h, &self.conv.forward(ctx, &h)));
        let h = self.norm_ff2.forward(ctx, &g.add(&h, &self.ff2.forward(ctx, &h)));
        Ok((weights, unsqueeze(g, &h, t, x)?))
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        Ok(self.forward_with_weights(ctx, x)?.1)
    }
}

/// Functional form of one block.
pub fn squeezeformer_block<T: Real>(ctx: &Ctx<'_, T>, block: &SqueezeformerBlock, x: &Var<T>) -> Result<Var<T>> {
    block.forward(ctx, x)
}

#[derive(Clone, Debug)]
pub struct TemporalModel {
    pub cfg: SqueezeformerConfig,
    pub blocks: Vec<SqueezeformerBlock>,
}

impl TemporalModel {
    pub fn new<T: Real>(scope: &mut Scope<'_, T>, cfg: &SqueezeformerConfig) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..cfg.num_blocks).map(|i| SqueezeformerBlock::new(&mut scope.sub(&format!("block{i}")), cfg)).collect();
        Ok(Self { cfg: cfg.clone(), blocks })
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        if x.shape().len() != 3 || x.dim(2) != self.cfg.d_model {
            return Err(Error::Shape(format!(
                "temporal model expects [B, T, {}], got {:?}",
                self.cfg.d_model,
                x.shape()
            )));
        }
        let mut h = x.clone();
        for blk in &self.blocks {
            h = blk.forward(ctx, &h)?;
        }
        Ok(h)
    }
}

pub fn temporal_model<T: Real>(ctx: &Ctx<'_, T>, model: &TemporalModel, x: &Var<T>) -> Result<Var<T>> {
    model.forward(ctx, x)
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

    fn cfg(d: usize, blocks: usize) -> SqueezeformerConfig {
        SqueezeformerConfig { num_blocks: blocks, d_model: d, heads: 2, conv_kernel: 3, ..Default::default() }
    }

    fn build(c: &SqueezeformerConfig, seed: u64) -> (ParamStore<f64>, TemporalModel) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = TemporalModel::new(&mut Scope::new(&mut store, &mut rng, "temporal"), c).unwrap();
        (store, m)
    }

    fn set_identity(store: &mut ParamStore<f64>, prefix: &str, d: usize) {
        let w = store.id_of(&format!("{prefix}.weight")).unwrap();
        let b = store.id_of(&format!("{prefix}.bias")).unwrap();
        let mut eye = vec![0.0; d * d];
        (0..d).for_each(|i| eye[i * d + i] = 1.0);
        store.set(w, Tensor::from_vec(&[d, d], eye));
        store.set(b, Tensor::zeros(&[d]));
    }

    fn zero(store: &mut ParamStore<f64>, name: &str) {
        let id = store.id_of(name).unwrap();
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }

    #[test]
    fn squeeze_lengths_and_constants() {
        let (mut store, m) = build(&cfg(4, 1), 0);
        set_identity(&mut store, "temporal.block0.squeeze.proj", 4);
        let g = Graph::inference();
        let ctx = Ctx::new(&g, &store, false);
        let sq = &m.blocks[0].squeeze;
        assert_eq!(squeeze(&ctx, sq, &ctx.constant(Tensor::zeros(&[1, 3000, 4]))).dim(1), 1500);
        let x = Tensor::from_f64(&[1, 7, 1], &[1.0, 3.0, 5.0, 7.0, 9.0, 11.0, 13.0]).reshaped(&[1, 7, 1]);
        let x4 = Tensor::from_vec(&[1, 7, 4], x.data().iter().flat_map(|&v| [v; 4]).collect());
        let s = squeeze(&ctx, sq, &ctx.constant(x4));
        assert_eq!(s.dim(1), 4);
        let firsts: Vec<f64> = s.value().data().chunks(4).map(|r| r[0]).collect();
        assert_eq!(firsts, vec![2.0, 6.0, 10.0, 13.0]);
        let c = squeeze(&ctx, sq, &ctx.constant(Tensor::full(&[2, 9, 4], 0.7)));
        assert!(c.value().data().iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn unsqueeze_round_trips_and_checks_the_skip() {
        let g = Graph::<f64>::inference();
        let s = g.constant(Tensor::full(&[1, 4, 2], 0.5));
        let out = unsqueeze(&g, &s, 7, &g.constant(Tensor::zeros(&[1, 7, 2]))).unwrap();
        assert_eq!(out.shape(), &[1, 7, 2]);
        assert!(out.value().data().iter().all(|&v| v == 0.5));
        let same = random(&[1, 5, 2], 1);
        let id = unsqueeze(&g, &g.constant(same.clone()), 5, &g.constant(Tensor::zeros(&[1, 5, 2]))).unwrap();
        assert_eq!(id.value(), &same);
        assert!(unsqueeze(&g, &s, 7, &g.constant(Tensor::zeros(&[1, 6, 2]))).is_err());
    }

    #[test]
    fn zeroed_sublayers_leave_the_normalized_squeeze_path() {
        let d = 4;
        let (mut store, m) = build(&cfg(d, 1), 2);
        for name in [
            "mhsa.out.weight",
            "mhsa.out.bias",
            "ff1.fc2.weight",
            "ff1.fc2.bias",
            "conv.pointwise.weight",
            "conv.pointwise.bias",
            "ff2.fc2.weight",
            "ff2.fc2.bias",
        ] {
            zero(&mut store, &format!("temporal.block0.{name}"));
        }
        let g = Graph::inference();
        let ctx = Ctx::new(&g, &store, false);
        // Four identical frames: squeeze gives two identical frames, each
        // sublayer adds zero, four norms (unit gain, zero shift) collapse to
        // LN(proj(x)), and the unsqueeze adds the input back.
        let frame = [0.3, -1.2, 0.8, 2.0];
        let x = Tensor::from_vec(&[1, 4, d], frame.repeat(4));
        let out = m.forward(&ctx, &ctx.constant(x)).unwrap();
        let w = store.get(store.id_of("temporal.block0.squeeze.proj.weight").unwrap());
        let b = store.get(store.id_of("temporal.block0.squeeze.proj.bias").unwrap());
        let p: Vec<f64> = (0..d).map(|o| b.data()[o] + (0..d).map(|i| w.data()[o * d + i] * frame[i]).sum::<f64>()).collect();
        let mut ln = p.clone();
        for _ in 0..4 {
            let mean = ln.iter().sum::<f64>() / d as f64;
            let var = ln.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            ln = ln.iter().map(|v| (v - mean) / (var + 1e-5).sqrt()).collect();
        }
        for row in out.value().data().chunks(d) {
            for c in 0..d {
                assert!((row[c] - (ln[c] + frame[c])).abs() < 1e-9, "{row:?}");
            }
        }
    }

    #[test]
    fn length_preserved_and_logits_counted() {
        let c = cfg(8, 2);
        let (store, m) = build(&c, 3);
        for t in [1usize, 2, 7, 100, 3000] {
            let g = Graph::inference();
            let ctx = Ctx::new(&g, &store, false);
            let out = m.forward(&ctx, &ctx.constant(random(&[1, t, 8], t as u64))).unwrap();
            assert_eq!(out.shape(), &[1, t, 8]);
            let per_block = (c.heads * t.div_ceil(2) * t.div_ceil(2)) as u64;
            assert_eq!(ctx.counters.temporal_logits.get(), per_block * c.num_blocks as u64);
            if t % 2 == 0 {
                assert_eq!(4 * per_block, (c.heads * t * t) as u64);
            }
        }
        let (store0, m0) = build(&cfg(8, 0), 0);
        let g = Graph::inference();
        let ctx = Ctx::new(&g, &store0, false);
        let x = random(&[2, 5, 8], 0);
        assert_eq!(m0.forward(&ctx, &ctx.constant(x.clone())).unwrap().value(), &x);
    }

    #[test]
    fn attention_rows_normalize_and_single_frame_weight_is_one() {
        let (store, m) = build(&cfg(8, 1), 4);
        let g = Graph::inference();
        let ctx = Ctx::new(&g, &store, false);
        let (w, _) = m.blocks[0].forward_with_weights(&ctx, &ctx.constant(random(&[2, 9, 8], 5))).unwrap();
        for row in w.value().data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let (w1, _) = m.blocks[0].forward_with_weights(&ctx, &ctx.constant(random(&[1, 1, 8], 6))).unwrap();
        assert!(w1.value().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        for mode in [SqueezeMode::Mean, SqueezeMode::StridedConv] {
            let c = SqueezeformerConfig { squeeze_mode: mode, ..cfg(8, 1) };
            let (store, m) = build(&c, 7);
            let x = random(&[1, 16, 8], 8);
            let w = random(&[1, 16, 8], 9);
            let report = check_gradients(&store, &GradCheckOptions::default(), |ctx| {
                let out = m.forward(ctx, &ctx.constant(x.clone())).unwrap();
                ctx.g.sum_all(&ctx.g.mul(&out, &ctx.constant(w.clone())))
            });
            assert!(report.passed(), "{mode:?}: {}", report.summary());
        }
    }

    #[test]
    fn even_kernel_is_rejected() {
        assert!(SqueezeformerConfig { conv_kernel: 4, ..cfg(8, 1) }.validate().is_err());
        assert!(SqueezeformerConfig { squeeze_factor: 0, ..cfg(8, 1) }.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn any_length_is_preserved(t in 1usize..512, seed in 0u64..100) {
            let c = SqueezeformerConfig { d_model: 4, heads: 1, ..cfg(4, 1) };
            let (store, m) = build(&c, seed);
            let g = Graph::inference();
            let ctx = Ctx::new(&g, &store, false);
            let out = m.forward(&ctx, &ctx.constant(random(&[1, t, 4], seed))).unwrap();
            prop_assert_eq!(out.shape(), &[1, t, 4]);
            prop_assert!(out.value().all_finite());
        }
    }
}
