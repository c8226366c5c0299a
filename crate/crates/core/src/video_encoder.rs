//! Per-frame hierarchical window-attention encoder.
//!
//! Blocks use residual post-normalization, cosine attention with a learned
//! per-head temperature and a log-spaced continuous position bias. Tokens
//! live as `[N, H*W, C]` with row-major grid order.

use std::f64::consts::LN_2;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, RowPlan, Var};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Init, LayerNorm, Linear, ParamId, Scope};
use crate::tensor::{Real, Tensor};

pub const EMBED_CLAMP: f64 = 10.0;
pub const NORM_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SwinConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub window: usize,
    pub out_dim: usize,
    pub tau_max_log: f64,
    pub cpb_hidden: usize,
    pub mlp_ratio: usize,
}

impl Default for SwinConfig {
    fn default() -> Self {
        Self {
            patch_size: 4,
            embed_dim: 32,
            depths: vec![2, 2],
            heads: vec![2, 4],
            window: 7,
            out_dim: 128,
            tau_max_log: 100f64.ln(),
            cpb_hidden: 64,
            mlp_ratio: 4,
        }
    }
}

impl SwinConfig {
    /// Channel width of stage `s`.
    pub fn stage_dim(&self, s: usize) -> usize {
        self.embed_dim << s
    }

    /// Window actually used on a `grid`-sided stage: the configured window,
    /// or the whole grid when the grid is not larger than it.
    pub fn effective_window(&self, grid: usize) -> usize {
        self.window.min(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.depths.is_empty() || self.depths.len() != self.heads.len() {
            return Err(Error::Config("video encoder: depths and heads must be non-empty and equally long".into()));
        }
        if self.patch_size == 0 || self.window == 0 || self.embed_dim == 0 || self.out_dim == 0 {
            return Err(Error::Config("video encoder: sizes must be positive".into()));
        }
        for (s, &h) in self.heads.iter().enumerate() {
            if h == 0 || self.stage_dim(s) % h != 0 {
                return Err(Error::Config(format!(
                    "video encoder: stage {s} width {} is not divisible by {h} heads",
                    self.stage_dim(s)
                )));
            }
        }
        Ok(())
    }

    /// Check grid divisibility for square frames of side `frame_size`.
    pub fn validate_for(&self, frame_size: usize) -> Result<()> {
        self.validate()?;
        if frame_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "frame size {frame_size} is not divisible by patch size {}",
                self.patch_size
            )));
        }
        let mut grid = frame_size / self.patch_size;
        for s in 0..self.depths.len() {
            if s > 0 {
                if grid % 2 != 0 {
                    return Err(Error::Config(format!("stage {s}: grid side {grid} cannot be merged (odd)")));
                }
                grid /= 2;
            }
            let w = self.effective_window(grid);
            if grid % w != 0 {
                return Err(Error::Config(format!("stage {s}: grid side {grid} is not divisible by window {w}")));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Window bookkeeping

/// For every window-ordered slot, the row-major grid token that lands there
/// after a cyclic shift by `(-shift, -shift)`.
fn window_order(h: usize, w: usize, window: usize, shift: usize) -> Vec<usize> {
    let mut order = Vec::with_capacity(h * w);
    for wy in 0..h / window {
        for wx in 0..w / window {
            for py in 0..window {
                for px in 0..window {
                    let y = (wy * window + py + shift) % h;
                    let x = (wx * window + px + shift) % w;
                    order.push(y * w + x);
                }
            }
        }
    }
    order
}

fn check_grid(h: usize, w: usize, window: usize, shift: usize) -> Result<()> {
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(Error::Shape(format!("grid {h}x{w} is not divisible by window {window}")));
    }
    if shift != 0 && shift != window / 2 {
        return Err(Error::Shape(format!("shift must be 0 or window/2, got {shift}")));
    }
    Ok(())
}

fn permutation_plan<T: Real>(src: &[usize]) -> Rc<RowPlan<T>> {
    Rc::new(RowPlan { in_len: src.len(), rows: src.iter().map(|&j| vec![(j, T::one())]).collect() })
}

/// Additive attention mask `[num_windows, w² * w²]` for a shifted partition:
/// `0` where two tokens came from the same region, `-inf` otherwise.
pub fn shift_mask<T: Real>(h: usize, w: usize, window: usize, shift: usize) -> Tensor<T> {
    let region = |v: usize, n: usize| -> usize {
        if v < n - window {
            0
        } else if v < n - shift {
            1
        } else {
            2
        }
    };
    let (nwy, nwx) = (h / window, w / window);
    let l = window * window;
    let mut data = Vec::with_capacity(nwy * nwx * l * l);
    for wy in 0..nwy {
        for wx in 0..nwx {
            let labels: Vec<usize> = (0..l)
                .map(|p| {
                    let (y, x) = (wy * window + p / window, wx * window + p % window);
                    region(y, h) * 3 + region(x, w)
                })
                .collect();
            for i in 0..l {
                for j in 0..l {
                    data.push(if labels[i] == labels[j] { T::zero() } else { T::neg_infinity() });
                }
            }
        }
    }
    Tensor::from_vec(&[nwy * nwx, l * l], data)
}

/// `[N, H, W, C]` → windows `[N * nW, w², C]` and, for `shift > 0`, the mask.
pub fn window_partition<T: Real>(
    g: &Graph<T>,
    x: &Var<T>,
    window: usize,
    shift: usize,
) -> Result<(Var<T>, Option<Tensor<T>>)> {
    if x.shape().len() != 4 {
        return Err(Error::Shape(format!("window_partition expects [N, H, W, C], got {:?}", x.shape())));
    }
    let (n, h, w, c) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    check_grid(h, w, window, shift)?;
    let flat = g.reshape(x, &[n, h * w, c]);
    let moved = g.mix_rows(&flat, permutation_plan(&window_order(h, w, window, shift)));
    let nw = (h / window) * (w / window);
    let windows = g.reshape(&moved, &[n * nw, window * window, c]);
    let mask = (shift > 0).then(|| shift_mask(h, w, window, shift));
    Ok((windows, mask))
}

/// Inverse of [`window_partition`].
pub fn window_reverse<T: Real>(
    g: &Graph<T>,
    windows: &Var<T>,
    h: usize,
    w: usize,
    window: usize,
    shift: usize,
) -> Result<Var<T>> {
    check_grid(h, w, window, shift)?;
    let c = windows.dim(2);
    let n = windows.value().numel() / (h * w * c);
    let moved = g.reshape(windows, &[n, h * w, c]);
    let order = window_order(h, w, window, shift);
    let mut inverse = vec![0; order.len()];
    for (slot, &tok) in order.iter().enumerate() {
        inverse[tok] = slot;
    }
    let flat = g.mix_rows(&moved, permutation_plan(&inverse));
    Ok(g.reshape(&flat, &[n, h, w, c]))
}

// ---------------------------------------------------------------------------
// Attention

/// Cosine attention over `[.., heads, L, d]` inputs. `log_tau` is `[heads]`;
/// `bias` is `[heads, L, L]`; `mask` is `([groups, L*L], groups)` where the
/// leading batch axis is `[outer, groups]`. Returns `(weights, output)`.
pub fn scaled_cosine_attention<T: Real>(
    g: &Graph<T>,
    q: &Var<T>,
    k: &Var<T>,
    v: &Var<T>,
    log_tau: &Var<T>,
    tau_max_log: f64,
    bias: Option<&Var<T>>,
    mask: Option<(&Tensor<T>, usize)>,
) -> (Var<T>, Var<T>) {
    let nd = q.shape().len();
    let heads_axis = nd - 3;
    let qn = g.l2_normalize(q, NORM_EPS);
    let kn = g.l2_normalize(k, NORM_EPS);
    let mut logits = g.matmul(&qn, &kn, false, true);
    let clamped = g.clamp(log_tau, T::neg_infinity(), T::lit(tau_max_log));
    logits = g.scale_heads(&logits, &g.exp(&clamped), heads_axis);
    if let Some(b) = bias {
        logits = g.add_outer(&logits, b);
    }
    if let Some((m, groups)) = mask {
        logits = g.add_group_mask(&logits, m, groups, q.shape()[heads_axis]);
    }
    let weights = g.softmax(&logits);
    let out = g.matmul(&weights, v, false, false);
    (weights, out)
}

/// `sign(d) * ln(1 + |d|) / ln(8)`.
pub fn log_spaced(delta: f64) -> f64 {
    delta.signum() * (1.0 + delta.abs()).ln() / (3.0 * LN_2)
}

/// Small MLP from log-spaced relative offsets to per-head biases.
#[derive(Clone, Debug)]
pub struct ContinuousBias {
    fc1: Linear,
    fc2: Linear,
    pub heads: usize,
}

impl ContinuousBias {
    pub fn new<T: Real>(scope: &mut Scope<'_, T>, hidden: usize, heads: usize) -> Self {
        let mut s = scope.sub("cpb");
        Self { fc1: Linear::new(&mut s, "fc1", 2, hidden, true), fc2: Linear::new(&mut s, "fc2", hidden, heads, false), heads }
    }

    /// Bias table `[heads, w², w²]` for a `window`-sided window.
    pub fn table<T: Real>(&self, ctx: &Ctx<'_, T>, window: usize) -> Var<T> {
        let span = 2 * window - 1;
        let mut coords = Vec::with_capacity(span * span * 2);
        for dy in 0..span {
            for dx in 0..span {
                coords.push(log_spaced(dy as f64 - (window - 1) as f64));
                coords.push(log_spaced(dx as f64 - (window - 1) as f64));
            }
        }
        let coords = ctx.constant(Tensor::from_f64(&[span * span, 2], &coords));
        let hidden = ctx.g.relu(&self.fc1.forward(ctx, &coords));
        let per_offset = self.fc2.forward(ctx, &hidden);
        let l = window * window;
        let mut index = Vec::with_capacity(self.heads * l * l);
        for h in 0..self.heads {
            for i in 0..l {
                for j in 0..l {
                    let dy = (i / window) as isize - (j / window) as isize + window as isize - 1;
                    let dx = (i % window) as isize - (j % window) as isize + window as isize - 1;
                    index.push((dy as usize * span + dx as usize) * self.heads + h);
                }
            }
        }
        ctx.g.gather(&per_offset, Rc::new(index), &[self.heads, l, l])
    }
}

/// Functional form of [`ContinuousBias::table`].
pub fn log_cpb<T: Real>(ctx: &Ctx<'_, T>, cpb: &ContinuousBias, window: usize) -> Var<T> {
    cpb.table(ctx, window)
}

#[derive(Clone, Debug)]
pub struct WindowAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    pub logit_scale: ParamId,
    pub cpb: ContinuousBias,
    pub heads: usize,
    tau_max_log: f64,
}

impl WindowAttention {
    pub fn new<T: Real>(scope: &mut Scope<'_, T>, dim: usize, heads: usize, cfg: &SwinConfig) -> Self {
        let mut s = scope.sub("attn");
        Self {
            q: Linear::new(&mut s, "q", dim, dim, true),
            k: Linear::new(&mut s, "k", dim, dim, false),
            v: Linear::new(&mut s, "v", dim, dim, true),
            proj: Linear::new(&mut s, "proj", dim, dim, true),
            logit_scale: s.param("logit_scale", &[heads], Init::Const(10f64.ln())),
            cpb: ContinuousBias::new(&mut s, cfg.cpb_hidden, heads),
            heads,
            tau_max_log: cfg.tau_max_log,
        }
    }

    /// `windows` is `[N * nW, w², C]`; returns the attended windows and weights.
    pub fn forward<T: Real>(
        &self,
        ctx: &Ctx<'_, T>,
        windows: &Var<T>,
        window: usize,
        mask: Option<(&Tensor<T>, usize)>,
    ) -> (Var<T>, Var<T>) {
        let g = ctx.g;
        let (nw, l, c) = (windows.dim(0), windows.dim(1), windows.dim(2));
        let hd = c / self.heads;
        let split = |x: Var<T>| g.permute(&g.reshape(&x, &[nw, l, self.heads, hd]), &[0, 2, 1, 3]);
        let q = split(self.q.forward(ctx, windows));
        let k = split(self.k.forward(ctx, windows));
        let v = split(self.v.forward(ctx, windows));
        let bias = self.cpb.table(ctx, window);
        let (weights, out) =
            scaled_cosine_attention(g, &q, &k, &v, &ctx.p(self.logit_scale), self.tau_max_log, Some(&bias), mask);
        let merged = g.reshape(&g.permute(&out, &[0, 2, 1, 3]), &[nw, l, c]);
        (self.proj.forward(ctx, &merged), weights)
    }
}

#[derive(Clone, Debug)]
pub struct SwinBlock {
    attn: WindowAttention,
    norm1: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    norm2: LayerNorm,
    pub window: usize,
    pub shift: usize,
}

impl SwinBlock {
    fn new<T: Real>(scope: &mut Scope<'_, T>, dim: usize, heads: usize, window: usize, shift: usize, cfg: &SwinConfig) -> Self {
        let hidden = dim * cfg.mlp_ratio;
        Self {
            attn: WindowAttention::new(scope, dim, heads, cfg),
            norm1: LayerNorm::new(scope, "norm1", dim),
            fc1: Linear::new(scope, "fc1", dim, hidden, true),
            fc2: Linear::new(scope, "fc2", hidden, dim, true),
            norm2: LayerNorm::new(scope, "norm2", dim),
            window,
            shift,
        }
    }

    /// `x` is `[N, H, W, C]`.
    fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let g = ctx.g;
        let (h, w) = (x.dim(1), x.dim(2));
        let (windows, mask) = window_partition(g, x, self.window, self.shift)?;
        let groups = (h / self.window) * (w / self.window);
        let (attended, _) = self.attn.forward(ctx, &windows, self.window, mask.as_ref().map(|m| (m, groups)));
        let back = window_reverse(g, &attended, h, w, self.window, self.shift)?;
        let x = g.add(x, &self.norm1.forward(ctx, &back));
        let mlp = self.fc2.forward(ctx, &g.gelu(&self.fc1.forward(ctx, &x)));
        Ok(g.add(&x, &self.norm2.forward(ctx, &mlp)))
    }
}

/// 2×2 neighbourhood concatenation followed by a 4C → 2C reduction and a norm.
#[derive(Clone, Debug)]
pub struct PatchMerge {
    reduce: Linear,
    norm: LayerNorm,
}

/// The pre-projection step of patch merging: `[N, H, W, C]` → `[N, H/2, W/2, 4C]`,
/// neighbour order (0,0), (1,0), (0,1), (1,1) as (dy, dx).
pub fn merge_neighbours<T: Real>(g: &Graph<T>, x: &Var<T>) -> Result<Var<T>> {
    let (n, h, w, c) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("patch merge needs an even grid, got {h}x{w}")));
    }
    let (h2, w2) = (h / 2, w / 2);
    let mut index = Vec::with_capacity(n * h * w * c);
    for ni in 0..n {
        for y in 0..h2 {
            for xx in 0..w2 {
                for (dy, dx) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let base = ((ni * h + 2 * y + dy) * w + 2 * xx + dx) * c;
                    index.extend(base..base + c);
                }
            }
        }
    }
    Ok(g.gather(x, Rc::new(index), &[n, h2, w2, 4 * c]))
}

impl PatchMerge {
    fn new<T: Real>(scope: &mut Scope<'_, T>, dim: usize) -> Self {
        let mut s = scope.sub("merge");
        Self { reduce: Linear::new(&mut s, "reduce", 4 * dim, 2 * dim, false), norm: LayerNorm::new(&mut s, "norm", 2 * dim) }
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let cat = merge_neighbours(ctx.g, x)?;
        Ok(self.norm.forward(ctx, &self.reduce.forward(ctx, &cat)))
    }
}

/// Functional form of [`PatchMerge::forward`].
pub fn patch_merge<T: Real>(ctx: &Ctx<'_, T>, merge: &PatchMerge, x: &Var<T>) -> Result<Var<T>> {
    merge.forward(ctx, x)
}

#[derive(Clone, Debug)]
pub struct VideoEncoder {
    pub cfg: SwinConfig,
    pub frame_size: usize,
    embed: Linear,
    embed_norm: LayerNorm,
    stages: Vec<(Option<PatchMerge>, Vec<SwinBlock>)>,
    final_norm: LayerNorm,
    head: Linear,
}

impl VideoEncoder {
    pub fn new<T: Real>(scope: &mut Scope<'_, T>, cfg: &SwinConfig, frame_size: usize) -> Result<Self> {
        cfg.validate_for(frame_size)?;
        let p = cfg.patch_size;
        let embed = Linear::new(&mut scope.sub("patch"), "proj", p * p * 3, cfg.embed_dim, true);
        let embed_norm = LayerNorm::new(&mut scope.sub("patch"), "norm", cfg.embed_dim);
        let mut grid = frame_size / p;
        let mut stages = Vec::new();
        for (s, (&depth, &heads)) in cfg.depths.iter().zip(&cfg.heads).enumerate() {
            let mut ss = scope.sub(&format!("stage{s}"));
            let merge = if s > 0 {
                grid /= 2;
                Some(PatchMerge::new(&mut ss, cfg.stage_dim(s - 1)))
            } else {
                None
            };
            let window = cfg.effective_window(grid);
            let half = if window < grid { window / 2 } else { 0 };
            let blocks = (0..depth)
                .map(|b| {
                    let shift = if b % 2 == 1 { half } else { 0 };
                    SwinBlock::new(&mut ss.sub(&format!("block{b}")), cfg.stage_dim(s), heads, window, shift, cfg)
                })
                .collect();
            stages.push((merge, blocks));
        }
        let last = cfg.stage_dim(cfg.depths.len() - 1);
        let final_norm = LayerNorm::new(scope, "norm", last);
        let head = Linear::new(scope, "head", last, cfg.out_dim, true);
        Ok(Self { cfg: cfg.clone(), frame_size, embed, embed_norm, stages, final_norm, head })
    }

    /// Stage-0 tokens `[N, grid², p*p*3]` from frames `[N, H, W, 3]`.
    fn patchify<T: Real>(&self, frames: &[T], n: usize) -> Tensor<T> {
        let (s, p) = (self.frame_size, self.cfg.patch_size);
        let grid = s / p;
        let mut out = Vec::with_capacity(frames.len());
        for ni in 0..n {
            for gy in 0..grid {
                for gx in 0..grid {
                    for py in 0..p {
                        let row = ((ni * s + gy * p + py) * s + gx * p) * 3;
                        out.extend_from_slice(&frames[row..row + p * 3]);
                    }
                }
            }
        }
        Tensor::from_vec(&[n, grid * grid, p * p * 3], out)
    }

    /// `clips` is `[B, T, H, W, 3]`; returns `[B, T, out_dim]`.
    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, clips: &Tensor<T>) -> Result<Var<T>> {
        let shape = clips.shape();
        if shape.len() != 5 || shape[2] != self.frame_size || shape[3] != self.frame_size || shape[4] != 3 {
            return Err(Error::Shape(format!(
                "video batch must be [B, T, {s}, {s}, 3], got {shape:?}",
                s = self.frame_size
            )));
        }
        let (b, t) = (shape[0], shape[1]);
        let n = b * t;
        let g = ctx.g;
        let tokens = ctx.constant(self.patchify(clips.data(), n));
        let mut x = self.embed_norm.forward(ctx, &self.embed.forward(ctx, &tokens));
        let mut grid = self.frame_size / self.cfg.patch_size;
        x = g.reshape(&x, &[n, grid, grid, self.cfg.embed_dim]);
        for (merge, blocks) in &self.stages {
            if let Some(m) = merge {
                x = m.forward(ctx, &x)?;
                grid /= 2;
            }
            for blk in blocks {
                x = blk.forward(ctx, &x)?;
            }
        }
        let c = x.dim(3);
        let flat = self.final_norm.forward(ctx, &g.reshape(&x, &[n, grid * grid, c]));
        let pooled = g.mix_rows(&flat, Rc::new(RowPlan::window_mean(grid * grid, grid * grid)));
        let emb = self.head.forward(ctx, &g.reshape(&pooled, &[n, c]));
        let emb = g.clamp(&emb, T::lit(-EMBED_CLAMP), T::lit(EMBED_CLAMP));
        Ok(g.reshape(&emb, &[b, t, self.cfg.out_dim]))
    }
}

/// Functional entry point: `encode_video(clips, ..) -> [B, T, out_dim]`.
pub fn encode_video<T: Real>(ctx: &Ctx<'_, T>, encoder: &VideoEncoder, clips: &Tensor<T>) -> Result<Var<T>> {
    encoder.forward(ctx, clips)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheckOptions};
    use crate::nn::ParamStore;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_f64(shape, &(0..n).map(|_| rng.random_range(-scale..scale)).collect::<Vec<_>>())
    }

    fn build(cfg: &SwinConfig, frame: usize, seed: u64) -> (ParamStore<f64>, VideoEncoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = VideoEncoder::new(&mut Scope::new(&mut store, &mut rng, "video"), cfg, frame).unwrap();
        (store, enc)
    }

    fn tiny() -> SwinConfig {
        SwinConfig { embed_dim: 8, depths: vec![1], heads: vec![2], window: 2, out_dim: 6, cpb_hidden: 8, ..Default::default() }
    }

    #[test]
    fn grid_arithmetic() {
        let cfg = SwinConfig::default();
        cfg.validate_for(112).unwrap();
        assert_eq!(112 / cfg.patch_size, 28);
        assert_eq!((28 / cfg.window).pow(2), 16);
        assert!(cfg.validate_for(100).is_err());
        let g = Graph::<f64>::inference();
        let x = g.constant(random(&[1, 28, 28, 3], 0, 1.0));
        let (w, mask) = window_partition(&g, &x, 7, 0).unwrap();
        assert_eq!(w.shape(), &[16, 49, 3]);
        assert!(mask.is_none());
        let merged = merge_neighbours(&g, &x).unwrap();
        assert_eq!(merged.shape(), &[1, 14, 14, 12]);
        assert!(window_partition(&g, &x, 5, 0).is_err());
        assert!(merge_neighbours(&g, &g.constant(random(&[1, 3, 4, 1], 0, 1.0))).is_err());
    }

    #[test]
    fn shifted_mask_matches_wrap_status() {
        let (h, w, win, shift) = (14, 14, 7, 3);
        let mask = shift_mask::<f64>(h, w, win, shift);
        let order = window_order(h, w, win, shift);
        let l = win * win;
        assert_eq!(mask.shape(), &[4, l * l]);
        // Independent labeling: a token may attend another iff, on each axis,
        // both or neither were wrapped around by the cyclic shift.
        let wrapped = |tok: usize| {
            let (y, x) = (tok / w, tok % w);
            (y < shift, x < shift)
        };
        let mut masked = 0;
        for win_id in 0..4 {
            for i in 0..l {
                for j in 0..l {
                    let a = order[win_id * l + i];
                    let b = order[win_id * l + j];
                    let allowed = wrapped(a) == wrapped(b);
                    let m = mask.data()[win_id * l * l + i * l + j];
                    assert_eq!(m == 0.0, allowed, "window {win_id} pair ({i},{j})");
                    if !allowed {
                        assert_eq!(m, f64::NEG_INFINITY);
                        masked += 1;
                    }
                }
            }
        }
        assert!(masked > 0);
        // Window 0 never crosses a boundary.
        assert!(mask.data()[..l * l].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cosine_attention_matches_double_loop() {
        let (heads, l, d) = (2, 5, 3);
        let g = Graph::<f64>::inference();
        let q = random(&[1, heads, l, d], 1, 1.0);
        let k = random(&[1, heads, l, d], 2, 1.0);
        let v = random(&[1, heads, l, d], 3, 1.0);
        let log_tau = Tensor::from_f64(&[heads], &[0.5, 10.0]);
        let (wts, out) = scaled_cosine_attention(
            &g,
            &g.constant(q.clone()),
            &g.constant(k.clone()),
            &g.constant(v.clone()),
            &g.constant(log_tau.clone()),
            100f64.ln(),
            None,
            None,
        );
        for h in 0..heads {
            let tau = log_tau.data()[h].min(100f64.ln()).exp();
            for i in 0..l {
                let qi = &q.data()[(h * l + i) * d..(h * l + i + 1) * d];
                let mut logits = vec![0.0; l];
                for (j, lg) in logits.iter_mut().enumerate() {
                    let kj = &k.data()[(h * l + j) * d..(h * l + j + 1) * d];
                    let dot: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                    let nq = qi.iter().map(|a| a * a).sum::<f64>().sqrt();
                    let nk = kj.iter().map(|a| a * a).sum::<f64>().sqrt();
                    *lg = tau * dot / (nq * nk);
                }
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|x| (x - mx).exp()).sum();
                let mut row_sum = 0.0;
                for c in 0..d {
                    let mut acc = 0.0;
                    for j in 0..l {
                        let wij = (logits[j] - mx).exp() / z;
                        acc += wij * v.data()[(h * l + j) * d + c];
                    }
                    assert!((out.value().data()[(h * l + i) * d + c] - acc).abs() < 1e-5);
                }
                for j in 0..l {
                    row_sum += wts.value().data()[(h * l + i) * l + j];
                }
                assert!((row_sum - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn symmetric_inputs_give_uniform_weights() {
        let g = Graph::<f64>::inference();
        let q = Tensor::full(&[1, 4, 2], 0.3);
        let k = Tensor::full(&[1, 4, 2], -0.7);
        let v = random(&[1, 4, 2], 4, 1.0);
        let (w, out) = scaled_cosine_attention(
            &g,
            &g.constant(q),
            &g.constant(k),
            &g.constant(v.clone()),
            &g.constant(Tensor::full(&[1], 1.0)),
            100f64.ln(),
            None,
            None,
        );
        assert!(w.value().data().iter().all(|&x| (x - 0.25).abs() < 1e-12));
        for c in 0..2 {
            let mean: f64 = (0..4).map(|j| v.data()[j * 2 + c]).sum::<f64>() / 4.0;
            for i in 0..4 {
                assert!((out.value().data()[i * 2 + c] - mean).abs() < 1e-12);
            }
        }
        // A single key always gets weight one; zero vectors stay finite.
        let zero = g.constant(Tensor::zeros(&[1, 1, 3]));
        let (w1, o1) =
            scaled_cosine_attention(&g, &zero, &zero, &zero, &g.constant(Tensor::full(&[1], 50.0)), 100f64.ln(), None, None);
        assert_eq!(w1.value().data(), &[1.0]);
        assert!(o1.value().all_finite());
    }

    #[test]
    fn bias_table_shape_and_coordinates() {
        assert!((log_spaced(6.0) - 0.9358).abs() < 1e-4);
        assert_eq!(log_spaced(0.0), 0.0);
        assert_eq!(log_spaced(-6.0), -log_spaced(6.0));
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cpb = ContinuousBias::new(&mut Scope::new(&mut store, &mut rng, ""), 16, 2);
        let g = Graph::inference();
        let ctx = Ctx::new(&g, &store, false);
        assert_eq!(cpb.table(&ctx, 7).shape(), &[2, 49, 49]);
        let one = cpb.table(&ctx, 1);
        assert_eq!(one.shape(), &[2, 1, 1]);
        // The single entry is the MLP evaluated at the origin.
        let origin = ctx.constant(Tensor::zeros(&[1, 2]));
        let direct = cpb.fc2.forward(&ctx, &ctx.g.relu(&cpb.fc1.forward(&ctx, &origin)));
        assert_eq!(one.value().data(), direct.value().data());
        // Diagonal entries share the zero offset.
        let t7 = cpb.table(&ctx, 7);
        assert_eq!(t7.value().data()[0], t7.value().data()[49 * 48 + 48]);
    }

    #[test]
    fn constant_grid_merges_to_repeated_channels() {
        let g = Graph::<f64>::inference();
        let x = Tensor::from_vec(&[1, 4, 4, 2], (0..32).map(|i| if i % 2 == 0 { 1.5 } else { -2.0 }).collect());
        let m = merge_neighbours(&g, &g.constant(x)).unwrap();
        assert_eq!(m.shape(), &[1, 2, 2, 8]);
        for chunk in m.value().data().chunks(2) {
            assert_eq!(chunk, &[1.5, -2.0]);
        }
    }

    #[test]
    fn full_size_embeddings_are_per_frame_and_clamped() {
        let cfg = SwinConfig { embed_dim: 8, depths: vec![1, 2], heads: vec![2, 2], out_dim: 16, cpb_hidden: 8, ..Default::default() };
        let (store, enc) = build(&cfg, 112, 0);
        let g = Graph::inference();
        let ctx = Ctx::new(&g, &store, false);
        let frame = random(&[1, 1, 112, 112, 3], 7, 0.5).map(|v| v + 0.5);
        let other = random(&[1, 1, 112, 112, 3], 8, 0.5).map(|v| v + 0.5);
        let clip = Tensor::from_vec(
            &[1, 3, 112, 112, 3],
            [frame.data(), other.data(), frame.data()].concat(),
        );
        let out = enc.forward(&ctx, &clip).unwrap();
        assert_eq!(out.shape(), &[1, 3, 16]);
        let d = out.value().data();
        assert_eq!(&d[..16], &d[32..48]);
        assert_ne!(&d[..16], &d[16..32]);
        assert!(d.iter().all(|v| v.abs() <= EMBED_CLAMP));
        assert!(enc.forward(&ctx, &Tensor::zeros(&[1, 1, 64, 64, 3])).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        for cfg in [tiny(), SwinConfig { depths: vec![2], ..tiny() }] {
            let (store, enc) = build(&cfg, 16, 1);
            let clip = random(&[1, 2, 16, 16, 3], 2, 0.5).map(|v| v + 0.5);
            let w = random(&[1, 2, 6], 3, 1.0);
            let report = check_gradients(&store, &GradCheckOptions::default(), |ctx| {
                let out = enc.forward(ctx, &clip).unwrap();
                ctx.g.sum_all(&ctx.g.mul(&out, &ctx.constant(w.clone())))
            });
            assert!(report.passed(), "{}", report.summary());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn partition_round_trip(n in 1usize..3, gw in 1usize..4, ghw in 1usize..4, half in any::<bool>(), seed in 0u64..1000) {
            let window = 4;
            let (h, w) = (ghw * window, gw * window);
            let shift = if half { window / 2 } else { 0 };
            let g = Graph::<f64>::inference();
            let x = random(&[n, h, w, 3], seed, 1.0);
            let (win, _) = window_partition(&g, &g.constant(x.clone()), window, shift).unwrap();
            let back = window_reverse(&g, &win, h, w, window, shift).unwrap();
            prop_assert_eq!(back.value(), &x);
        }

        #[test]
        fn permuting_frames_permutes_embeddings(seed in 0u64..50) {
            let (store, enc) = build(&tiny(), 16, seed);
            let g = Graph::inference();
            let ctx = Ctx::new(&g, &store, false);
            let a = random(&[1, 1, 16, 16, 3], seed + 1, 0.5);
            let b = random(&[1, 1, 16, 16, 3], seed + 2, 0.5);
            let ab = Tensor::from_vec(&[1, 2, 16, 16, 3], [a.data(), b.data()].concat());
            let ba = Tensor::from_vec(&[1, 2, 16, 16, 3], [b.data(), a.data()].concat());
            let e1 = enc.forward(&ctx, &ab).unwrap();
            let e2 = enc.forward(&ctx, &ba).unwrap();
            prop_assert_eq!(&e1.value().data()[..6], &e2.value().data()[6..]);
            prop_assert_eq!(&e1.value().data()[6..], &e2.value().data()[..6]);
        }
    }
}
