//! Parameter storage, forward-pass context and the small layers shared by every model stage.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Grads, Graph, Var, GATHER_ZERO};
use crate::tensor::{Real, Tensor};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Rc<Tensor<T>>,
    /// `false` for running statistics and other non-learned buffers.
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), index: HashMap::new() }
    }

    fn insert(&mut self, name: String, value: Tensor<T>, trainable: bool) -> ParamId {
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, value: Rc::new(value), trainable });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) {
        let e = &mut self.entries[id.0];
        assert_eq!(e.value.shape(), value.shape(), "shape change for parameter {}", e.name);
        e.value = Rc::new(value);
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Rc::make_mut(&mut self.entries[id.0].value)
    }

    /// Number of learned scalars.
    pub fn count_trainable(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.numel()).sum()
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        (0..self.entries.len()).filter(|&i| self.entries[i].trainable).map(ParamId).collect()
    }

    /// Total parameter count of entries whose name starts with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable && e.name.starts_with(prefix))
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry { name: e.name.clone(), value: Rc::new(e.value.cast()), trainable: e.trainable })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Weight initializers. Values are drawn in `f64` so `f32` and `f64`
/// builds of the same seed agree up to rounding.
#[derive(Copy, Clone, Debug)]
pub enum Init {
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanIn(usize),
    Uniform(f64),
    Const(f64),
}

/// Registers parameters under a dotted name prefix.
pub struct Scope<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Real> Scope<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng, prefix: &str) -> Self {
        Self { store, rng, prefix: prefix.to_string() }
    }

    pub fn sub(&mut self, name: &str) -> Scope<'_, T> {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        Scope { store: self.store, rng: self.rng, prefix }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect()
            }
            Init::Uniform(bound) => (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect(),
            Init::Const(c) => vec![c; n],
        };
        let name = self.full_name(name);
        self.store.insert(name, Tensor::from_f64(shape, &data), true)
    }

    pub fn buffer(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        let name = self.full_name(name);
        self.store.insert(name, value, false)
    }
}

/// Counters that instrumentation-minded tests read back.
#[derive(Default, Debug)]
pub struct Counters {
    /// Number of self-attention logits evaluated inside temporal blocks.
    pub temporal_logits: Cell<u64>,
}

/// Pending running-statistics update for one batch-norm layer.
#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
    pub count: usize,
}

/// Everything a forward pass needs: the graph, the parameters and the mode.
pub struct Ctx<'a, T> {
    pub g: &'a Graph<T>,
    params: &'a ParamStore<T>,
    bound: RefCell<Vec<Option<Var<T>>>>,
    pub training: bool,
    bn_updates: RefCell<Vec<BnUpdate<T>>>,
    pub counters: Counters,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn new(g: &'a Graph<T>, params: &'a ParamStore<T>, training: bool) -> Self {
        Self {
            g,
            params,
            bound: RefCell::new(vec![None; params.len()]),
            training,
            bn_updates: RefCell::new(Vec::new()),
            counters: Counters::default(),
        }
    }

    pub fn params(&self) -> &ParamStore<T> {
        self.params
    }

    /// The graph handle for a parameter; one leaf per parameter per graph.
    pub fn p(&self, id: ParamId) -> Var<T> {
        if let Some(v) = &self.bound.borrow()[id.0] {
            return v.clone();
        }
        let entry = self.params.entry(id);
        let v = if entry.trainable {
            self.g.leaf(entry.value.clone())
        } else {
            self.g.constant_rc(entry.value.clone())
        };
        self.bound.borrow_mut()[id.0] = Some(v.clone());
        v
    }

    pub fn buffer(&self, id: ParamId) -> &Tensor<T> {
        self.params.get(id)
    }

    pub fn record_bn(&self, update: BnUpdate<T>) {
        self.bn_updates.borrow_mut().push(update);
    }

    pub fn take_bn_updates(&self) -> Vec<BnUpdate<T>> {
        std::mem::take(&mut self.bn_updates.borrow_mut())
    }

    /// Gradient per parameter id (dense, `None` where a parameter was unused).
    pub fn param_grads(&self, grads: &mut Grads<T>) -> Vec<Option<Tensor<T>>> {
        self.bound
            .borrow()
            .iter()
            .map(|v| v.as_ref().and_then(|v| grads.take(v)))
            .collect()
    }

    pub fn constant(&self, t: Tensor<T>) -> Var<T> {
        self.g.constant(t)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real>(scope: &mut Scope<'_, T>, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        let mut s = scope.sub(name);
        let weight = s.param("weight", &[out_dim, in_dim], Init::FanIn(in_dim));
        let bias = bias.then(|| s.param("bias", &[out_dim], Init::FanIn(in_dim)));
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, x: &Var<T>) -> Var<T> {
        let w = ctx.p(self.weight);
        match self.bias {
            Some(b) => ctx.g.linear(x, &w, Some(&ctx.p(b))),
            None => ctx.g.linear(x, &w, None),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Real>(scope: &mut Scope<'_, T>, name: &str, dim: usize) -> Self {
        let mut s = scope.sub(name);
        let gamma = s.param("gamma", &[dim], Init::Const(1.0));
        let beta = s.param("beta", &[dim], Init::Const(0.0));
        Self { gamma, beta, eps: 1e-5 }
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, x: &Var<T>) -> Var<T> {
        ctx.g.layer_norm(x, &ctx.p(self.gamma), &ctx.p(self.beta), self.eps)
    }
}

/// Split `[B, T, H*hd]` into heads `[B, H, T, hd]`.
pub fn split_heads<T: Real>(g: &Graph<T>, x: &Var<T>, heads: usize) -> Var<T> {
    let (b, t, d) = (x.dim(0), x.dim(1), x.dim(2));
    let r = g.reshape(x, &[b, t, heads, d / heads]);
    g.permute(&r, &[0, 2, 1, 3])
}

/// Inverse of [`split_heads`].
pub fn merge_heads<T: Real>(g: &Graph<T>, x: &Var<T>) -> Var<T> {
    let (b, h, t, hd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let p = g.permute(x, &[0, 2, 1, 3]);
    g.reshape(&p, &[b, t, h * hd])
}

/// Standard multi-head attention with scaled dot-product logits.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Real>(scope: &mut Scope<'_, T>, name: &str, dim: usize, heads: usize) -> Self {
        assert!(heads >= 1 && dim % heads == 0, "model dim {dim} not divisible by {heads} heads");
        let mut s = scope.sub(name);
        Self {
            q: Linear::new(&mut s, "q", dim, dim, true),
            k: Linear::new(&mut s, "k", dim, dim, true),
            v: Linear::new(&mut s, "v", dim, dim, true),
            out: Linear::new(&mut s, "out", dim, dim, true),
            heads,
        }
    }

    /// Attention weights `[B, H, Tq, Tk]` and the attended output `[B, Tq, D]`.
    pub fn forward_with_weights<T: Real>(
        &self,
        ctx: &Ctx<'_, T>,
        query: &Var<T>,
        key_value: &Var<T>,
    ) -> (Var<T>, Var<T>) {
        let g = ctx.g;
        let d = query.dim(2);
        let hd = d / self.heads;
        let q = split_heads(g, &self.q.forward(ctx, query), self.heads);
        let k = split_heads(g, &self.k.forward(ctx, key_value), self.heads);
        let v = split_heads(g, &self.v.forward(ctx, key_value), self.heads);
        let logits = g.matmul(&q, &k, false, true);
        let logits = g.scale(&logits, T::lit(1.0 / (hd as f64).sqrt()));
        let weights = g.softmax(&logits);
        let attended = g.matmul(&weights, &v, false, false);
        let merged = merge_heads(g, &attended);
        (weights, self.out.forward(ctx, &merged))
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, query: &Var<T>, key_value: &Var<T>) -> Var<T> {
        self.forward_with_weights(ctx, query, key_value).1
    }
}

/// 1-D convolution over `[B, T, C]` as an im2col gather followed by a linear map.
/// The weight is `[out, kernel * in]`, kernel-major.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad).saturating_sub(kernel) / stride + 1
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        scope: &mut Scope<'_, T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let mut s = scope.sub(name);
        let fan_in = kernel * in_ch;
        let weight = s.param("weight", &[out_ch, fan_in], Init::FanIn(fan_in));
        let bias = bias.then(|| s.param("bias", &[out_ch], Init::FanIn(fan_in)));
        Self { weight, bias, in_ch, out_ch, kernel, stride, pad }
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, x: &Var<T>) -> Var<T> {
        let (b, t, c) = (x.dim(0), x.dim(1), x.dim(2));
        assert_eq!(c, self.in_ch, "conv input channels");
        let cols = if self.kernel == 1 && self.stride == 1 && self.pad == 0 {
            x.clone()
        } else {
            let tout = conv_out_len(t, self.kernel, self.stride, self.pad);
            let mut index = Vec::with_capacity(b * tout * self.kernel * c);
            for bi in 0..b {
                for to in 0..tout {
                    for k in 0..self.kernel {
                        let pos = (to * self.stride + k) as isize - self.pad as isize;
                        for ci in 0..c {
                            index.push(if pos >= 0 && (pos as usize) < t {
                                (bi * t + pos as usize) * c + ci
                            } else {
                                GATHER_ZERO
                            });
                        }
                    }
                }
            }
            ctx.g.gather(x, Rc::new(index), &[b, tout, self.kernel * c])
        };
        let w = ctx.p(self.weight);
        match self.bias {
            Some(bias) => ctx.g.linear(&cols, &w, Some(&ctx.p(bias))),
            None => ctx.g.linear(&cols, &w, None),
        }
    }
}

/// Batch normalization over every row of the last (channel) axis.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new<T: Real>(scope: &mut Scope<'_, T>, name: &str, dim: usize, eps: f64) -> Self {
        let mut s = scope.sub(name);
        Self {
            gamma: s.param("gamma", &[dim], Init::Const(1.0)),
            beta: s.param("beta", &[dim], Init::Const(0.0)),
            running_mean: s.buffer("running_mean", Tensor::zeros(&[dim])),
            running_var: s.buffer("running_var", Tensor::ones(&[dim])),
            eps,
        }
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, x: &Var<T>) -> Var<T> {
        let (gamma, beta) = (ctx.p(self.gamma), ctx.p(self.beta));
        if ctx.training {
            let (y, mean, var) = ctx.g.batch_norm_train(x, &gamma, &beta, self.eps);
            let count = x.value().numel() / x.shape()[x.shape().len() - 1];
            ctx.record_bn(BnUpdate {
                mean_id: self.running_mean,
                var_id: self.running_var,
                batch_mean: mean,
                batch_var: var,
                count,
            });
            y
        } else {
            let (m, v) = (ctx.buffer(self.running_mean), ctx.buffer(self.running_var));
            ctx.g.batch_norm_eval(x, &gamma, &beta, m.data(), v.data(), self.eps)
        }
    }
}

/// Fold pending batch statistics into the running buffers (unbiased variance).
pub fn apply_bn_updates<T: Real>(params: &mut ParamStore<T>, updates: &[BnUpdate<T>], momentum: f64) {
    let m = T::lit(momentum);
    for u in updates {
        let correction = if u.count > 1 { T::lit(u.count as f64 / (u.count - 1) as f64) } else { T::one() };
        let rm = params.get_mut(u.mean_id);
        for (r, &b) in rm.data_mut().iter_mut().zip(&u.batch_mean) {
            *r = (T::one() - m) * *r + m * b;
        }
        let rv = params.get_mut(u.var_id);
        for (r, &b) in rv.data_mut().iter_mut().zip(&u.batch_var) {
            *r = (T::one() - m) * *r + m * b * correction;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn scope_names_nest_and_init_is_seeded() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut root = Scope::new(&mut store, &mut rng, "enc");
        let lin = Linear::new(&mut root.sub("block0"), "proj", 4, 3, true);
        assert_eq!(store.entry(lin.weight).name, "enc.block0.proj.weight");
        assert_eq!(store.count_trainable(), 4 * 3 + 3);
        let bound = 0.5f32;
        assert!(store.get(lin.weight).data().iter().all(|v| v.abs() <= bound));

        let mut store2 = ParamStore::<f32>::new();
        let mut rng2 = ChaCha8Rng::seed_from_u64(1);
        let lin2 = Linear::new(&mut Scope::new(&mut store2, &mut rng2, "enc").sub("block0"), "proj", 4, 3, true);
        assert_eq!(store.get(lin.weight), store2.get(lin2.weight));
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mha = MultiHeadAttention::new(&mut Scope::new(&mut store, &mut rng, ""), "mha", 8, 2);
        let g = Graph::inference();
        let ctx = Ctx::new(&g, &store, false);
        let x = g.constant(Tensor::from_f64(&[1, 5, 8], &(0..40).map(|v| (v as f64 * 0.37).sin()).collect::<Vec<_>>()));
        let y = g.constant(Tensor::from_f64(&[1, 3, 8], &(0..24).map(|v| (v as f64 * 0.11).cos()).collect::<Vec<_>>()));
        let (w, out) = mha.forward_with_weights(&ctx, &x, &y);
        assert_eq!(w.shape(), &[1, 2, 5, 3]);
        assert_eq!(out.shape(), &[1, 5, 8]);
        for row in w.value().data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
