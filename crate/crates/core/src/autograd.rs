//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records one backward closure per operation. Values live in
//! reference-counted tensors held by [`Var`] handles; when recording is off
//! (inference) no closures are stored and intermediates are freed as soon as
//! their handles drop.

use std::cell::RefCell;
use std::rc::Rc;

use crate::tensor::{gemm, inverse_permutation, permute_data, MatView, Real, Tensor};

type Backward<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    parents: Vec<Option<usize>>,
    backward: Option<Backward<T>>,
}

#[derive(Clone)]
pub struct Var<T> {
    value: Rc<Tensor<T>>,
    id: Option<usize>,
}

impl<T: Real> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.value.dim(axis)
    }

    pub fn requires_grad(&self) -> bool {
        self.id.is_some()
    }

    pub fn id(&self) -> Option<usize> {
        self.id
    }
}

/// Mixing plan along the time axis of a `[B, T, D]` tensor: output row `i` is
/// `sum_k w_k * x[src_k]` over the entries of `rows[i]`.
#[derive(Clone, Debug)]
pub struct RowPlan<T> {
    pub in_len: usize,
    pub rows: Vec<Vec<(usize, T)>>,
}

impl<T: Real> RowPlan<T> {
    pub fn out_len(&self) -> usize {
        self.rows.len()
    }

    /// Endpoint-aligned linear interpolation from `in_len` to `out_len` frames.
    pub fn linear_interp(in_len: usize, out_len: usize) -> Self {
        assert!(in_len >= 1 && out_len >= 1, "interpolation needs non-empty sequences");
        let rows = (0..out_len)
            .map(|i| {
                if in_len == out_len {
                    return vec![(i, T::one())];
                }
                if out_len == 1 || in_len == 1 {
                    return vec![(0, T::one())];
                }
                let pos = i as f64 * (in_len - 1) as f64 / (out_len - 1) as f64;
                let lo = (pos.floor() as usize).min(in_len - 1);
                let hi = (lo + 1).min(in_len - 1);
                let frac = pos - lo as f64;
                if hi == lo || frac == 0.0 {
                    vec![(lo, T::one())]
                } else {
                    vec![(lo, T::lit(1.0 - frac)), (hi, T::lit(frac))]
                }
            })
            .collect();
        Self { in_len, rows }
    }

    /// Non-overlapping window mean; the final partial window averages what it has.
    pub fn window_mean(in_len: usize, factor: usize) -> Self {
        assert!(factor >= 1, "window factor must be positive");
        let out_len = in_len.div_ceil(factor);
        let rows = (0..out_len)
            .map(|i| {
                let start = i * factor;
                let end = (start + factor).min(in_len);
                let w = T::lit(1.0 / (end - start) as f64);
                (start..end).map(|j| (j, w)).collect()
            })
            .collect();
        Self { in_len, rows }
    }

    /// Frame `i` of the output copies input frame `i / factor`.
    pub fn repeat(in_len: usize, factor: usize) -> Self {
        let rows = (0..in_len * factor).map(|i| vec![(i / factor, T::one())]).collect();
        Self { in_len, rows }
    }

    /// Copy the first `min(in_len, out_len)` frames; missing frames are zero.
    pub fn pad_or_truncate(in_len: usize, out_len: usize) -> Self {
        let rows = (0..out_len)
            .map(|i| if i < in_len { vec![(i, T::one())] } else { Vec::new() })
            .collect();
        Self { in_len, rows }
    }

    /// Pick frames `offset, offset + stride, ...`; out-of-range picks are zero.
    pub fn strided_pick(in_len: usize, offset: usize, stride: usize, out_len: usize) -> Self {
        let rows = (0..out_len)
            .map(|i| {
                let j = offset + i * stride;
                if j < in_len {
                    vec![(j, T::one())]
                } else {
                    Vec::new()
                }
            })
            .collect();
        Self { in_len, rows }
    }
}

/// Sentinel index for [`Graph::gather`]: the output element is zero.
pub const GATHER_ZERO: usize = usize::MAX;

pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
    record: bool,
}

pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: &Var<T>) -> Option<&Tensor<T>> {
        v.id.and_then(|id| self.grads.get(id).and_then(|g| g.as_ref()))
    }

    pub fn take(&mut self, v: &Var<T>) -> Option<Tensor<T>> {
        v.id.and_then(|id| self.grads.get_mut(id).and_then(|g| g.take()))
    }
}

fn rows_of(shape: &[usize]) -> (usize, usize) {
    let d = *shape.last().expect("row op on a scalar");
    let n: usize = shape.iter().product();
    (if d == 0 { 0 } else { n / d }, d)
}

impl<T: Real> Graph<T> {
    /// A graph that records operations for differentiation.
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), record: true }
    }

    /// A graph that records nothing.
    pub fn inference() -> Self {
        Self { nodes: RefCell::new(Vec::new()), record: false }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn constant(&self, t: Tensor<T>) -> Var<T> {
        Var { value: Rc::new(t), id: None }
    }

    pub fn constant_rc(&self, t: Rc<Tensor<T>>) -> Var<T> {
        Var { value: t, id: None }
    }

    /// A differentiable input.
    pub fn leaf(&self, t: Rc<Tensor<T>>) -> Var<T> {
        if !self.record {
            return Var { value: t, id: None };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { parents: Vec::new(), backward: None });
        Var { value: t, id: Some(nodes.len() - 1) }
    }

    fn op(
        &self,
        value: Tensor<T>,
        parents: &[&Var<T>],
        backward: impl Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var<T> {
        if !self.record || parents.iter().all(|p| p.id.is_none()) {
            return Var { value: Rc::new(value), id: None };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            parents: parents.iter().map(|p| p.id).collect(),
            backward: Some(Box::new(backward)),
        });
        Var { value: Rc::new(value), id: Some(nodes.len() - 1) }
    }

    /// Gradients of a scalar `loss` with respect to every recorded node.
    pub fn backward(&self, loss: &Var<T>) -> Grads<T> {
        assert_eq!(loss.value.numel(), 1, "backward needs a scalar loss");
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        let Some(root) = loss.id else {
            return Grads { grads };
        };
        grads[root] = Some(Tensor::full(loss.value.shape(), T::one()));
        for id in (0..=root).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(|p| p.is_some()).collect();
            let parent_grads = backward(&g, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (pid, pg) in node.parents.iter().zip(parent_grads) {
                if let (Some(pid), Some(pg)) = (pid, pg) {
                    match &mut grads[*pid] {
                        Some(acc) => acc.add_assign(&pg),
                        slot => *slot = Some(pg),
                    }
                }
            }
        }
        Grads { grads }
    }

    // ---- elementwise ----

    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Var<T> {
        let out = a.value.zip_map(&b.value, |x, y| x + y);
        self.op(out, &[a, b], |g, _| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(&self, a: &Var<T>, b: &Var<T>) -> Var<T> {
        let out = a.value.zip_map(&b.value, |x, y| x - y);
        self.op(out, &[a, b], |g, _| vec![Some(g.clone()), Some(g.map(|v| -v))])
    }

    pub fn mul(&self, a: &Var<T>, b: &Var<T>) -> Var<T> {
        let out = a.value.zip_map(&b.value, |x, y| x * y);
        let (av, bv) = (a.value.clone(), b.value.clone());
        self.op(out, &[a, b], move |g, needs| {
            vec![
                needs[0].then(|| g.zip_map(&bv, |g, y| g * y)),
                needs[1].then(|| g.zip_map(&av, |g, x| g * x)),
            ]
        })
    }

    pub fn scale(&self, a: &Var<T>, c: T) -> Var<T> {
        let out = a.value.map(|x| x * c);
        self.op(out, &[a], move |g, _| vec![Some(g.map(|v| v * c))])
    }

    /// Sum of several equally shaped tensors.
    pub fn add_n(&self, parts: &[Var<T>]) -> Var<T> {
        assert!(!parts.is_empty(), "add_n of nothing");
        let mut acc = (*parts[0].value).clone();
        for p in &parts[1..] {
            acc.add_assign(&p.value);
        }
        let refs: Vec<&Var<T>> = parts.iter().collect();
        let n = parts.len();
        self.op(acc, &refs, move |g, _| (0..n).map(|_| Some(g.clone())).collect())
    }

    fn unary(
        &self,
        a: &Var<T>,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Var<T> {
        let out = a.value.map(f);
        let x = a.value.clone();
        let y = Rc::new(out.clone());
        let y_keep = y.clone();
        self.op(out, &[a], move |g, _| {
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .zip(y_keep.data())
                .map(|((&g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(Tensor::from_vec(g.shape(), data))]
        })
    }

    pub fn relu(&self, a: &Var<T>) -> Var<T> {
        self.unary(
            a,
            |x| if x > T::zero() { x } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn tanh(&self, a: &Var<T>) -> Var<T> {
        self.unary(a, |x| x.tanh(), |_, y| T::one() - y * y)
    }

    pub fn sigmoid(&self, a: &Var<T>) -> Var<T> {
        self.unary(a, sigmoid, |_, y| y * (T::one() - y))
    }

    /// `x * sigmoid(x)`.
    pub fn swish(&self, a: &Var<T>) -> Var<T> {
        self.unary(
            a,
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            },
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self, a: &Var<T>) -> Var<T> {
        let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
        let k = T::lit(0.044715);
        let half = T::lit(0.5);
        let three = T::lit(3.0);
        self.unary(
            a,
            move |x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()),
            move |x, _| {
                let u = c * (x + k * x * x * x);
                let t = u.tanh();
                let du = c * (T::one() + three * k * x * x);
                half * (T::one() + t) + half * x * (T::one() - t * t) * du
            },
        )
    }

    pub fn exp(&self, a: &Var<T>) -> Var<T> {
        self.unary(a, |x| x.exp(), |_, y| y)
    }

    /// Elementwise clamp; the gradient is zero where the bound is active.
    pub fn clamp(&self, a: &Var<T>, lo: T, hi: T) -> Var<T> {
        self.unary(
            a,
            move |x| x.max(lo).min(hi),
            move |x, _| if x < lo || x > hi { T::zero() } else { T::one() },
        )
    }

    // ---- broadcasting ----

    /// `x + b` with `b` broadcast over every row of the last axis.
    pub fn add_row(&self, x: &Var<T>, b: &Var<T>) -> Var<T> {
        let (_, d) = rows_of(x.shape());
        assert_eq!(b.value.numel(), d, "add_row: bias length mismatch");
        let mut out = (*x.value).clone();
        for row in out.data_mut().chunks_mut(d) {
            for (v, &bb) in row.iter_mut().zip(b.value.data()) {
                *v += bb;
            }
        }
        let b_shape = b.shape().to_vec();
        self.op(out, &[x, b], move |g, needs| {
            let db = needs[1].then(|| {
                let mut acc = vec![T::zero(); d];
                for row in g.data().chunks(d) {
                    for (a, &v) in acc.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                Tensor::from_vec(&b_shape, acc)
            });
            vec![Some(g.clone()), db]
        })
    }

    /// `x * s` with `s` broadcast over every row of the last axis.
    pub fn mul_row(&self, x: &Var<T>, s: &Var<T>) -> Var<T> {
        let (_, d) = rows_of(x.shape());
        assert_eq!(s.value.numel(), d, "mul_row: scale length mismatch");
        let mut out = (*x.value).clone();
        for row in out.data_mut().chunks_mut(d) {
            for (v, &ss) in row.iter_mut().zip(s.value.data()) {
                *v *= ss;
            }
        }
        let (xv, sv) = (x.value.clone(), s.value.clone());
        let s_shape = s.shape().to_vec();
        self.op(out, &[x, s], move |g, needs| {
            let dx = needs[0].then(|| {
                let mut dx = g.clone();
                for row in dx.data_mut().chunks_mut(d) {
                    for (v, &ss) in row.iter_mut().zip(sv.data()) {
                        *v *= ss;
                    }
                }
                dx
            });
            let ds = needs[1].then(|| {
                let mut acc = vec![T::zero(); d];
                for (grow, xrow) in g.data().chunks(d).zip(xv.data().chunks(d)) {
                    for ((a, &gv), &xx) in acc.iter_mut().zip(grow).zip(xrow) {
                        *a += gv * xx;
                    }
                }
                Tensor::from_vec(&s_shape, acc)
            });
            vec![dx, ds]
        })
    }

    /// `x + y` where `x` has shape `[N, ..y.shape]`.
    pub fn add_outer(&self, x: &Var<T>, y: &Var<T>) -> Var<T> {
        let inner = y.value.numel();
        assert_eq!(&x.shape()[x.value.ndim() - y.value.ndim()..], y.shape(), "add_outer shape mismatch");
        let mut out = (*x.value).clone();
        for chunk in out.data_mut().chunks_mut(inner) {
            for (v, &yy) in chunk.iter_mut().zip(y.value.data()) {
                *v += yy;
            }
        }
        let y_shape = y.shape().to_vec();
        self.op(out, &[x, y], move |g, needs| {
            let dy = needs[1].then(|| {
                let mut acc = vec![T::zero(); inner];
                for chunk in g.data().chunks(inner) {
                    for (a, &v) in acc.iter_mut().zip(chunk) {
                        *a += v;
                    }
                }
                Tensor::from_vec(&y_shape, acc)
            });
            vec![Some(g.clone()), dy]
        })
    }

    /// Add a constant mask `[groups, M]` to `x` viewed as `[outer, groups, inner_rep, M]`:
    /// element `(o, grp, r, m)` receives `mask[grp, m]`.
    pub fn add_group_mask(&self, x: &Var<T>, mask: &Tensor<T>, groups: usize, inner_rep: usize) -> Var<T> {
        let m = mask.numel() / groups;
        assert_eq!(mask.numel(), groups * m, "mask size");
        let block = groups * inner_rep * m;
        assert_eq!(x.value.numel() % block, 0, "add_group_mask shape mismatch");
        let mut out = (*x.value).clone();
        for chunk in out.data_mut().chunks_mut(block) {
            for grp in 0..groups {
                let mrow = &mask.data()[grp * m..(grp + 1) * m];
                for r in 0..inner_rep {
                    let base = (grp * inner_rep + r) * m;
                    for (v, &mv) in chunk[base..base + m].iter_mut().zip(mrow) {
                        *v += mv;
                    }
                }
            }
        }
        self.op(out, &[x], |g, _| vec![Some(g.clone())])
    }

    /// Multiply `x` viewed as `[outer, H, inner]` by `s[h]`.
    pub fn scale_heads(&self, x: &Var<T>, s: &Var<T>, heads_axis: usize) -> Var<T> {
        let h = s.value.numel();
        assert_eq!(x.shape()[heads_axis], h, "scale_heads: head count mismatch");
        let inner: usize = x.shape()[heads_axis + 1..].iter().product();
        let mut out = (*x.value).clone();
        for (ci, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let sv = s.value.data()[ci % h];
            chunk.iter_mut().for_each(|v| *v *= sv);
        }
        let (xv, sv) = (x.value.clone(), s.value.clone());
        let s_shape = s.shape().to_vec();
        self.op(out, &[x, s], move |g, needs| {
            let dx = needs[0].then(|| {
                let mut dx = g.clone();
                for (ci, chunk) in dx.data_mut().chunks_mut(inner).enumerate() {
                    let s = sv.data()[ci % h];
                    chunk.iter_mut().for_each(|v| *v *= s);
                }
                dx
            });
            let ds = needs[1].then(|| {
                let mut acc = vec![T::zero(); h];
                for (ci, (gc, xc)) in g.data().chunks(inner).zip(xv.data().chunks(inner)).enumerate() {
                    acc[ci % h] += gc.iter().zip(xc).map(|(&a, &b)| a * b).sum::<T>();
                }
                Tensor::from_vec(&s_shape, acc)
            });
            vec![dx, ds]
        })
    }

    // ---- linear algebra ----

    /// Batched matrix product. `a` is `[.., M, K]` (or `[.., K, M]` when
    /// `trans_a`); `b` is either a shared 2-D matrix or carries the same batch.
    pub fn matmul(&self, a: &Var<T>, b: &Var<T>, trans_a: bool, trans_b: bool) -> Var<T> {
        let an = a.value.ndim();
        let bn = b.value.ndim();
        assert!(an >= 2 && bn >= 2, "matmul needs matrices");
        let (ar, ac) = (a.shape()[an - 2], a.shape()[an - 1]);
        let (br, bc) = (b.shape()[bn - 2], b.shape()[bn - 1]);
        let batch: usize = a.shape()[..an - 2].iter().product();
        let b_batch: usize = b.shape()[..bn - 2].iter().product();
        let shared_b = bn == 2;
        assert!(shared_b || b_batch == batch, "matmul batch mismatch");
        let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
        assert_eq!(k, k2, "matmul inner dim mismatch {:?} x {:?}", a.shape(), b.shape());
        let mut out_shape = a.shape()[..an - 2].to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![T::zero(); batch * m * n];
        let (asz, bsz) = (ar * ac, br * bc);
        {
            let (ad, bd) = (a.value.data(), b.value.data());
            for i in 0..batch {
                let bs = if shared_b { 0 } else { i * bsz };
                gemm(
                    MatView::new(&ad[i * asz..(i + 1) * asz], ar, ac, trans_a),
                    MatView::new(&bd[bs..bs + bsz], br, bc, trans_b),
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        let (av, bv) = (a.value.clone(), b.value.clone());
        let (a_shape, b_shape) = (a.shape().to_vec(), b.shape().to_vec());
        self.op(Tensor::from_vec(&out_shape, out), &[a, b], move |g, needs| {
            let gd = g.data();
            let (ad, bd) = (av.data(), bv.data());
            let da = needs[0].then(|| {
                let mut da = vec![T::zero(); batch * asz];
                for i in 0..batch {
                    let bs = if shared_b { 0 } else { i * bsz };
                    let gv = MatView::new(&gd[i * m * n..(i + 1) * m * n], m, n, false);
                    let bview = &bd[bs..bs + bsz];
                    let dst = &mut da[i * asz..(i + 1) * asz];
                    if !trans_a {
                        // dA = G op(B)^T
                        gemm(gv, MatView::new(bview, br, bc, !trans_b), dst, false);
                    } else {
                        // dA = op(B) G^T
                        gemm(MatView::new(bview, br, bc, trans_b), MatView::new(gv.data, m, n, true), dst, false);
                    }
                }
                Tensor::from_vec(&a_shape, da)
            });
            let db = needs[1].then(|| {
                let mut db = vec![T::zero(); b_batch.max(1) * bsz];
                for i in 0..batch {
                    let bs = if shared_b { 0 } else { i * bsz };
                    let gv = MatView::new(&gd[i * m * n..(i + 1) * m * n], m, n, false);
                    let aview = &ad[i * asz..(i + 1) * asz];
                    let dst = &mut db[bs..bs + bsz];
                    let acc = shared_b && i > 0;
                    if !trans_b {
                        // dB = op(A)^T G
                        gemm(MatView::new(aview, ar, ac, !trans_a), gv, dst, acc);
                    } else {
                        // dB = G^T op(A)
                        gemm(MatView::new(gv.data, m, n, true), MatView::new(aview, ar, ac, trans_a), dst, acc);
                    }
                }
                Tensor::from_vec(&b_shape, db)
            });
            vec![da, db]
        })
    }

    /// `x @ w^T + b` over the last axis; `w` is `[out, in]`.
    pub fn linear(&self, x: &Var<T>, w: &Var<T>, b: Option<&Var<T>>) -> Var<T> {
        let (rows, din) = rows_of(x.shape());
        assert_eq!(w.value.ndim(), 2, "linear weight must be 2-D");
        let dout = w.shape()[0];
        assert_eq!(w.shape()[1], din, "linear: input width {din} vs weight {:?}", w.shape());
        let mut out_shape = x.shape().to_vec();
        *out_shape.last_mut().unwrap() = dout;
        let mut out = vec![T::zero(); rows * dout];
        gemm(
            MatView::new(x.value.data(), rows, din, false),
            MatView::new(w.value.data(), dout, din, true),
            &mut out,
            false,
        );
        if let Some(b) = b {
            assert_eq!(b.value.numel(), dout, "linear bias length");
            for row in out.chunks_mut(dout) {
                for (v, &bb) in row.iter_mut().zip(b.value.data()) {
                    *v += bb;
                }
            }
        }
        let (xv, wv) = (x.value.clone(), w.value.clone());
        let (x_shape, w_shape) = (x.shape().to_vec(), w.shape().to_vec());
        let mut parents = vec![x, w];
        if let Some(b) = b {
            parents.push(b);
        }
        let has_b = b.is_some();
        self.op(Tensor::from_vec(&out_shape, out), &parents, move |g, needs| {
            let gd = g.data();
            let dx = needs[0].then(|| {
                let mut dx = vec![T::zero(); rows * din];
                gemm(
                    MatView::new(gd, rows, dout, false),
                    MatView::new(wv.data(), dout, din, false),
                    &mut dx,
                    false,
                );
                Tensor::from_vec(&x_shape, dx)
            });
            let dw = needs[1].then(|| {
                let mut dw = vec![T::zero(); dout * din];
                gemm(
                    MatView::new(gd, rows, dout, true),
                    MatView::new(xv.data(), rows, din, false),
                    &mut dw,
                    false,
                );
                Tensor::from_vec(&w_shape, dw)
            });
            let mut res = vec![dx, dw];
            if has_b {
                res.push(needs[2].then(|| {
                    let mut acc = vec![T::zero(); dout];
                    for row in gd.chunks(dout) {
                        for (a, &v) in acc.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    Tensor::from_vec(&[dout], acc)
                }));
            }
            res
        })
    }

    // ---- normalization ----

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, x: &Var<T>, gamma: &Var<T>, beta: &Var<T>, eps: f64) -> Var<T> {
        let (rows, d) = rows_of(x.shape());
        assert_eq!(gamma.value.numel(), d, "layer_norm gamma length");
        assert_eq!(beta.value.numel(), d, "layer_norm beta length");
        let eps = T::lit(eps);
        let dn = T::lit(d as f64);
        let mut xhat = vec![T::zero(); rows * d];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let row = &x.value.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let istd = T::one() / (var + eps).sqrt();
            inv_std[r] = istd;
            for j in 0..d {
                let h = (row[j] - mean) * istd;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gamma.value.data()[j] + beta.value.data()[j];
            }
        }
        let gv = gamma.value.clone();
        let shape = x.shape().to_vec();
        self.op(Tensor::from_vec(&shape.clone(), out), &[x, gamma, beta], move |g, needs| {
            let gd = g.data();
            let gam = gv.data();
            let dx = needs[0].then(|| {
                let mut dx = vec![T::zero(); rows * d];
                for r in 0..rows {
                    let gr = &gd[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut sum_gh = T::zero();
                    let mut sum_ghx = T::zero();
                    for j in 0..d {
                        let gh = gr[j] * gam[j];
                        sum_gh += gh;
                        sum_ghx += gh * hr[j];
                    }
                    for j in 0..d {
                        let gh = gr[j] * gam[j];
                        dx[r * d + j] = inv_std[r] * (gh - sum_gh / dn - hr[j] * sum_ghx / dn);
                    }
                }
                Tensor::from_vec(&shape, dx)
            });
            let (dgamma, dbeta) = if needs[1] || needs[2] {
                let mut dgam = vec![T::zero(); d];
                let mut dbet = vec![T::zero(); d];
                for r in 0..rows {
                    for j in 0..d {
                        dgam[j] += gd[r * d + j] * xhat[r * d + j];
                        dbet[j] += gd[r * d + j];
                    }
                }
                (
                    needs[1].then(|| Tensor::from_vec(&[d], dgam)),
                    needs[2].then(|| Tensor::from_vec(&[d], dbet)),
                )
            } else {
                (None, None)
            };
            vec![dx, dgamma, dbeta]
        })
    }

    /// Batch normalization over all rows of the last (channel) axis using the
    /// batch's own statistics. Returns the output and the per-channel
    /// (mean, biased variance) used.
    pub fn batch_norm_train(
        &self,
        x: &Var<T>,
        gamma: &Var<T>,
        beta: &Var<T>,
        eps: f64,
    ) -> (Var<T>, Vec<T>, Vec<T>) {
        let (rows, c) = rows_of(x.shape());
        let n = T::lit(rows as f64);
        let eps = T::lit(eps);
        let xd = x.value.data();
        let mut mean = vec![T::zero(); c];
        for row in xd.chunks(c) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m = *m / n);
        let mut var = vec![T::zero(); c];
        for row in xd.chunks(c) {
            for j in 0..c {
                let dlt = row[j] - mean[j];
                var[j] += dlt * dlt;
            }
        }
        var.iter_mut().for_each(|v| *v = *v / n);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); rows * c];
        let mut out = vec![T::zero(); rows * c];
        for r in 0..rows {
            for j in 0..c {
                let h = (xd[r * c + j] - mean[j]) * inv_std[j];
                xhat[r * c + j] = h;
                out[r * c + j] = h * gamma.value.data()[j] + beta.value.data()[j];
            }
        }
        let gv = gamma.value.clone();
        let shape = x.shape().to_vec();
        let istd = inv_std.clone();
        let y = self.op(Tensor::from_vec(&shape.clone(), out), &[x, gamma, beta], move |g, needs| {
            let gd = g.data();
            let gam = gv.data();
            let mut sum_g = vec![T::zero(); c];
            let mut sum_gh = vec![T::zero(); c];
            for r in 0..rows {
                for j in 0..c {
                    sum_g[j] += gd[r * c + j];
                    sum_gh[j] += gd[r * c + j] * xhat[r * c + j];
                }
            }
            let dx = needs[0].then(|| {
                let mut dx = vec![T::zero(); rows * c];
                for r in 0..rows {
                    for j in 0..c {
                        let i = r * c + j;
                        dx[i] = gam[j] * istd[j] * (gd[i] - sum_g[j] / n - xhat[i] * sum_gh[j] / n);
                    }
                }
                Tensor::from_vec(&shape, dx)
            });
            vec![
                dx,
                needs[1].then(|| Tensor::from_vec(&[c], sum_gh.clone())),
                needs[2].then(|| Tensor::from_vec(&[c], sum_g.clone())),
            ]
        });
        (y, mean, var)
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &self,
        x: &Var<T>,
        gamma: &Var<T>,
        beta: &Var<T>,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Var<T> {
        let c = running_mean.len();
        let eps = T::lit(eps);
        let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let istd = self.constant(Tensor::from_vec(&[c], inv_std));
        let neg_mean = self.constant(Tensor::from_vec(&[c], running_mean.iter().map(|&m| -m).collect()));
        let centered = self.add_row(x, &neg_mean);
        let xhat = self.mul_row(&centered, &istd);
        let scaled = self.mul_row(&xhat, gamma);
        self.add_row(&scaled, beta)
    }

    /// `x / max(||x||, eps)` over the last axis.
    pub fn l2_normalize(&self, x: &Var<T>, eps: f64) -> Var<T> {
        let (rows, d) = rows_of(x.shape());
        let eps = T::lit(eps);
        let xd = x.value.data();
        let mut out = vec![T::zero(); rows * d];
        let mut norms = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let nrm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            norms[r] = nrm;
            let denom = nrm.max(eps);
            for j in 0..d {
                out[r * d + j] = row[j] / denom;
            }
        }
        let yv = Rc::new(Tensor::from_vec(x.shape(), out.clone()));
        let shape = x.shape().to_vec();
        self.op(Tensor::from_vec(&shape.clone(), out), &[x], move |g, _| {
            let gd = g.data();
            let y = yv.data();
            let mut dx = vec![T::zero(); rows * d];
            for r in 0..rows {
                let gr = &gd[r * d..(r + 1) * d];
                let yr = &y[r * d..(r + 1) * d];
                if norms[r] > eps {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        dx[r * d + j] = (gr[j] - yr[j] * dot) / norms[r];
                    }
                } else {
                    for j in 0..d {
                        dx[r * d + j] = gr[j] / eps;
                    }
                }
            }
            vec![Some(Tensor::from_vec(&shape, dx))]
        })
    }

    /// Softmax over the last axis. `-inf` logits receive zero weight.
    pub fn softmax(&self, x: &Var<T>) -> Var<T> {
        let (rows, d) = rows_of(x.shape());
        let mut out = (*x.value).clone();
        for row in out.data_mut().chunks_mut(d) {
            softmax_in_place(row);
        }
        let yv = Rc::new(out.clone());
        self.op(out, &[x], move |g, _| {
            let mut dx = g.clone();
            for (dr, yr) in dx.data_mut().chunks_mut(d).zip(yv.data().chunks(d)) {
                let dot: T = dr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for (dv, &yy) in dr.iter_mut().zip(yr) {
                    *dv = yy * (*dv - dot);
                }
            }
            let _ = rows;
            vec![Some(dx)]
        })
    }

    // ---- structure ----

    pub fn reshape(&self, x: &Var<T>, shape: &[usize]) -> Var<T> {
        let old = x.shape().to_vec();
        let out = (*x.value).clone().reshaped(shape);
        self.op(out, &[x], move |g, _| vec![Some(g.clone().reshaped(&old))])
    }

    pub fn permute(&self, x: &Var<T>, perm: &[usize]) -> Var<T> {
        let out = permute_data(&x.value, perm);
        let inv = inverse_permutation(perm);
        self.op(out, &[x], move |g, _| vec![Some(permute_data(g, &inv))])
    }

    /// Concatenate along `axis`.
    pub fn concat(&self, parts: &[&Var<T>], axis: usize) -> Var<T> {
        assert!(!parts.is_empty(), "concat of nothing");
        let base = parts[0].shape().to_vec();
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let sizes: Vec<usize> = parts
            .iter()
            .map(|p| {
                assert_eq!(p.value.ndim(), base.len(), "concat rank mismatch");
                for (ax, (&a, &b)) in p.shape().iter().zip(&base).enumerate() {
                    assert!(ax == axis || a == b, "concat shape mismatch {:?} vs {:?}", p.shape(), base);
                }
                p.shape()[axis]
            })
            .collect();
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &s) in parts.iter().zip(&sizes) {
                let chunk = s * inner;
                out.extend_from_slice(&p.value.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let part_shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape().to_vec()).collect();
        self.op(Tensor::from_vec(&shape, out), parts, move |g, needs| {
            let gd = g.data();
            let mut offset = 0;
            let mut res = Vec::with_capacity(sizes.len());
            for (pi, &s) in sizes.iter().enumerate() {
                if needs[pi] {
                    let chunk = s * inner;
                    let mut d = Vec::with_capacity(outer * chunk);
                    for o in 0..outer {
                        let start = o * total * inner + offset * inner;
                        d.extend_from_slice(&gd[start..start + chunk]);
                    }
                    res.push(Some(Tensor::from_vec(&part_shapes[pi], d)));
                } else {
                    res.push(None);
                }
                offset += s;
            }
            res
        })
    }

    /// `out[i] = x[index[i]]` on flattened data; [`GATHER_ZERO`] yields zero.
    pub fn gather(&self, x: &Var<T>, index: Rc<Vec<usize>>, out_shape: &[usize]) -> Var<T> {
        assert_eq!(index.len(), out_shape.iter().product::<usize>(), "gather index length");
        let xd = x.value.data();
        let out: Vec<T> = index
            .iter()
            .map(|&i| if i == GATHER_ZERO { T::zero() } else { xd[i] })
            .collect();
        let in_shape = x.shape().to_vec();
        let n_in = x.value.numel();
        self.op(Tensor::from_vec(out_shape, out), &[x], move |g, _| {
            let mut dx = vec![T::zero(); n_in];
            for (&i, &gv) in index.iter().zip(g.data()) {
                if i != GATHER_ZERO {
                    dx[i] += gv;
                }
            }
            vec![Some(Tensor::from_vec(&in_shape, dx))]
        })
    }

    /// Apply a [`RowPlan`] along axis 1 of a `[B, T, D]` tensor.
    pub fn mix_rows(&self, x: &Var<T>, plan: Rc<RowPlan<T>>) -> Var<T> {
        assert_eq!(x.value.ndim(), 3, "mix_rows expects [B, T, D]");
        let (b, t, d) = (x.dim(0), x.dim(1), x.dim(2));
        assert_eq!(t, plan.in_len, "mix_rows: plan expects {} frames, got {t}", plan.in_len);
        let tout = plan.out_len();
        let xd = x.value.data();
        let mut out = vec![T::zero(); b * tout * d];
        for bi in 0..b {
            for (i, row) in plan.rows.iter().enumerate() {
                let dst = &mut out[(bi * tout + i) * d..(bi * tout + i + 1) * d];
                for &(j, w) in row {
                    let src = &xd[(bi * t + j) * d..(bi * t + j + 1) * d];
                    for (o, &s) in dst.iter_mut().zip(src) {
                        *o += w * s;
                    }
                }
            }
        }
        self.op(Tensor::from_vec(&[b, tout, d], out), &[x], move |g, _| {
            let gd = g.data();
            let mut dx = vec![T::zero(); b * t * d];
            for bi in 0..b {
                for (i, row) in plan.rows.iter().enumerate() {
                    let src = &gd[(bi * tout + i) * d..(bi * tout + i + 1) * d];
                    for &(j, w) in row {
                        let dst = &mut dx[(bi * t + j) * d..(bi * t + j + 1) * d];
                        for (o, &s) in dst.iter_mut().zip(src) {
                            *o += w * s;
                        }
                    }
                }
            }
            vec![Some(Tensor::from_vec(&[b, t, d], dx))]
        })
    }

    /// Per-channel convolution along time of `[B, T, D]`:
    /// `out[t, c] = b[c] + sum_k w[k, c] * x[t*stride + k - pad_left, c]`.
    pub fn depthwise_conv(
        &self,
        x: &Var<T>,
        w: &Var<T>,
        bias: &Var<T>,
        stride: usize,
        pad_left: usize,
        out_len: usize,
    ) -> Var<T> {
        assert_eq!(x.value.ndim(), 3, "depthwise_conv expects [B, T, D]");
        let (b, t, d) = (x.dim(0), x.dim(1), x.dim(2));
        let k = w.dim(0);
        assert_eq!(w.shape(), &[k, d], "depthwise weight must be [K, D]");
        let xd = x.value.data();
        let wd = w.value.data();
        let mut out = vec![T::zero(); b * out_len * d];
        for bi in 0..b {
            for o in 0..out_len {
                let dst = &mut out[(bi * out_len + o) * d..(bi * out_len + o + 1) * d];
                dst.copy_from_slice(bias.value.data());
                for kk in 0..k {
                    let pos = (o * stride + kk) as isize - pad_left as isize;
                    if pos < 0 || pos as usize >= t {
                        continue;
                    }
                    let src = &xd[(bi * t + pos as usize) * d..(bi * t + pos as usize + 1) * d];
                    let wr = &wd[kk * d..(kk + 1) * d];
                    for c in 0..d {
                        dst[c] += wr[c] * src[c];
                    }
                }
            }
        }
        let (xv, wv) = (x.value.clone(), w.value.clone());
        self.op(Tensor::from_vec(&[b, out_len, d], out), &[x, w, bias], move |g, needs| {
            let gd = g.data();
            let xd = xv.data();
            let wd = wv.data();
            let mut dx = needs[0].then(|| vec![T::zero(); b * t * d]);
            let mut dw = needs[1].then(|| vec![T::zero(); k * d]);
            let mut db = needs[2].then(|| vec![T::zero(); d]);
            for bi in 0..b {
                for o in 0..out_len {
                    let gr = &gd[(bi * out_len + o) * d..(bi * out_len + o + 1) * d];
                    if let Some(db) = db.as_mut() {
                        for c in 0..d {
                            db[c] += gr[c];
                        }
                    }
                    for kk in 0..k {
                        let pos = (o * stride + kk) as isize - pad_left as isize;
                        if pos < 0 || pos as usize >= t {
                            continue;
                        }
                        let base = (bi * t + pos as usize) * d;
                        if let Some(dx) = dx.as_mut() {
                            for c in 0..d {
                                dx[base + c] += wd[kk * d + c] * gr[c];
                            }
                        }
                        if let Some(dw) = dw.as_mut() {
                            for c in 0..d {
                                dw[kk * d + c] += xd[base + c] * gr[c];
                            }
                        }
                    }
                }
            }
            vec![
                dx.map(|v| Tensor::from_vec(&[b, t, d], v)),
                dw.map(|v| Tensor::from_vec(&[k, d], v)),
                db.map(|v| Tensor::from_vec(&[d], v)),
            ]
        })
    }

    // ---- reductions ----

    pub fn sum_all(&self, x: &Var<T>) -> Var<T> {
        let s = x.value.sum();
        let shape = x.shape().to_vec();
        self.op(Tensor::scalar(s), &[x], move |g, _| vec![Some(Tensor::full(&shape, g.item()))])
    }

    pub fn mean_all(&self, x: &Var<T>) -> Var<T> {
        let n = T::lit(x.value.numel() as f64);
        let s = self.sum_all(x);
        self.scale(&s, T::one() / n)
    }

    /// Mean squared difference between `pred` and a target.
    pub fn mse(&self, pred: &Var<T>, target: &Var<T>) -> Var<T> {
        let diff = self.sub(pred, target);
        let sq = self.mul(&diff, &diff);
        self.mean_all(&sq)
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Numerically stable in-place softmax of one row.
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        // Every entry masked: fall back to uniform weights.
        let u = T::one() / T::lit(row.len() as f64);
        row.iter_mut().for_each(|v| *v = u);
        return;
    }
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v = *v / total);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Rc<Tensor<f64>> {
        Rc::new(Tensor::from_f64(shape, v))
    }

    fn numeric_grad(f: impl Fn(&Tensor<f64>) -> f64, x: &Tensor<f64>) -> Vec<f64> {
        let h = 1e-6;
        (0..x.numel())
            .map(|i| {
                let mut p = x.clone();
                p.data_mut()[i] += h;
                let mut m = x.clone();
                m.data_mut()[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn check(build: impl Fn(&Graph<f64>, &Var<f64>) -> Var<f64>, x: Tensor<f64>) {
        let g = Graph::new();
        let xv = g.leaf(Rc::new(x.clone()));
        let y = build(&g, &xv);
        // Random projection so every output element matters.
        let proj: Vec<f64> = (0..y.value().numel()).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.4).collect();
        let pv = g.constant(Tensor::from_vec(y.shape(), proj.clone()));
        let loss = g.sum_all(&g.mul(&y, &pv));
        let grads = g.backward(&loss);
        let analytic = grads.get(&xv).unwrap().clone();
        let numeric = numeric_grad(
            |xx| {
                let g2 = Graph::inference();
                let xv2 = g2.constant(xx.clone());
                let y2 = build(&g2, &xv2);
                y2.value().data().iter().zip(&proj).map(|(a, b)| a * b).sum()
            },
            &x,
        );
        for (a, n) in analytic.data().iter().zip(&numeric) {
            assert!((a - n).abs() < 1e-6 * (1.0 + n.abs()), "analytic {a} vs numeric {n}");
        }
    }

    fn sample(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 33) as f64 / (1u64 << 31) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn matmul_all_transpose_combos() {
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let (ashape, bshape) = (if ta { [2, 5, 3] } else { [2, 3, 5] }, if tb { [2, 4, 5] } else { [2, 5, 4] });
            let a = Tensor::<f64>::from_f64(&ashape, &sample(30, 1));
            let b = Tensor::<f64>::from_f64(&bshape, &sample(40, 2));
            let bb = b.clone();
            check(move |g, x| g.matmul(x, &g.constant(bb.clone()), ta, tb), a.clone());
            let aa = a.clone();
            check(move |g, x| g.matmul(&g.constant(aa.clone()), x, ta, tb), b);
        }
    }

    #[test]
    fn shared_rhs_matmul_and_linear() {
        let w = Tensor::from_f64(&[4, 3], &sample(12, 5));
        let x = Tensor::from_f64(&[2, 5, 3], &sample(30, 6));
        let xx = x.clone();
        check(move |g, wv| g.matmul(&g.constant(xx.clone()), wv, false, true), w.clone());
        let ww = w.clone();
        let bias = Tensor::from_f64(&[4], &[0.1, -0.2, 0.3, 0.0]);
        let b2 = bias.clone();
        check(move |g, xv| g.linear(xv, &g.constant(ww.clone()), Some(&g.constant(b2.clone()))), x.clone());
        check(move |g, wv| g.linear(&g.constant(x.clone()), wv, None), w);
    }

    #[test]
    fn norms_and_softmax() {
        let x = Tensor::from_f64(&[3, 5], &sample(15, 9));
        let gam = Tensor::from_f64(&[5], &sample(5, 10));
        let bet = Tensor::from_f64(&[5], &sample(5, 11));
        let (g1, b1) = (gam.clone(), bet.clone());
        check(move |g, xv| g.layer_norm(xv, &g.constant(g1.clone()), &g.constant(b1.clone()), 1e-5), x.clone());
        let x2 = x.clone();
        let b2 = bet.clone();
        check(move |g, gv| g.layer_norm(&g.constant(x2.clone()), gv, &g.constant(b2.clone()), 1e-5), gam.clone());
        let (g3, b3) = (gam.clone(), bet.clone());
        check(move |g, xv| g.batch_norm_train(xv, &g.constant(g3.clone()), &g.constant(b3.clone()), 1e-5).0, x.clone());
        check(|g, xv| g.softmax(xv), x.clone());
        check(|g, xv| g.l2_normalize(xv, 1e-6), x.clone());
        check(|g, xv| g.gelu(xv), x.clone());
        check(|g, xv| g.swish(xv), x.clone());
        check(|g, xv| g.tanh(xv), x);
    }

    #[test]
    fn structural_ops() {
        let x = Tensor::from_f64(&[2, 7, 3], &sample(42, 12));
        check(|g, xv| g.permute(xv, &[2, 0, 1]), x.clone());
        check(|g, xv| g.mix_rows(xv, Rc::new(RowPlan::linear_interp(7, 11))), x.clone());
        check(|g, xv| g.mix_rows(xv, Rc::new(RowPlan::window_mean(7, 2))), x.clone());
        let w = Tensor::from_f64(&[3, 3], &sample(9, 13));
        let b = Tensor::from_f64(&[3], &sample(3, 14));
        let (w1, b1) = (w.clone(), b.clone());
        check(move |g, xv| g.depthwise_conv(xv, &g.constant(w1.clone()), &g.constant(b1.clone()), 1, 1, 7), x.clone());
        let x2 = x.clone();
        check(move |g, wv| g.depthwise_conv(&g.constant(x2.clone()), wv, &g.constant(b.clone()), 2, 0, 4), w);
        let idx: Vec<usize> = (0..10).map(|i| if i == 3 { GATHER_ZERO } else { (i * 5) % 42 }).collect();
        let idx = Rc::new(idx);
        check(move |g, xv| g.gather(xv, idx.clone(), &[10]), x.clone());
        let other = Tensor::from_f64(&[2, 7, 2], &sample(28, 15));
        check(move |g, xv| g.concat(&[xv, &g.constant(other.clone())], 2), x.clone());
        let s = Tensor::from_f64(&[7], &sample(7, 16));
        check(move |g, xv| g.scale_heads(xv, &g.constant(s.clone()), 1), x);
    }

    #[test]
    fn interp_rows_preserve_endpoints_and_midpoint() {
        let p = RowPlan::<f64>::linear_interp(2, 3);
        assert_eq!(p.rows[1], vec![(0, 0.5), (1, 0.5)]);
        let p = RowPlan::<f64>::linear_interp(75, 3000);
        assert_eq!(p.rows[0], vec![(0, 1.0)]);
        assert_eq!(p.rows[2999], vec![(74, 1.0)]);
        let p = RowPlan::<f64>::window_mean(7, 2);
        assert_eq!(p.out_len(), 4);
        assert_eq!(p.rows[3], vec![(6, 1.0)]);
    }

    #[test]
    fn shared_values_accumulate() {
        let g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]));
        let y = g.mul(&x, &x);
        let loss = g.sum_all(&g.add(&y, &x));
        let grads = g.backward(&loss);
        assert_eq!(grads.get(&x).unwrap().data(), &[3.0, 5.0]);
    }

    #[test]
    fn inference_graph_records_nothing() {
        let g = Graph::<f32>::inference();
        let x = g.leaf(Rc::new(Tensor::ones(&[3])));
        let y = g.relu(&x);
        assert!(!y.requires_grad());
        assert_eq!(g.num_nodes(), 0);
    }
}
