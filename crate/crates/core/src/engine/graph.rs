use std::borrow::Cow;

use rand::Rng as _;

use super::scalar::{gemm, View};
use super::{EngineError, Scalar, Tensor};
use crate::rng::Rng;

/// Handle to a node recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    /// `slope` holds dGELU/dx per element, filled only when a gradient will be needed.
    Gelu {
        x: Var,
        slope: Vec<T>,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Embed {
        table: Var,
        ids: Vec<usize>,
    },
    Gather {
        src: Var,
        idx: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Sum(Var),
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<'a, T: Clone> {
    value: Cow<'a, [T]>,
    shape: Vec<usize>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of recorded operations. Nodes are appended in evaluation order, so
/// reverse insertion order is a valid reverse topological order.
pub struct Graph<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
    grads: Vec<Option<Vec<T>>>,
    grad_enabled: bool,
    backward_done: bool,
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().expect("tensor must have at least one dimension")
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new(), grad_enabled: true, backward_done: false }
    }

    /// A graph that never tracks gradients (inference).
    pub fn no_grad() -> Self {
        Graph { grad_enabled: false, ..Self::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, [T]>, shape: Vec<usize>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node { value, shape, op, requires_grad: requires_grad && self.grad_enabled });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Vec<T>, shape: Vec<usize>, op: Op<T>, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Cow::Owned(value), shape, op, rg)
    }

    /// Borrowed trainable leaf.
    pub fn param(&mut self, t: &'a Tensor<T>) -> Var {
        self.push(Cow::Borrowed(t.data()), t.shape().to_vec(), Op::Leaf, true)
    }

    /// Owned leaf.
    pub fn input(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        let shape = t.shape().to_vec();
        self.push(Cow::Owned(t.into_data()), shape, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.input(t, false)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        Tensor::from_vec(self.shape(v).to_vec(), self.value(v).to_vec())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient after [`Graph::backward`]; `None` for nodes that do not require gradients.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads[v.0].take()
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b));
        assert_eq!(sb.len(), 2, "matmul rhs must be 2-d, got {sb:?}");
        let k = last_dim(&sa);
        let (bk, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        assert_eq!(k, bk, "matmul inner dimension mismatch: {sa:?} x {sb:?} (trans_b = {trans_b})");
        let m = self.value(a).len() / k.max(1);
        let mut out = vec![T::ZERO; m * n];
        let bv = if trans_b { View::transposed(self.value(b), 0, k) } else { View::row_major(self.value(b), 0, n) };
        gemm(m, k, n, View::row_major(self.value(a), 0, k), bv, &mut out, 0, false);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        self.derived(out, shape, Op::MatMul { a, b, trans_b, m, k, n }, &[a, b])
    }

    /// `a[..., k] · b[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, false)
    }

    /// `a[..., k] · b[n, k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, true)
    }

    fn bmm_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0], "bmm shape mismatch: {sa:?} x {sb:?}");
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (bk, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        assert_eq!(k, bk, "bmm inner dimension mismatch: {sa:?} x {sb:?} (trans_b = {trans_b})");
        let mut out = vec![T::ZERO; batch * m * n];
        for i in 0..batch {
            let bv = if trans_b {
                View::transposed(self.value(b), i * n * k, k)
            } else {
                View::row_major(self.value(b), i * k * n, n)
            };
            gemm(m, k, n, View::row_major(self.value(a), i * m * k, k), bv, &mut out, i * m * n, false);
        }
        self.derived(out, vec![batch, m, n], Op::Bmm { a, b, trans_b, batch, m, k, n }, &[a, b])
    }

    /// Batched `a[B, m, k] · b[B, k, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        self.bmm_impl(a, b, false)
    }

    /// Batched `a[B, m, k] · b[B, n, k]ᵀ`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Var {
        self.bmm_impl(a, b, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        self.derived(out, shape, Op::Add(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        self.derived(out, shape, Op::Mul(a, b), &[a, b])
    }

    /// Adds `bias[n]` to every row of `x[..., n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let n = last_dim(self.shape(x));
        assert_eq!(self.shape(bias), [n], "bias shape mismatch");
        let b = self.value(bias);
        let out = self.value(x).chunks(n).flat_map(|row| row.iter().zip(b).map(|(&v, &c)| v + c)).collect();
        let shape = self.shape(x).to_vec();
        self.derived(out, shape, Op::AddBias(x, bias), &[x, bias])
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.derived(out, shape, Op::Scale(x, c), &[x])
    }

    /// Exact (erf) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let need_slope = self.grad_enabled && self.nodes[x.0].requires_grad;
        let xs = self.value(x);
        let mut out = Vec::with_capacity(xs.len());
        let mut slope = Vec::with_capacity(if need_slope { xs.len() } else { 0 });
        for &v in xs {
            let cdf = gaussian_cdf(v);
            out.push(v * cdf);
            if need_slope {
                slope.push(cdf + v * gaussian_pdf(v));
            }
        }
        let shape = self.shape(x).to_vec();
        self.derived(out, shape, Op::Gelu { x, slope }, &[x])
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Var {
        let n = last_dim(self.shape(x));
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let shape = self.shape(x).to_vec();
        self.derived(out, shape, Op::Softmax(x), &[x])
    }

    /// Layer normalization over the last dimension (biased variance) with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let n = last_dim(self.shape(x));
        assert_eq!(self.shape(gamma), [n], "layer_norm gamma shape");
        assert_eq!(self.shape(beta), [n], "layer_norm beta shape");
        let eps = T::from_f64(eps);
        let inv_n = T::from_f64(1.0 / n as f64);
        let rows = self.value(x).len() / n;
        let mut xhat = Vec::with_capacity(rows * n);
        let mut rstd = Vec::with_capacity(rows);
        for row in self.value(x).chunks(n) {
            let mean = row.iter().copied().sum::<T>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            let r = T::ONE / (var + eps).sqrt();
            rstd.push(r);
            xhat.extend(row.iter().map(|&v| (v - mean) * r));
        }
        let (g, b) = (self.value(gamma), self.value(beta));
        let out = xhat.chunks(n).flat_map(|row| row.iter().zip(g).zip(b).map(|((&h, &g), &b)| h * g + b)).collect();
        let shape = self.shape(x).to_vec();
        self.derived(out, shape, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta])
    }

    /// Rows of `table[v, d]` selected by `ids`; output shape is `prefix ++ [d]`.
    pub fn embed(&mut self, table: Var, ids: &[usize], prefix: &[usize]) -> Var {
        let st = self.shape(table);
        assert_eq!(st.len(), 2, "embedding table must be 2-d");
        let (v, d) = (st[0], st[1]);
        assert_eq!(prefix.iter().product::<usize>(), ids.len(), "embed prefix does not match ids");
        assert!(ids.iter().all(|&i| i < v), "embedding id out of range");
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let mut shape = prefix.to_vec();
        shape.push(d);
        self.derived(out, shape, Op::Embed { table, ids: ids.to_vec() }, &[table])
    }

    /// `out[p] = src[idx[p]]` over flat indices.
    pub fn gather(&mut self, src: Var, idx: Vec<usize>, shape: Vec<usize>) -> Var {
        assert_eq!(shape.iter().product::<usize>(), idx.len(), "gather shape does not match index count");
        let s = self.value(src);
        assert!(idx.iter().all(|&i| i < s.len()), "gather index out of range");
        let out = idx.iter().map(|&i| s[i]).collect();
        self.derived(out, shape, Op::Gather { src, idx }, &[src])
    }

    /// Contiguous range `start..start + len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let shape = self.shape(x).to_vec();
        assert!(axis < shape.len() && start + len <= shape[axis], "slice out of range");
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut idx = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            idx.extend(base..base + len * inner);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.gather(x, idx, out_shape)
    }

    /// Concatenation along `axis`.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let first = self.shape(parts[0]).to_vec();
        assert!(axis < first.len(), "concat axis out of range");
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            assert!(
                s.len() == first.len() && s.iter().enumerate().all(|(i, &d)| i == axis || d == first[i]),
                "concat shape mismatch"
            );
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.derived(out, shape, Op::Concat { parts: parts.to_vec(), axis }, parts)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        self.derived(vec![s], vec![], Op::Sum(x), &[x])
    }

    /// Inverted dropout with drop probability `p`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut Rng) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = T::from_f64(1.0 / (1.0 - p));
        let mask: Vec<T> =
            (0..self.value(x).len()).map(|_| if rng.random::<f64>() < p { T::ZERO } else { keep }).collect();
        let out = self.value(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        self.derived(out, shape, Op::Dropout { x, mask }, &[x])
    }

    /// Mean over all rows of `-log softmax(logits)[target]`; `logits[..., v]`, one target per row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, EngineError> {
        let v = last_dim(self.shape(logits));
        let rows = self.value(logits).len() / v;
        assert_eq!(rows, targets.len(), "one target per logit row");
        if let Some(&t) = targets.iter().find(|&&t| t >= v) {
            return Err(EngineError::TargetOutOfRange { id: t, vocab: v });
        }
        let mut probs = self.value(logits).to_vec();
        let mut total = 0.0f64;
        for (row, &t) in probs.chunks_mut(v).zip(targets) {
            let max = row.iter().copied().fold(row[0], |m, x| if x > m { x } else { m });
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
            total += (lse - row[t]).to_f64();
            for x in row.iter_mut() {
                *x = (*x - lse).exp();
            }
        }
        let loss = T::from_f64(total / rows as f64);
        Ok(self.derived(vec![loss], vec![], Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, &[logits]))
    }

    /// Reverse-mode sweep from a scalar `loss`, filling gradients of every
    /// node that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<(), EngineError> {
        if self.backward_done {
            return Err(EngineError::BackwardTwice);
        }
        if self.value(loss).len() != 1 {
            return Err(EngineError::NotScalar(self.shape(loss).to_vec()));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::ONE]);
        let Graph { nodes, grads, .. } = self;
        for i in (0..=loss.0).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop_node(nodes, grads, i, &g);
            grads[i] = Some(g);
        }
        Ok(())
    }
}

fn gaussian_cdf<T: Scalar>(x: T) -> T {
    T::from_f64(0.5) * (T::ONE + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gaussian_pdf<T: Scalar>(x: T) -> T {
    (-(x * x) * T::from_f64(0.5)).exp() * T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt())
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(row[0], |m, x| if x > m { x } else { m });
    let mut s = T::ZERO;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        s += *x;
    }
    for x in row.iter_mut() {
        *x /= s;
    }
}

fn grad_buf<'g, T: Scalar>(nodes: &[Node<'_, T>], grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![T::ZERO; n]))
}

fn backprop_node<T: Scalar>(nodes: &[Node<'_, T>], grads: &mut [Option<Vec<T>>], i: usize, g: &[T]) {
    let val = |v: Var| -> &[T] { &nodes[v.0].value };
    match &nodes[i].op {
        Op::Leaf => {}
        &Op::MatMul { a, b, trans_b, m, k, n } => {
            if let Some(ga) = grad_buf(nodes, grads, a) {
                let bv = if trans_b { View::row_major(val(b), 0, k) } else { View::transposed(val(b), 0, n) };
                gemm(m, n, k, View::row_major(g, 0, n), bv, ga, 0, true);
            }
            if let Some(gb) = grad_buf(nodes, grads, b) {
                if trans_b {
                    gemm(n, m, k, View::transposed(g, 0, n), View::row_major(val(a), 0, k), gb, 0, true);
                } else {
                    gemm(k, m, n, View::transposed(val(a), 0, k), View::row_major(g, 0, n), gb, 0, true);
                }
            }
        }
        &Op::Bmm { a, b, trans_b, batch, m, k, n } => {
            if let Some(ga) = grad_buf(nodes, grads, a) {
                for s in 0..batch {
                    let bv = if trans_b {
                        View::row_major(val(b), s * n * k, k)
                    } else {
                        View::transposed(val(b), s * k * n, n)
                    };
                    gemm(m, n, k, View::row_major(g, s * m * n, n), bv, ga, s * m * k, true);
                }
            }
            if let Some(gb) = grad_buf(nodes, grads, b) {
                for s in 0..batch {
                    if trans_b {
                        let (gv, av) = (View::transposed(g, s * m * n, n), View::row_major(val(a), s * m * k, k));
                        gemm(n, m, k, gv, av, gb, s * n * k, true);
                    } else {
                        let (av, gv) = (View::transposed(val(a), s * m * k, k), View::row_major(g, s * m * n, n));
                        gemm(k, m, n, av, gv, gb, s * k * n, true);
                    }
                }
            }
        }
        &Op::Add(a, b) => {
            for v in [a, b] {
                if let Some(gv) = grad_buf(nodes, grads, v) {
                    gv.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                }
            }
        }
        &Op::Mul(a, b) => {
            if let Some(ga) = grad_buf(nodes, grads, a) {
                for ((d, &s), &y) in ga.iter_mut().zip(g).zip(val(b)) {
                    *d += s * y;
                }
            }
            if let Some(gb) = grad_buf(nodes, grads, b) {
                for ((d, &s), &x) in gb.iter_mut().zip(g).zip(val(a)) {
                    *d += s * x;
                }
            }
        }
        &Op::AddBias(x, bias) => {
            if let Some(gx) = grad_buf(nodes, grads, x) {
                gx.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
            }
            if let Some(gb) = grad_buf(nodes, grads, bias) {
                let n = gb.len();
                for row in g.chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(d, &s)| *d += s);
                }
            }
        }
        &Op::Scale(x, c) => {
            if let Some(gx) = grad_buf(nodes, grads, x) {
                gx.iter_mut().zip(g).for_each(|(d, &s)| *d += s * c);
            }
        }
        Op::Gelu { x, slope } => {
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for ((d, &s), &k) in gx.iter_mut().zip(g).zip(slope) {
                    *d += s * k;
                }
            }
        }
        &Op::Softmax(x) => {
            if let Some(gx) = grad_buf(nodes, grads, x) {
                let n = last_dim(&nodes[i].shape);
                let y = &nodes[i].value;
                for ((dx, gy), yr) in gx.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                    let dot: T = gy.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for ((d, &gyv), &yv) in dx.iter_mut().zip(gy).zip(yr) {
                        *d += yv * (gyv - dot);
                    }
                }
            }
        }
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let n = last_dim(&nodes[i].shape);
            if let Some(gg) = grad_buf(nodes, grads, *gamma) {
                for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                    gg.iter_mut().zip(gr.iter().zip(hr)).for_each(|(d, (&a, &b))| *d += a * b);
                }
            }
            if let Some(gb) = grad_buf(nodes, grads, *beta) {
                for gr in g.chunks(n) {
                    gb.iter_mut().zip(gr).for_each(|(d, &a)| *d += a);
                }
            }
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                let gam = val(*gamma);
                let inv_n = T::from_f64(1.0 / n as f64);
                let mut dxhat = vec![T::ZERO; n];
                for (r, ((dx, gr), hr)) in gx.chunks_mut(n).zip(g.chunks(n)).zip(xhat.chunks(n)).enumerate() {
                    for j in 0..n {
                        dxhat[j] = gr[j] * gam[j];
                    }
                    let mean_d: T = dxhat.iter().copied().sum::<T>() * inv_n;
                    let mean_dh: T = dxhat.iter().zip(hr).map(|(&a, &b)| a * b).sum::<T>() * inv_n;
                    for j in 0..n {
                        dx[j] += rstd[r] * (dxhat[j] - mean_d - hr[j] * mean_dh);
                    }
                }
            }
        }
        Op::Embed { table, ids } => {
            if let Some(gt) = grad_buf(nodes, grads, *table) {
                let d = last_dim(&nodes[table.0].shape);
                for (row, &id) in g.chunks(d).zip(ids) {
                    gt[id * d..(id + 1) * d].iter_mut().zip(row).for_each(|(t, &s)| *t += s);
                }
            }
        }
        Op::Gather { src, idx } => {
            if let Some(gs) = grad_buf(nodes, grads, *src) {
                for (&j, &s) in idx.iter().zip(g) {
                    gs[j] += s;
                }
            }
        }
        Op::Concat { parts, axis } => {
            let shape = &nodes[i].shape;
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let mut offset = 0;
            for o in 0..outer {
                for &p in parts {
                    let chunk = nodes[p.0].shape[*axis] * inner;
                    if let Some(gp) = grad_buf(nodes, grads, p) {
                        gp[o * chunk..(o + 1) * chunk]
                            .iter_mut()
                            .zip(&g[offset..offset + chunk])
                            .for_each(|(d, &s)| *d += s);
                    }
                    offset += chunk;
                }
            }
        }
        &Op::Sum(x) => {
            if let Some(gx) = grad_buf(nodes, grads, x) {
                gx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Dropout { x, mask } => {
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for ((d, &s), &m) in gx.iter_mut().zip(g).zip(mask) {
                    *d += s * m;
                }
            }
        }
        Op::CrossEntropy { logits, targets, probs } => {
            if let Some(gl) = grad_buf(nodes, grads, *logits) {
                let v = probs.len() / targets.len();
                let scale = g[0] / T::from_f64(targets.len() as f64);
                for (r, (dr, pr)) in gl.chunks_mut(v).zip(probs.chunks(v)).enumerate() {
                    for (j, (d, &p)) in dr.iter_mut().zip(pr).enumerate() {
                        let onehot = if j == targets[r] { T::ONE } else { T::ZERO };
                        *d += scale * (p - onehot);
                    }
                }
            }
        }
    }
}
