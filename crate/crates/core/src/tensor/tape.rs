use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::kernels::{self, AttentionDims};
use crate::tensor::{Activation, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Act(Var, Activation),
    RmsNorm {
        x: Var,
        weight: Var,
        inv_rms: Vec<f64>,
    },
    AddBias(Var, Var),
    ScaleRows(Var, Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        dims: AttentionDims,
        probs: Vec<S>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    WeightedL1 {
        x: Var,
        weights: Vec<f64>,
    },
    BinaryCrossEntropy {
        g: Var,
        targets: Vec<f64>,
        eps: f64,
    },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Append-only record of a forward computation. Node indices are a
/// topological order, so the backward sweep is a reverse scan.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records an input. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, true)
    }

    /// Matrix product `a (m×k) · b (k×n)`. `a` may have leading axes, which
    /// are flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.shape().len() != 2 || av.cols() != bv.shape()[0] {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.shape()[1]);
        let mut out = vec![S::zero(); m * n];
        kernels::matmul(av.data(), bv.data(), &mut out, m, k, n, false, false, false);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(&shape, out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    /// Pointwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: S) -> Var {
        let value = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, s), rg)
    }

    /// Generic entry point over the pointwise binary ops.
    pub fn elementwise(&mut self, op: Elementwise<S>, a: Var, b: Option<Var>) -> Result<Var> {
        match (op, b) {
            (Elementwise::Add, Some(b)) => self.add(a, b),
            (Elementwise::Mul, Some(b)) => self.mul(a, b),
            (Elementwise::Scale(s), None) => Ok(self.scale(a, s)),
            _ => Err(Error::Contract(
                "add/mul take a tensor operand, scale takes a scalar".into(),
            )),
        }
    }

    fn zip_same(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(S, S) -> S, op: Op<S>) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(name, av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(av.shape(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn activation(&mut self, kind: Activation, x: Var) -> Var {
        let value = self.value(x).map(|v| kernels::activate(kind, v));
        let rg = self.rg(&[x]);
        self.push(value, Op::Act(x, kind), rg)
    }

    /// `x / sqrt(mean(x^2) + eps) * weight` over the last axis.
    pub fn rms_norm(&mut self, x: Var, weight: Var, eps: f64) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(weight));
        if wv.shape().len() != 1 || xv.cols() != wv.numel() {
            return Err(Error::shape("rms_norm", xv.shape(), wv.shape()));
        }
        if eps < 0.0 {
            return Err(Error::config("rms_norm eps must be non-negative"));
        }
        let mut out = vec![S::zero(); xv.numel()];
        let inv_rms = kernels::rms_norm(xv.data(), wv.data(), eps, &mut out);
        let value = Tensor::new(xv.shape(), out)?;
        let rg = self.rg(&[x, weight]);
        Ok(self.push(value, Op::RmsNorm { x, weight, inv_rms }, rg))
    }

    /// Adds a bias vector to every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.numel() != xv.cols() {
            return Err(Error::shape("add_bias", xv.shape(), bv.shape()));
        }
        let c = xv.cols();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv.data()[i % c])
            .collect();
        let value = Tensor::new(xv.shape(), data)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(value, Op::AddBias(x, bias), rg))
    }

    /// Multiplies row `r` of `x` by `s[r]`; `s` has one entry per row.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(s));
        if sv.numel() != xv.rows() {
            return Err(Error::shape("scale_rows", xv.shape(), sv.shape()));
        }
        let c = xv.cols();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * sv.data()[i / c])
            .collect();
        let value = Tensor::new(xv.shape(), data)?;
        let rg = self.rg(&[x, s]);
        Ok(self.push(value, Op::ScaleRows(x, s), rg))
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.shape().len() != 2 {
            return Err(Error::shape("gather", tv.shape(), &[ids.len()]));
        }
        if ids.is_empty() {
            return Err(Error::Contract("gather with no indices".into()));
        }
        let (n_rows, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= n_rows {
                return Err(Error::Index {
                    what: "gather row",
                    index: id,
                    bound: n_rows,
                });
            }
            out.extend_from_slice(&tv.data()[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(&[ids.len(), d], out)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Fused causal multi-head attention. `q`, `k`, `v` are
    /// `(batch*seq) × d` with heads laid out as contiguous column blocks.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.shape() != kv.shape() || qv.shape() != vv.shape() {
            return Err(Error::shape("attention", qv.shape(), kv.shape()));
        }
        let d = qv.cols();
        if heads == 0 || d % heads != 0 || qv.rows() != batch * seq {
            return Err(Error::shape("attention", qv.shape(), &[batch, seq, heads]));
        }
        let dims = AttentionDims {
            batch,
            seq,
            heads,
            head_dim: d / heads,
        };
        let mut out = vec![S::zero(); qv.numel()];
        let probs = kernels::causal_attention(dims, qv.data(), kv.data(), vv.data(), &mut out);
        let value = Tensor::new(qv.shape(), out)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(value, Op::Attention { q, k, v, dims, probs }, rg))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let vocab = lv.cols();
        if lv.rows() != targets.len() {
            return Err(Error::shape("softmax_cross_entropy", lv.shape(), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::Index {
                what: "target token",
                index: bad,
                bound: vocab,
            });
        }
        let mut probs = vec![0.0; lv.numel()];
        let loss = kernels::softmax_cross_entropy(lv.data(), vocab, targets, &mut probs);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(S::of(loss)),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// `sum_r weights[r] * ||x_r||_1`, a scalar. The subgradient of `|.|`
    /// at zero is zero.
    pub fn weighted_row_l1(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows() != weights.len() {
            return Err(Error::shape("weighted_row_l1", xv.shape(), &[weights.len()]));
        }
        let total: f64 = xv
            .data()
            .chunks_exact(xv.cols())
            .zip(weights)
            .filter(|(_, &w)| w != 0.0)
            .map(|(row, &w)| w * row.iter().map(|v| v.f64().abs()).sum::<f64>())
            .sum();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::scalar(S::of(total)),
            Op::WeightedL1 {
                x,
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    /// Summed binary cross-entropy of probabilities `g` (clamped to
    /// `[eps, 1 - eps]`) against targets in `[0, 1]`. Clamped entries pass
    /// no gradient.
    pub fn binary_cross_entropy(&mut self, g: Var, targets: &[f64], eps: f64) -> Result<Var> {
        let gv = self.value(g);
        if gv.numel() != targets.len() {
            return Err(Error::shape("binary_cross_entropy", gv.shape(), &[targets.len()]));
        }
        let total: f64 = gv
            .data()
            .iter()
            .zip(targets)
            .map(|(p, &t)| {
                let p = p.f64().clamp(eps, 1.0 - eps);
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum();
        let rg = self.rg(&[g]);
        Ok(self.push(
            Tensor::scalar(S::of(total)),
            Op::BinaryCrossEntropy {
                g,
                targets: targets.to_vec(),
                eps,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `root`. Gradients are retained for leaves
    /// that require them.
    pub fn backward(&self, root: Var) -> Result<Grads<S>> {
        let root_value = self.value(root);
        if root_value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                root_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(Tensor::full(root_value.shape(), S::one()));
        }
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                grads[i] = None;
            } else if grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Grads { grads })
    }

    fn propagate(&self, node: &Node<S>, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.shape()[1]);
                if self.requires_grad(*a) {
                    let da = self.slot(grads, *a);
                    kernels::matmul(gd, bv.data(), da, m, n, k, false, true, true);
                }
                if self.requires_grad(*b) {
                    let db = self.slot(grads, *b);
                    kernels::matmul(av.data(), gd, db, k, m, n, true, false, true);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.requires_grad(v) {
                        let dst = self.slot(grads, v);
                        dst.iter_mut().zip(gd).for_each(|(d, &x)| *d = *d + x);
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if self.requires_grad(v) {
                        let ov = self.value(other).data();
                        let dst = self.slot(grads, v);
                        for ((d, &x), &o) in dst.iter_mut().zip(gd).zip(ov) {
                            *d = *d + x * o;
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                if self.requires_grad(*a) {
                    let dst = self.slot(grads, *a);
                    dst.iter_mut().zip(gd).for_each(|(d, &x)| *d = *d + x * *s);
                }
            }
            Op::Act(x, kind) => {
                if self.requires_grad(*x) {
                    let xv = self.value(*x).data();
                    let dst = self.slot(grads, *x);
                    for ((d, &up), &xi) in dst.iter_mut().zip(gd).zip(xv) {
                        *d = *d + up * kernels::activate_grad(*kind, xi);
                    }
                }
            }
            Op::RmsNorm { x, weight, inv_rms } => {
                let xv = self.value(*x).data();
                let wv = self.value(*weight).data();
                let mut dx = self.requires_grad(*x).then(|| vec![S::zero(); xv.len()]);
                let mut dw = self.requires_grad(*weight).then(|| vec![S::zero(); wv.len()]);
                kernels::rms_norm_backward(xv, wv, inv_rms, gd, dx.as_deref_mut(), dw.as_deref_mut());
                if let Some(dx) = dx {
                    add_into(self.slot(grads, *x), &dx);
                }
                if let Some(dw) = dw {
                    add_into(self.slot(grads, *weight), &dw);
                }
            }
            Op::AddBias(x, bias) => {
                if self.requires_grad(*x) {
                    add_into(self.slot(grads, *x), gd);
                }
                if self.requires_grad(*bias) {
                    let c = g.cols();
                    let mut acc = vec![0.0f64; c];
                    for row in gd.chunks_exact(c) {
                        acc.iter_mut().zip(row).for_each(|(a, v)| *a += v.f64());
                    }
                    let dst = self.slot(grads, *bias);
                    dst.iter_mut().zip(acc).for_each(|(d, a)| *d = *d + S::of(a));
                }
            }
            Op::ScaleRows(x, s) => {
                let c = g.cols();
                if self.requires_grad(*x) {
                    let sv = self.value(*s).data();
                    let dst = self.slot(grads, *x);
                    for (i, (d, &up)) in dst.iter_mut().zip(gd).enumerate() {
                        *d = *d + up * sv[i / c];
                    }
                }
                if self.requires_grad(*s) {
                    let xv = self.value(*x).data();
                    let per_row: Vec<S> = gd
                        .chunks_exact(c)
                        .zip(xv.chunks_exact(c))
                        .map(|(gr, xr)| S::of(gr.iter().zip(xr).map(|(a, b)| a.f64() * b.f64()).sum()))
                        .collect();
                    add_into(self.slot(grads, *s), &per_row);
                }
            }
            Op::Gather { table, ids } => {
                if self.requires_grad(*table) {
                    let d = g.cols();
                    let dst = self.slot(grads, *table);
                    for (row, &id) in gd.chunks_exact(d).zip(ids) {
                        add_into(&mut dst[id * d..(id + 1) * d], row);
                    }
                }
            }
            Op::Attention { q, k, v, dims, probs } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let n = qv.numel();
                let (mut dq, mut dk, mut dv) = (vec![S::zero(); n], vec![S::zero(); n], vec![S::zero(); n]);
                kernels::causal_attention_backward(
                    *dims,
                    qv.data(),
                    kv.data(),
                    vv.data(),
                    probs,
                    gd,
                    &mut dq,
                    &mut dk,
                    &mut dv,
                );
                for (var, delta) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if self.requires_grad(var) {
                        add_into(self.slot(grads, var), &delta);
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if self.requires_grad(*logits) {
                    let up = g.item().f64() / targets.len() as f64;
                    let vocab = self.value(*logits).cols();
                    let dst = self.slot(grads, *logits);
                    for (r, &t) in targets.iter().enumerate() {
                        let row = &mut dst[r * vocab..(r + 1) * vocab];
                        let p = &probs[r * vocab..(r + 1) * vocab];
                        for (j, (d, &pj)) in row.iter_mut().zip(p).enumerate() {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            *d = *d + S::of(up * (pj - onehot));
                        }
                    }
                }
            }
            Op::WeightedL1 { x, weights } => {
                if self.requires_grad(*x) {
                    let up = g.item().f64();
                    let xv = self.value(*x);
                    let c = xv.cols();
                    let xd = xv.data();
                    let dst = self.slot(grads, *x);
                    for (r, &w) in weights.iter().enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        for j in r * c..(r + 1) * c {
                            let v = xd[j].f64();
                            let sign = if v > 0.0 {
                                1.0
                            } else if v < 0.0 {
                                -1.0
                            } else {
                                0.0
                            };
                            dst[j] = dst[j] + S::of(up * w * sign);
                        }
                    }
                }
            }
            Op::BinaryCrossEntropy { g: gv, targets, eps } => {
                if self.requires_grad(*gv) {
                    let up = g.item().f64();
                    let pv = self.value(*gv).data();
                    let dst = self.slot(grads, *gv);
                    for ((d, &p), &t) in dst.iter_mut().zip(pv).zip(targets) {
                        let p = p.f64();
                        if p > *eps && p < 1.0 - eps {
                            *d = *d + S::of(up * (-t / p + (1.0 - t) / (1.0 - p)));
                        }
                    }
                }
            }
        }
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Tensor<S>>], v: Var) -> &'g mut [S] {
        grads[v.0]
            .get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()))
            .data_mut()
    }
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
}

/// Pointwise binary operations accepted by [`Tape::elementwise`].
#[derive(Clone, Copy, Debug)]
pub enum Elementwise<S> {
    Add,
    Mul,
    Scale(S),
}

/// Gradients of a root with respect to every leaf that requires them.
pub struct Grads<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Grads<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
