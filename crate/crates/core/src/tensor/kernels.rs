//! Slice-level numeric kernels shared by the tape and by non-differentiable
//! evaluation paths. Reductions accumulate in `f64`.

use num_traits::{Float, FromPrimitive};

use crate::scalar::Scalar;
use crate::tensor::Activation;

/// A strided matrix view: element `(i, j)` lives at `data[i * rs + j * cs]`.
#[derive(Clone, Copy)]
pub struct MatRef<'a, S> {
    pub data: &'a [S],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, S> MatRef<'a, S> {
    pub fn row_major(data: &'a [S], rows: usize, cols: usize) -> Self {
        MatRef {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn span(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.rs + (self.cols - 1) * self.cs + 1
        }
    }
}

/// `out = alpha * a * b + beta * out` where `out` is strided by `(rso, cso)`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<S: Scalar>(alpha: S, a: MatRef<'_, S>, b: MatRef<'_, S>, beta: S, out: &mut [S], rso: usize, cso: usize) {
    assert_eq!(a.cols, b.rows, "gemm inner extents");
    assert!(a.data.len() >= a.span() && b.data.len() >= b.span());
    if a.rows > 0 && b.cols > 0 {
        assert!(out.len() > (a.rows - 1) * rso + (b.cols - 1) * cso);
    }
    S::gemm(
        a.rows,
        a.cols,
        b.cols,
        alpha,
        a.data,
        a.rs as isize,
        a.cs as isize,
        b.data,
        b.rs as isize,
        b.cs as isize,
        beta,
        out,
        rso as isize,
        cso as isize,
    );
}

/// Row-major product of `op(a)` (m×k) and `op(b)` (k×n) into `out` (m×n).
/// A transposed operand is stored in its untransposed layout.
#[allow(clippy::too_many_arguments)]
pub fn matmul<S: Scalar>(
    a: &[S],
    b: &[S],
    out: &mut [S],
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
    accumulate: bool,
) {
    let a = if trans_a {
        MatRef::row_major(a, k, m).t()
    } else {
        MatRef::row_major(a, m, k)
    };
    let b = if trans_b {
        MatRef::row_major(b, n, k).t()
    } else {
        MatRef::row_major(b, k, n)
    };
    let beta = if accumulate { S::one() } else { S::zero() };
    gemm(S::one(), a, b, beta, out, n, 1);
}

#[inline]
pub fn sigmoid<F: Float>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

/// Scalar activation value in the precision of `F`.
#[inline]
pub fn activate<F: Float + FromPrimitive>(kind: Activation, x: F) -> F {
    let half = F::from_f64(0.5).unwrap();
    match kind {
        Activation::Silu => x * sigmoid(x),
        Activation::Gelu => {
            let (c, k) = (F::from_f64(GELU_C).unwrap(), F::from_f64(GELU_K).unwrap());
            half * x * (F::one() + (c * (x + k * x * x * x)).tanh())
        }
        Activation::Relu => x.max(F::zero()),
        Activation::Sigmoid => sigmoid(x),
    }
}

/// Derivative of [`activate`] at `x`. ReLU uses subgradient 0 at 0.
#[inline]
pub fn activate_grad<F: Float + FromPrimitive>(kind: Activation, x: F) -> F {
    let one = F::one();
    let half = F::from_f64(0.5).unwrap();
    match kind {
        Activation::Silu => {
            let s = sigmoid(x);
            s * (one + x * (one - s))
        }
        Activation::Gelu => {
            let (c, k) = (F::from_f64(GELU_C).unwrap(), F::from_f64(GELU_K).unwrap());
            let three = F::from_f64(3.0).unwrap();
            let t = (c * (x + k * x * x * x)).tanh();
            let du = c * (one + three * k * x * x);
            half * (one + t) + half * x * (one - t * t) * du
        }
        Activation::Relu => {
            if x > F::zero() {
                one
            } else {
                F::zero()
            }
        }
        Activation::Sigmoid => {
            let s = sigmoid(x);
            s * (one - s)
        }
    }
}

/// Row-wise RMS normalization. Returns `1 / sqrt(mean(x^2) + eps)` per row.
pub fn rms_norm<S: Scalar>(x: &[S], weight: &[S], eps: f64, out: &mut [S]) -> Vec<f64> {
    let d = weight.len();
    x.chunks_exact(d)
        .zip(out.chunks_exact_mut(d))
        .map(|(row, dst)| {
            let ms = row.iter().map(|v| v.f64() * v.f64()).sum::<f64>() / d as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            for ((o, &v), &w) in dst.iter_mut().zip(row).zip(weight) {
                *o = S::of(v.f64() * inv * w.f64());
            }
            inv
        })
        .collect()
}

/// Backward of [`rms_norm`]; accumulates into `dx` and `dw` when present.
pub fn rms_norm_backward<S: Scalar>(
    x: &[S],
    weight: &[S],
    inv_rms: &[f64],
    dy: &[S],
    dx: Option<&mut [S]>,
    dw: Option<&mut [S]>,
) {
    let d = weight.len();
    if let Some(dw) = dw {
        let mut acc = vec![0.0f64; d];
        for ((row, g), &r) in x.chunks_exact(d).zip(dy.chunks_exact(d)).zip(inv_rms) {
            for j in 0..d {
                acc[j] += g[j].f64() * row[j].f64() * r;
            }
        }
        for (w, a) in dw.iter_mut().zip(acc) {
            *w = *w + S::of(a);
        }
    }
    if let Some(dx) = dx {
        for (((row, g), &r), dst) in x
            .chunks_exact(d)
            .zip(dy.chunks_exact(d))
            .zip(inv_rms)
            .zip(dx.chunks_exact_mut(d))
        {
            let dot: f64 = (0..d).map(|j| weight[j].f64() * g[j].f64() * row[j].f64()).sum();
            let coef = r * r * r * dot / d as f64;
            for j in 0..d {
                let v = r * weight[j].f64() * g[j].f64() - row[j].f64() * coef;
                dst[j] = dst[j] + S::of(v);
            }
        }
    }
}

/// Mean negative log-likelihood of `targets` under row-wise softmax of
/// `logits` (rows×vocab). Writes the softmax probabilities into `probs`.
pub fn softmax_cross_entropy<S: Scalar>(logits: &[S], vocab: usize, targets: &[usize], probs: &mut [f64]) -> f64 {
    let mut total = 0.0;
    for ((row, p), &t) in logits
        .chunks_exact(vocab)
        .zip(probs.chunks_exact_mut(vocab))
        .zip(targets)
    {
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let mut z = 0.0;
        for (pi, &v) in p.iter_mut().zip(row) {
            *pi = (v - max).exp().f64();
            z += *pi;
        }
        for pi in p.iter_mut() {
            *pi /= z;
        }
        total += max.f64() + z.ln() - row[t].f64();
    }
    total / targets.len() as f64
}

/// Per-row negative log-likelihoods without keeping probabilities.
pub fn row_nll<S: Scalar>(logits: &[S], vocab: usize, targets: &[usize]) -> Vec<f64> {
    logits
        .chunks_exact(vocab)
        .zip(targets)
        .map(|(row, &t)| {
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let z: f64 = row.iter().map(|&v| (v - max).exp().f64()).sum();
            max.f64() + z.ln() - row[t].f64()
        })
        .collect()
}

/// Layout of a fused causal multi-head attention call over `batch`
/// sequences of `seq` tokens; q, k, v are `(batch*seq) × (heads*head_dim)`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionDims {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl AttentionDims {
    pub fn model_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    fn head_view<'a, S>(&self, m: &'a [S], b: usize, h: usize) -> MatRef<'a, S> {
        let d = self.model_dim();
        MatRef {
            data: &m[b * self.seq * d + h * self.head_dim..],
            rows: self.seq,
            cols: self.head_dim,
            rs: d,
            cs: 1,
        }
    }

    fn offset(&self, b: usize, h: usize) -> usize {
        b * self.seq * self.model_dim() + h * self.head_dim
    }
}

/// Scaled dot-product attention with a causal mask. Returns the attention
/// probabilities, `batch*heads` blocks of `seq×seq` (upper triangles zero).
pub fn causal_attention<S: Scalar>(dims: AttentionDims, q: &[S], k: &[S], v: &[S], out: &mut [S]) -> Vec<S> {
    let t = dims.seq;
    let d = dims.model_dim();
    let scale = S::of(1.0 / (dims.head_dim as f64).sqrt());
    let mut probs = vec![S::zero(); dims.batch * dims.heads * t * t];
    for b in 0..dims.batch {
        for h in 0..dims.heads {
            let p = &mut probs[(b * dims.heads + h) * t * t..][..t * t];
            let qh = dims.head_view(q, b, h);
            let kh = dims.head_view(k, b, h);
            gemm(scale, qh, kh.t(), S::zero(), p, t, 1);
            for i in 0..t {
                let row = &mut p[i * t..(i + 1) * t];
                let max = row[..=i].iter().copied().fold(S::neg_infinity(), S::max);
                let mut z = 0.0;
                for x in row[..=i].iter_mut() {
                    *x = (*x - max).exp();
                    z += x.f64();
                }
                let inv = S::of(1.0 / z);
                for x in row[..=i].iter_mut() {
                    *x = *x * inv;
                }
                row[i + 1..].fill(S::zero());
            }
            let vh = dims.head_view(v, b, h);
            let off = dims.offset(b, h);
            gemm(
                S::one(),
                MatRef::row_major(p, t, t),
                vh,
                S::zero(),
                &mut out[off..],
                d,
                1,
            );
        }
    }
    probs
}

/// Backward of [`causal_attention`], accumulating into `dq`, `dk`, `dv`.
#[allow(clippy::too_many_arguments)]
pub fn causal_attention_backward<S: Scalar>(
    dims: AttentionDims,
    q: &[S],
    k: &[S],
    v: &[S],
    probs: &[S],
    dout: &[S],
    dq: &mut [S],
    dk: &mut [S],
    dv: &mut [S],
) {
    let t = dims.seq;
    let d = dims.model_dim();
    let scale = S::of(1.0 / (dims.head_dim as f64).sqrt());
    let mut dp = vec![S::zero(); t * t];
    for b in 0..dims.batch {
        for h in 0..dims.heads {
            let p = &probs[(b * dims.heads + h) * t * t..][..t * t];
            let pm = MatRef::row_major(p, t, t);
            let off = dims.offset(b, h);
            let doh = dims.head_view(dout, b, h);
            // dV += P^T dO
            gemm(S::one(), pm.t(), doh, S::one(), &mut dv[off..], d, 1);
            // dP = dO V^T
            let vh = dims.head_view(v, b, h);
            gemm(S::one(), doh, vh.t(), S::zero(), &mut dp, t, 1);
            // dS = P * (dP - rowsum(P * dP))
            for i in 0..t {
                let prow = &p[i * t..(i + 1) * t];
                let drow = &mut dp[i * t..(i + 1) * t];
                let dot: f64 = (0..=i).map(|j| prow[j].f64() * drow[j].f64()).sum();
                for j in 0..=i {
                    drow[j] = S::of(prow[j].f64() * (drow[j].f64() - dot));
                }
                drow[i + 1..].fill(S::zero());
            }
            let ds = MatRef::row_major(&dp[..], t, t);
            let kh = dims.head_view(k, b, h);
            let qh = dims.head_view(q, b, h);
            gemm(scale, ds, kh, S::one(), &mut dq[off..], d, 1);
            gemm(scale, ds.t(), qh, S::one(), &mut dk[off..], d, 1);
        }
    }
}
