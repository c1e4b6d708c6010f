//! AdamW with decoupled weight decay, the warmup-cosine schedule and
//! global-norm gradient clipping.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        AdamWParams {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moments for an ordered list of parameters.
#[derive(Clone, Debug)]
pub struct OptimState<S> {
    pub ids: Vec<ParamId>,
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
    pub t: u64,
}

impl<S: Scalar> OptimState<S> {
    /// Zero moments for `ids`, shaped like their parameters.
    pub fn new(params: &ParamStore<S>, ids: &[ParamId]) -> Self {
        let zeros: Vec<Tensor<S>> = ids.iter().map(|&id| Tensor::zeros(params.get(id).shape())).collect();
        OptimState {
            ids: ids.to_vec(),
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One AdamW update: `p ← p (1 − lr·wd)` then the bias-corrected Adam step.
/// `grads[i]` belongs to `state.ids[i]`.
pub fn adamw_step<S: Scalar>(
    params: &mut ParamStore<S>,
    grads: &[Tensor<S>],
    state: &mut OptimState<S>,
    lr: f64,
    hp: &AdamWParams,
) -> Result<()> {
    if grads.len() != state.ids.len() {
        return Err(Error::shape("adamw_step", &[grads.len()], &[state.ids.len()]));
    }
    for (i, g) in grads.iter().enumerate() {
        let id = state.ids[i];
        if g.shape() != params.get(id).shape() {
            return Err(Error::shape("adamw_step", g.shape(), params.get(id).shape()));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!(
                "gradient of parameter `{}` at optimizer step {}",
                params.name(id),
                state.t + 1
            )));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    let decay = 1.0 - lr * hp.weight_decay;
    for (i, g) in grads.iter().enumerate() {
        let p = params.get_mut(state.ids[i]).data_mut();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for j in 0..p.len() {
            let gj = g.data()[j].f64();
            let mj = hp.beta1 * m[j].f64() + (1.0 - hp.beta1) * gj;
            let vj = hp.beta2 * v[j].f64() + (1.0 - hp.beta2) * gj * gj;
            m[j] = S::of(mj);
            v[j] = S::of(vj);
            let update = lr * (mj / bc1) / ((vj / bc2).sqrt() + hp.eps);
            p[j] = S::of(p[j].f64() * decay - update);
        }
    }
    Ok(())
}

/// Linear warmup from 0 to `peak` over `warmup` steps, then cosine decay to
/// `0.1 · peak` at `total`.
pub fn lr_schedule(step: usize, peak: f64, warmup: usize, total: usize) -> f64 {
    let floor = 0.1 * peak;
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return peak;
    }
    let progress = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_grad_norm<S: Scalar>(grads: &mut [Tensor<S>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.data().iter().map(|x| x.f64() * x.f64()).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = S::of(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x = *x * s);
        }
    }
    norm
}
