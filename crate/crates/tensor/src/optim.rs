//! AdamW with decoupled weight decay and a warm-up + cosine learning rate
//! schedule.

use std::f64::consts::PI;

use crate::{ParamSet, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moment estimates, one buffer per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

impl AdamW {
    /// One update at learning rate `lr`.
    ///
    /// `p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)` with
    /// bias-corrected moments.
    pub fn step(&self, params: &mut ParamSet, grads: &[Tensor], state: &mut AdamState, lr: f64) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (((param, grad), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(state.m.iter_mut())
            .zip(state.v.iter_mut())
        {
            let p = param.value.data_mut();
            for i in 0..p.len() {
                let g = grad.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * p[i]);
            }
        }
    }
}

/// Rescales gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// Linear warm-up from `0.1 * peak_lr` to `peak_lr` over `warmup_steps`, then
/// cosine decay back to `0.1 * peak_lr` at `total_steps`.
pub fn cosine_schedule(step: usize, warmup_steps: usize, total_steps: usize, peak_lr: f64) -> f64 {
    let floor = 0.1 * peak_lr;
    let step = step.min(total_steps);
    if step < warmup_steps {
        return floor + (peak_lr - floor) * step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps);
    if span == 0 {
        return peak_lr;
    }
    let progress = (step - warmup_steps) as f64 / span as f64;
    floor + (peak_lr - floor) * 0.5 * (1.0 + (PI * progress).cos())
}
