//! AdamW with decoupled weight decay and a step learning-rate schedule.

use crate::params::{ParamId, ParamStore};

pub const DEFAULT_BETAS: (f64, f64) = (0.9, 0.999);
pub const DEFAULT_EPS: f64 = 1e-8;

/// First and second moment estimates of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn new(len: usize) -> Self {
        Self {
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// One AdamW update in place:
/// `p ← p·(1 − lr·wd) − lr·m̂/(√v̂ + ε)` with bias-corrected moments.
pub fn adamw_step(p: &mut [f64], g: &[f64], state: &mut Moments, c: &AdamWConfig) {
    assert_eq!(p.len(), g.len(), "parameter and gradient lengths differ");
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let decay = 1.0 - c.lr * c.weight_decay;
    for i in 0..p.len() {
        state.m[i] = c.beta1 * state.m[i] + (1.0 - c.beta1) * g[i];
        state.v[i] = c.beta2 * state.v[i] + (1.0 - c.beta2) * g[i] * g[i];
        let mhat = state.m[i] / bc1;
        let vhat = state.v[i] / bc2;
        p[i] = p[i] * decay - c.lr * mhat / (vhat.sqrt() + c.eps);
    }
}

/// `lr₀ · γ^⌊step / period⌋`.
pub fn steplr(lr0: f64, step: u64, period: u64, gamma: f64) -> f64 {
    assert!(period > 0, "step schedule period must be positive");
    lr0 * gamma.powi((step / period) as i32)
}

/// AdamW over a subset of a [`ParamStore`], keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamW {
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Moments per parameter, in first-update order.
    pub state: Vec<(String, Moments)>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            weight_decay,
            beta1: DEFAULT_BETAS.0,
            beta2: DEFAULT_BETAS.1,
            eps: DEFAULT_EPS,
            state: Vec::new(),
        }
    }

    fn moments(&mut self, name: &str, len: usize) -> &mut Moments {
        let pos = match self.state.iter().position(|(n, _)| n == name) {
            Some(p) => p,
            None => {
                self.state.push((name.to_string(), Moments::new(len)));
                self.state.len() - 1
            }
        };
        &mut self.state[pos].1
    }

    /// Update every `(param, grad)` pair at learning rate `lr`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Vec<f64>)], lr: f64) {
        let cfg = AdamWConfig {
            lr,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        };
        for (id, g) in grads {
            let name = store.get(*id).name.clone();
            let st = self.moments(&name, g.len());
            adamw_step(store.value_mut(*id).data_mut(), g, st, &cfg);
        }
    }
}

/// Scale all gradients so their joint L2 norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut [(ParamId, Vec<f64>)], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pure_decay_with_zero_gradient() {
        let c = AdamWConfig {
            lr: 1e-3,
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        let mut p = vec![0.7, -1.3];
        let mut st = Moments::new(2);
        adamw_step(&mut p, &[0.0, 0.0], &mut st, &c);
        assert_eq!(p, vec![0.7 * (1.0 - 1e-3 * 5e-4), -1.3 * (1.0 - 1e-3 * 5e-4)]);
    }

    #[test]
    fn schedule_closed_forms() {
        assert_eq!(steplr(1e-4, 999, 1000, 0.5), 1e-4);
        assert_eq!(steplr(1e-4, 1000, 1000, 0.5), 5e-5);
        assert_eq!(steplr(1e-4, 2500, 1000, 0.5), 2.5e-5);
    }
}
