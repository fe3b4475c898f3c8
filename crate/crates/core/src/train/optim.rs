use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Linear warmup from 0, then linear decay to 0 at the last step.
    #[default]
    LinearDecay,
    Constant,
}

/// Learning rate for 0-based optimizer step `step` of `total`.
pub fn lr_at(schedule: Schedule, step: usize, total: usize, warmup: usize, max_lr: f64) -> f64 {
    match schedule {
        Schedule::Constant => max_lr,
        Schedule::LinearDecay => {
            if step < warmup {
                max_lr * step as f64 / warmup as f64
            } else if step >= total {
                0.0
            } else {
                max_lr * (total - step) as f64 / (total - warmup) as f64
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// AdamW with bias correction and decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    params: AdamParams,
    t: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(params: AdamParams) -> Self {
        Self { params, t: 0, moments: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update of every named parameter that has a gradient.
    pub fn step(&mut self, lr: f64, params: Vec<(String, &mut Tensor)>, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.t += 1;
        let AdamParams { beta1, beta2, eps, weight_decay } = self.params;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (name, p) in params {
            let Some(g) = grads.get(&name) else { continue };
            if g.shape() != p.shape() {
                return Err(Error::shape("adamw", p.shape(), g.shape()));
            }
            let (m, v) = self.moments.entry(name).or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let update = (*mi / c1) / ((*vi / c2).sqrt() + eps);
                *w -= lr * (update + weight_decay * *w);
            }
        }
        Ok(())
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads.values().map(|g| g.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let c = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= c);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_midpoint_and_endpoint() {
        assert!((lr_at(Schedule::LinearDecay, 50, 1000, 100, 3e-4) - 1.5e-4).abs() < 1e-18);
        assert_eq!(lr_at(Schedule::LinearDecay, 1000, 1000, 100, 3e-4), 0.0);
        assert_eq!(lr_at(Schedule::LinearDecay, 100, 1000, 100, 3e-4), 3e-4);
        assert_eq!(lr_at(Schedule::Constant, 999, 1000, 100, 1e-4), 1e-4);
    }

    #[test]
    fn first_adam_step_moves_by_lr_times_sign() {
        let mut p = Tensor::vector(vec![1.0, -2.0, 0.5]);
        let grads = BTreeMap::from([("w".to_string(), Tensor::vector(vec![0.3, -4.0, 0.0]))]);
        let mut opt = AdamW::new(AdamParams { weight_decay: 0.0, ..AdamParams::default() });
        opt.step(0.1, vec![("w".into(), &mut p)], &grads).unwrap();
        let want = [0.9, -1.9, 0.5];
        for (a, b) in p.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn decoupled_decay_shrinks_without_gradient_signal() {
        let mut p = Tensor::vector(vec![2.0]);
        let grads = BTreeMap::from([("w".to_string(), Tensor::vector(vec![0.0]))]);
        let mut opt = AdamW::new(AdamParams { weight_decay: 0.1, ..AdamParams::default() });
        opt.step(0.5, vec![("w".into(), &mut p)], &grads).unwrap();
        assert!((p.data()[0] - (2.0 - 0.5 * 0.1 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = BTreeMap::from([("a".to_string(), Tensor::vector(vec![3.0, 4.0]))]);
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g["a"].data()[0] - 0.6).abs() < 1e-12);
    }
}
