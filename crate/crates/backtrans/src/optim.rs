//! Adam optimizer with the inverse-sqrt warm-up schedule.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Named model parameters. A BTreeMap so every iteration order is
/// deterministic (checkpoint bytes, update order, gradient reduction).
pub type ParamMap = BTreeMap<String, Tensor>;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// Per-parameter moment accumulators plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    cfg: AdamConfig,
    first: ParamMap,
    second: ParamMap,
    step: usize,
}

impl AdamState {
    pub fn new(params: &ParamMap, cfg: AdamConfig) -> Self {
        let first = params
            .iter()
            .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape().to_vec())))
            .collect();
        let second = params
            .iter()
            .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape().to_vec())))
            .collect();
        AdamState {
            cfg,
            first,
            second,
            step: 0,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// One Adam update with bias correction. `grads` may omit parameters
    /// (treated as zero gradient, which leaves fresh parameters unchanged).
    pub fn step(&mut self, params: &mut ParamMap, grads: &ParamMap, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.cfg.beta1.powi(t);
        let c2 = 1.0 - self.cfg.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            if !g.same_shape(p) {
                return Err(Error::Shape {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let m = self.first.get_mut(name).expect("moment tracked");
            let v = self.second.get_mut(name).expect("moment tracked");
            for i in 0..p.len() {
                let gi = g.data()[i];
                let mi = self.cfg.beta1 * m.data()[i] + (1.0 - self.cfg.beta1) * gi;
                let vi = self.cfg.beta2 * v.data()[i] + (1.0 - self.cfg.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / c1;
                let vhat = vi / c2;
                p.data_mut()[i] -= lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
        Ok(())
    }
}

/// Inverse-sqrt learning-rate schedule with linear warm-up:
/// `lr(step) = scale · dim^{-1/2} · min(step^{-1/2}, step · warmup^{-3/2})`.
/// The two branches meet at `step == warmup`, the peak of the schedule.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LrSchedule {
    /// Overall multiplier on the schedule.
    pub scale: f64,
    /// Model hidden size (controls the peak magnitude).
    pub model_dim: usize,
    pub warmup_steps: usize,
}

impl LrSchedule {
    pub fn new(scale: f64, model_dim: usize, warmup_steps: usize) -> Self {
        LrSchedule {
            scale,
            model_dim,
            warmup_steps,
        }
    }

    /// Learning rate at `step` (1-based).
    pub fn lr(&self, step: usize) -> f64 {
        let s = step.max(1) as f64;
        let w = self.warmup_steps.max(1) as f64;
        self.scale * (self.model_dim as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: Vec<f64>) -> ParamMap {
        let mut m = ParamMap::new();
        m.insert("w".into(), Tensor::vector(v));
        m
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut params = one_param(vec![1.0, -2.0]);
        let grads = one_param(vec![0.0, 0.0]);
        let mut state = AdamState::new(&params, AdamConfig::default());
        state.step(&mut params, &grads, 0.1).unwrap();
        assert_eq!(params["w"].data(), &[1.0, -2.0]);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn first_step_moves_against_gradient_sign() {
        let mut params = one_param(vec![0.0, 0.0]);
        let grads = one_param(vec![3.0, -0.25]);
        let mut state = AdamState::new(&params, AdamConfig::default());
        let lr = 0.01;
        state.step(&mut params, &grads, lr).unwrap();
        // Bias-corrected first step: -lr * g/(|g| + eps') ≈ -lr * sign(g).
        assert!((params["w"].data()[0] + lr).abs() < 1e-6);
        assert!((params["w"].data()[1] - lr).abs() < 1e-6);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut params = one_param(vec![1.0, 2.0]);
        let grads = one_param(vec![1.0]);
        let mut state = AdamState::new(&params, AdamConfig::default());
        assert!(state.step(&mut params, &grads, 0.1).is_err());
    }

    #[test]
    fn schedule_peaks_at_warmup() {
        let sched = LrSchedule::new(1.0, 64, 200);
        let peak = sched.lr(200);
        // Increasing before the peak, decreasing after.
        for step in [1, 50, 150, 199] {
            assert!(sched.lr(step) < peak, "step {step}");
            assert!(sched.lr(step) < sched.lr(step + 1));
        }
        for step in [201, 300, 1000] {
            assert!(sched.lr(step) < peak, "step {step}");
            assert!(sched.lr(step) < sched.lr(step - 1));
        }
        // The two branches agree exactly at the corner.
        let w = 200f64;
        let expect = (64f64).powf(-0.5) * w.powf(-0.5);
        assert!((peak - expect).abs() < 1e-15);
    }
}
