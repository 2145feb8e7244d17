use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Default::default() }
    }
}

/// Adam with bias correction. Moment buffers are created zeroed on the
/// first step, one per parameter.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Result<Self> {
        let ok = config.lr > 0.0
            && config.beta1 > 0.0
            && config.beta1 < 1.0
            && config.beta2 > 0.0
            && config.beta2 < 1.0
            && config.eps > 0.0;
        if !ok {
            return Err(Error::invalid(format!("invalid Adam configuration {config:?}")));
        }
        Ok(Adam {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::invalid(format!(
                "adam: {} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
            self.second = self.first.clone();
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            if p.1.shape() != g.shape() || m.shape() != g.shape() {
                return Err(Error::shape("adam_step", p.1.shape(), g.shape()));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .tensors_mut()
            .zip(grads)
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            let (pd, gd) = (p.data_mut(), g.data());
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                md[i] = beta1 * md[i] + (1.0 - beta1) * gd[i];
                vd[i] = beta2 * vd[i] + (1.0 - beta2) * gd[i] * gd[i];
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                pd[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::scalar(value));
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = single(0.7);
        let mut adam = Adam::new(AdamConfig::default()).unwrap();
        for _ in 0..3 {
            adam.step(&mut s, &[Tensor::scalar(0.0)]).unwrap();
        }
        assert_eq!(s.get(super::super::ParamId(0)).data(), &[0.7]);
        assert_eq!(adam.steps(), 3);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = 1, v̂ = 1 at step 1, so Δ = lr / (1 + eps)
        let mut s = single(0.0);
        let mut adam = Adam::new(AdamConfig::default()).unwrap();
        adam.step(&mut s, &[Tensor::scalar(1.0)]).unwrap();
        let w = s.get(super::super::ParamId(0)).data()[0];
        assert!((w + 0.001 / (1.0 + 1e-8)).abs() < 1e-15, "{w}");
    }

    #[test]
    fn repeated_steps_move_monotonically() {
        let mut s = single(0.0);
        let mut adam = Adam::new(AdamConfig::default()).unwrap();
        adam.step(&mut s, &[Tensor::scalar(2.0)]).unwrap();
        let a = s.get(super::super::ParamId(0)).data()[0];
        adam.step(&mut s, &[Tensor::scalar(2.0)]).unwrap();
        let b = s.get(super::super::ParamId(0)).data()[0];
        assert!(a < 0.0 && b < a);
    }

    #[test]
    fn shape_mismatch_errors() {
        let mut s = single(0.0);
        let mut adam = Adam::new(AdamConfig::default()).unwrap();
        assert!(adam.step(&mut s, &[Tensor::vector(vec![1.0, 2.0])]).is_err());
        assert!(adam.step(&mut s, &[]).is_err());
    }

    #[test]
    fn rejects_bad_betas() {
        let cfg = AdamConfig { beta1: 1.0, ..Default::default() };
        assert!(Adam::new(cfg).is_err());
    }
}
