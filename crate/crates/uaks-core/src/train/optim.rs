//! Adam with optional global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::model::{ModelGrads, ModelParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm clip applied before the update; `None` disables.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(5.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ModelParams, cfg: AdamConfig) -> Self {
        let shapes: Vec<usize> = params.flat_tensors().iter().map(|s| s.len()).collect();
        Adam {
            cfg,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &mut ModelGrads, lr: f64) {
        if let Some(clip) = self.cfg.clip_norm {
            let norm = grads.global_norm();
            if norm > clip {
                grads.scale(clip / norm);
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.cfg.beta1.powf(t);
        let bc2 = 1.0 - self.cfg.beta2.powf(t);
        for ((slice, grad), (m, v)) in params
            .flat_tensors_mut()
            .into_iter()
            .zip(grads.flat_tensors())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..slice.len() {
                let g = grad[i];
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * g;
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                slice[i] -= lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Alphabet;
    use crate::model::{init_params, ArchConfig};

    #[test]
    fn adam_moves_parameters_against_the_gradient() {
        let alphabet = Alphabet::new(["a"]).unwrap();
        let arch = ArchConfig::reduced(2);
        let mut params = init_params(&alphabet, &arch, 0).unwrap();
        let before: f64 = params.flat_tensors().iter().flat_map(|s| s.iter()).sum();
        let mut grads = ModelGrads::zeros_like(&params);
        for s in grads.flat_tensors_mut() {
            for v in s {
                *v = 1.0;
            }
        }
        let mut adam = Adam::new(&params, AdamConfig::default());
        adam.step(&mut params, &mut grads, 0.1);
        let after: f64 = params.flat_tensors().iter().flat_map(|s| s.iter()).sum();
        assert!(after < before, "uniform positive gradient must lower the sum");
    }

    #[test]
    fn clipping_bounds_the_update() {
        let alphabet = Alphabet::new(["a"]).unwrap();
        let arch = ArchConfig::reduced(2);
        let params = init_params(&alphabet, &arch, 0).unwrap();
        let mut grads = ModelGrads::zeros_like(&params);
        for s in grads.flat_tensors_mut() {
            for v in s {
                *v = 1000.0;
            }
        }
        let cfg = AdamConfig {
            clip_norm: Some(1.0),
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(&params, cfg);
        let mut p = params.clone();
        adam.step(&mut p, &mut grads, 0.1);
        assert!(grads.global_norm() <= 1.0 + 1e-9);
    }
}
