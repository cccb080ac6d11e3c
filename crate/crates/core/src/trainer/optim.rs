use serde::{Deserialize, Serialize};

use crate::backbone::{ModelState, ParamGrads};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Adam {
    config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Adam {
    pub fn new(state: &ModelState, config: AdamConfig) -> Self {
        let zeros = || state.params().iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
        Self {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn step(&mut self, state: &mut ModelState, grads: &ParamGrads, lr: f64) {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for (i, p) in state.params_mut().iter_mut().enumerate() {
            let g = grads.0[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (k, w) in p.data_mut().iter_mut().enumerate() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                *w -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
            }
        }
    }
}

/// Rescales `grads` in place so their global norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut ParamGrads, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;

    #[test]
    fn first_adam_step_moves_each_weight_by_lr() {
        let mut state = ModelState::init(&BackboneConfig {
            hidden_size: 4,
            n_heads: 1,
            n_layers: 1,
            max_seq_len: 8,
            ..Default::default()
        })
        .unwrap();
        let before = state.params()[0].clone();
        let mut g = ParamGrads::zeros_like(&state);
        g.0[0].data_mut()[0] = 3.0;
        g.0[0].data_mut()[1] = -0.5;
        let mut adam = Adam::new(&state, AdamConfig::default());
        adam.step(&mut state, &g, 0.01);
        let after = &state.params()[0];
        // Bias-corrected first step: m̂/√v̂ = sign(g).
        assert!((before.data()[0] - after.data()[0] - 0.01).abs() < 1e-9);
        assert!((after.data()[1] - before.data()[1] - 0.01).abs() < 1e-9);
        assert_eq!(before.data()[2], after.data()[2]);
    }

    #[test]
    fn clipping() {
        let state = ModelState::init(&BackboneConfig {
            hidden_size: 4,
            n_heads: 1,
            n_layers: 1,
            max_seq_len: 8,
            ..Default::default()
        })
        .unwrap();
        let mut g = ParamGrads::zeros_like(&state);
        g.0[0].data_mut()[0] = 3.0;
        g.0[1].data_mut()[0] = 4.0;
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-15);
        assert!((g.0[0].data()[0] - 0.6).abs() < 1e-15);
        let mut small = ParamGrads::zeros_like(&state);
        small.0[0].data_mut()[0] = 0.5;
        assert_eq!(clip_global_norm(&mut small, 1.0), 0.5);
        assert_eq!(small.0[0].data()[0], 0.5);
    }
}
