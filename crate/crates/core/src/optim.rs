//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderParams;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if self.eps.is_nan() || self.eps <= 0.0 || self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::Config("eps must be > 0 and weight_decay >= 0".into()));
        }
        Ok(())
    }
}

/// Weight decay touches only the `.weight` matrices of linear layers.
pub fn decays(name: &str) -> bool {
    name.ends_with(".weight")
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub m: EncoderParams,
    pub v: EncoderParams,
    pub step: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &EncoderParams) -> Self {
        Self {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    pub fn step(&mut self, params: &mut EncoderParams, grads: &EncoderParams, lr: f64) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let names: Vec<bool> = params.tensors().into_iter().map(|(n, _)| decays(&n)).collect();
        let g_all = grads.tensors();
        let m_all = self.m.tensors_mut();
        let v_all = self.v.tensors_mut();
        for ((((p, (_, g)), m), v), decay) in params.tensors_mut().into_iter().zip(g_all).zip(m_all).zip(v_all).zip(names) {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = c.beta1 * m.data[i] + (1.0 - c.beta1) * gi;
                v.data[i] = c.beta2 * v.data[i] + (1.0 - c.beta2) * gi * gi;
                if decay {
                    p.data[i] -= lr * c.weight_decay * p.data[i];
                }
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                p.data[i] -= lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init_params, EncoderConfig};

    fn tiny() -> EncoderParams {
        init_params(&EncoderConfig {
            grid_size: 2,
            channels: 2,
            width: 4,
            blocks: 1,
            heads: 1,
            num_queries: 2,
            text_dim: 3,
            ..EncoderConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = tiny();
        let before = p.clone();
        let mut g = p.zeros_like();
        g.queries.data[0] = 0.3;
        g.queries.data[1] = -2.0;
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        opt.step(&mut p, &g, 1e-3);
        // Bias-corrected first step is lr * g / (|g| + eps).
        let d0 = p.queries.data[0] - before.queries.data[0];
        let d1 = p.queries.data[1] - before.queries.data[1];
        assert!((d0 + 1e-3).abs() < 1e-10);
        assert!((d1 - 1e-3).abs() < 1e-10);
        // Non-decayed tensor with zero gradient stays put.
        assert_eq!(p.queries.data[2], before.queries.data[2]);
    }

    #[test]
    fn decay_only_on_weights() {
        let mut p = tiny();
        p.patch_proj.bias.data[0] = 1.0;
        let before = p.clone();
        let g = p.zeros_like();
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        opt.step(&mut p, &g, 0.5);
        assert_eq!(p.patch_proj.bias.data[0], 1.0);
        assert_eq!(p.patch_proj.weight.data[0], before.patch_proj.weight.data[0] * (1.0 - 0.005));
    }
}
