//! Adam with decoupled weight decay over the named parameter tensors.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mmdit::ModelParams;
use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("optimizer config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.01,
            eps: 1e-8,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(OptimError::Config(format!("lr {} must be positive", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(OptimError::Config(format!("{name} {b} outside [0, 1)")));
            }
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(OptimError::Config(format!(
                "weight decay {} must be nonnegative",
                self.weight_decay
            )));
        }
        if !(self.eps > 0.0) {
            return Err(OptimError::Config(format!("eps {} must be positive", self.eps)));
        }
        Ok(())
    }
}

/// Optimizer state; moment containers mirror the model's tensor layout.
pub struct AdamW<S> {
    pub cfg: AdamWConfig,
    pub m: ModelParams<S>,
    pub v: ModelParams<S>,
    pub step: u64,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(params: &ModelParams<S>, cfg: AdamWConfig) -> Result<Self, OptimError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        })
    }

    /// One bias-corrected update. Decay applies uniformly to every tensor.
    pub fn step(&mut self, params: &mut ModelParams<S>, grads: &ModelParams<S>) {
        self.step += 1;
        let lr = S::from_f64(self.cfg.lr);
        let b1 = S::from_f64(self.cfg.beta1);
        let b2 = S::from_f64(self.cfg.beta2);
        let one = S::one();
        let eps = S::from_f64(self.cfg.eps);
        let wd = S::from_f64(self.cfg.weight_decay);
        let bc1 = S::from_f64(1.0 - self.cfg.beta1.powi(self.step as i32));
        let bc2 = S::from_f64(1.0 - self.cfg.beta2.powi(self.step as i32));

        let mut p_tensors = params.named_tensors_mut();
        let g_tensors = grads.named_tensors();
        let mut m_tensors = self.m.named_tensors_mut();
        let mut v_tensors = self.v.named_tensors_mut();
        debug_assert_eq!(p_tensors.len(), g_tensors.len());

        for i in 0..p_tensors.len() {
            debug_assert_eq!(p_tensors[i].0, g_tensors[i].0, "tensor order must match");
            let n = p_tensors[i].1.len();
            for e in 0..n {
                let g = g_tensors[i].1.get(e);
                let m = b1 * m_tensors[i].1.get(e) + (one - b1) * g;
                let v = b2 * v_tensors[i].1.get(e) + (one - b2) * g * g;
                m_tensors[i].1.set(e, m);
                v_tensors[i].1.set(e, v);
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                let p = p_tensors[i].1.get(e);
                let update = m_hat / (v_hat.sqrt() + eps) + wd * p;
                p_tensors[i].1.set(e, p - lr * update);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::CodecSpec;
    use crate::mmdit::{ModelConfig, WindowSpec};

    fn tiny_params() -> ModelParams<f64> {
        let cfg = ModelConfig {
            d_model: 8,
            n_heads: 2,
            depth: 1,
            d_ff: 12,
            d_text: 4,
            t_freq_dim: 4,
            codec: CodecSpec {
                temporal_factor: 2,
                spatial_factor: 2,
                patch_size: 2,
                pixel_channels: 1,
            },
            window: WindowSpec {
                frames: 3,
                height: 8,
                width: 8,
            },
        };
        ModelParams::init(cfg, 50).unwrap()
    }

    fn ones_like(p: &ModelParams<f64>) -> ModelParams<f64> {
        let mut g = p.zeros_like();
        for (_, mut t) in g.named_tensors_mut() {
            let n = t.len();
            for i in 0..n {
                t.set(i, 1.0);
            }
        }
        g
    }

    #[test]
    fn config_validation_rejects_nonsense() {
        assert!(AdamWConfig::default().validate().is_ok());
        for bad in [
            AdamWConfig { lr: 0.0, ..Default::default() },
            AdamWConfig { beta1: 1.0, ..Default::default() },
            AdamWConfig { beta2: -0.1, ..Default::default() },
            AdamWConfig { weight_decay: -1.0, ..Default::default() },
            AdamWConfig { eps: 0.0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut params = tiny_params();
        let before = params.null_ref[0];
        let grads = ones_like(&params);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(&params, cfg).unwrap();
        opt.step(&mut params, &grads);
        // bias-corrected first step: m_hat = g, v_hat = g², update ≈ lr·sign(g)
        let moved = before - params.null_ref[0];
        let expect = cfg.lr * 1.0 / (1.0 + cfg.eps);
        assert!((moved - expect).abs() < 1e-12, "moved {moved}");
    }

    #[test]
    fn zero_grads_decay_weights_geometrically() {
        let mut params = tiny_params();
        let before = params.video_in.weight.clone();
        let grads = params.zeros_like();
        let cfg = AdamWConfig::default();
        let mut opt = AdamW::new(&params, cfg).unwrap();
        opt.step(&mut params, &grads);
        let factor = 1.0 - cfg.lr * cfg.weight_decay;
        for (a, b) in params.video_in.weight.iter().zip(before.iter()) {
            assert!((a - b * factor).abs() < 1e-15);
        }
    }

    #[test]
    fn updates_touch_only_tensors_with_gradient_when_decay_off() {
        let mut params = tiny_params();
        let before = params.clone();
        let mut grads = params.zeros_like();
        grads.audio_in[[3, 2]] = 1.0;
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(&params, cfg).unwrap();
        opt.step(&mut params, &grads);
        assert!(params.audio_in[[3, 2]] != before.audio_in[[3, 2]]);
        assert_eq!(params.video_in, before.video_in);
        assert_eq!(params.null_text, before.null_text);
        assert_eq!(params.blocks[0].visual.q.weight, before.blocks[0].visual.q.weight);
    }

    #[test]
    fn repeated_runs_are_bitwise_identical() {
        let run = || {
            let mut params = tiny_params();
            let grads = ones_like(&params);
            let mut opt = AdamW::new(&params, AdamWConfig::default()).unwrap();
            for _ in 0..5 {
                opt.step(&mut params, &grads);
            }
            params
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn converges_on_quadratic_objective() {
        // minimize mean (p - target)² elementwise over one tensor
        let mut params = tiny_params();
        let target = 0.37;
        let cfg = AdamWConfig {
            lr: 0.05,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(&params, cfg).unwrap();
        for k in 0..1000 {
            // constant lr leaves an lr-sized oscillation, so decay it
            opt.cfg.lr = 0.05 * 0.99f64.powi(k);
            let mut grads = params.zeros_like();
            let n = params.null_audio.len();
            for i in 0..n {
                grads.null_audio[i] = 2.0 * (params.null_audio[i] - target);
            }
            opt.step(&mut params, &grads);
        }
        for &v in params.null_audio.iter() {
            assert!((v - target).abs() < 1e-3, "value {v}");
        }
    }
}
