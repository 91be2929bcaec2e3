//! AdamW with linear warmup and cosine decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    /// Peak learning rate.
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay, applied to matrices only.
    pub weight_decay: f64,
    pub warmup_steps: u64,
    /// Length of the cosine schedule; the rate stays at the floor
    /// afterwards. Without it the rate stays at the peak.
    pub decay_steps: Option<u64>,
    /// Final rate as a fraction of the peak.
    pub min_lr_ratio: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_steps: 0,
            decay_steps: None,
            min_lr_ratio: 0.1,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..1.0).contains(&x);
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!(
                "optim.lr must be positive, got {}",
                self.lr
            )));
        }
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(Error::invalid(
                "optim.beta1 and optim.beta2 must lie in [0, 1)",
            ));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::invalid(
                "optim.eps must be positive and optim.weight_decay non-negative",
            ));
        }
        if !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return Err(Error::invalid("optim.min_lr_ratio must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Learning rate used at optimizer step `step` (0-based).
    pub fn learning_rate(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let Some(decay) = self.decay_steps else {
            return self.lr;
        };
        let span = decay.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        let floor = self.lr * self.min_lr_ratio;
        floor + (self.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// First and second moment estimates, one buffer per parameter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor<f64>]) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            t: 0,
        }
    }

    pub fn update(
        &mut self,
        params: &mut [Tensor<f64>],
        grads: &[Vec<f64>],
        lr: f64,
        cfg: &OptimConfig,
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::invalid(
                "optimizer state does not match the parameters",
            ));
        }
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            if g.len() != p.numel() {
                return Err(Error::invalid("gradient size does not match its parameter"));
            }
            let decay = if p.shape().len() >= 2 {
                cfg.weight_decay
            } else {
                0.0
            };
            for (((x, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *x -= lr * (mhat / (vhat.sqrt() + cfg.eps) + decay * *x);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let cfg = OptimConfig {
            lr: 1.0,
            warmup_steps: 10,
            decay_steps: Some(110),
            min_lr_ratio: 0.1,
            ..Default::default()
        };
        assert!((cfg.learning_rate(0) - 0.1).abs() < 1e-15);
        assert_eq!(cfg.learning_rate(9), 1.0);
        assert_eq!(cfg.learning_rate(10), 1.0);
        assert!((cfg.learning_rate(60) - 0.55).abs() < 1e-12);
        assert!((cfg.learning_rate(110) - 0.1).abs() < 1e-12);
        assert!((cfg.learning_rate(5000) - 0.1).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for s in 10..200 {
            let lr = cfg.learning_rate(s);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn constant_without_decay() {
        let cfg = OptimConfig {
            lr: 0.5,
            ..Default::default()
        };
        assert_eq!(cfg.learning_rate(0), 0.5);
        assert_eq!(cfg.learning_rate(10_000), 0.5);
    }

    #[test]
    fn first_update_moves_by_lr() {
        // with bias correction the first step is lr·sign(g) (up to eps)
        let mut p = vec![Tensor::vector(vec![1.0, -2.0, 0.5])];
        let mut st = AdamState::new(&p);
        let cfg = OptimConfig::default();
        st.update(&mut p, &[vec![0.3, -4.0, 0.0]], 0.01, &cfg)
            .unwrap();
        let d = p[0].data();
        assert!((d[0] - 0.99).abs() < 1e-9);
        assert!((d[1] - -1.99).abs() < 1e-9);
        assert_eq!(d[2], 0.5);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn decay_only_on_matrices() {
        let mut p = vec![
            Tensor::vector(vec![1.0]),
            Tensor::new(vec![1, 1], vec![1.0]).unwrap(),
        ];
        let mut st = AdamState::new(&p);
        let cfg = OptimConfig {
            weight_decay: 0.5,
            ..Default::default()
        };
        st.update(&mut p, &[vec![0.0], vec![0.0]], 0.1, &cfg)
            .unwrap();
        assert_eq!(p[0].data(), &[1.0]);
        assert!((p[1].data()[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = vec![Tensor::vector(vec![3.0, -2.0])];
        let mut st = AdamState::new(&p);
        let cfg = OptimConfig::default();
        for _ in 0..3000 {
            let g: Vec<f64> = p[0].data().iter().map(|x| 2.0 * x).collect();
            st.update(&mut p, &[g], 0.01, &cfg).unwrap();
        }
        assert!(p[0].data().iter().all(|x| x.abs() < 1e-2));
    }
}
