use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

/// Linear warmup to `max_learning_rate`, then inverse-time decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TrainSchedule {
    pub max_learning_rate: f64,
    pub warmup_steps: u64,
    pub batch_size: usize,
    pub steps: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            max_learning_rate: 3e-3,
            warmup_steps: 100,
            batch_size: 128,
            steps: 2000,
        }
    }
}

impl TrainSchedule {
    /// `lr(0) = 0`, `lr(warmup) = max`, `max * warmup / step` afterwards.
    pub fn learning_rate(&self, step: u64) -> f64 {
        let max = self.max_learning_rate;
        if self.warmup_steps == 0 {
            return if step == 0 { max } else { max / step as f64 };
        }
        if step <= self.warmup_steps {
            max * step as f64 / self.warmup_steps as f64
        } else {
            max * self.warmup_steps as f64 / step as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; non-positive disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 1.0,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &[Array2<f64>]) -> Self {
        AdamW {
            config,
            m: params.iter().map(|p| Array2::zeros(p.dim())).collect(),
            v: params.iter().map(|p| Array2::zeros(p.dim())).collect(),
            t: 0,
        }
    }

    /// Applies one update. `decay[i]` selects tensors that receive weight decay.
    /// Returns the gradient norm before clipping.
    pub fn step(&mut self, params: &mut [Array2<f64>], grads: &mut [Array2<f64>], decay: &[bool], lr: f64) -> f64 {
        let c = self.config;
        let norm = grads.iter().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
        if c.clip_norm > 0.0 && norm > c.clip_norm {
            let s = c.clip_norm / norm;
            for g in grads.iter_mut() {
                g.mapv_inplace(|x| x * s);
            }
        }
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let wd = if decay[i] { c.weight_decay } else { 0.0 };
            Zip::from(p)
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .and(&grads[i])
                .for_each(|p, m, v, &g| {
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    let update = (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
                    *p -= lr * (update + wd * *p);
                });
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_then_inverse_time() {
        let s = TrainSchedule {
            max_learning_rate: 1e-3,
            warmup_steps: 100,
            ..TrainSchedule::default()
        };
        assert_eq!(s.learning_rate(0), 0.0);
        assert!((s.learning_rate(50) - 0.5e-3).abs() < 1e-15);
        assert_eq!(s.learning_rate(100), 1e-3);
        assert!((s.learning_rate(101) - 1e-3 * 100.0 / 101.0).abs() < 1e-15);
        let mut prev = s.learning_rate(100);
        for step in 101..3000 {
            let lr = s.learning_rate(step);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut params = vec![Array2::from_elem((1, 2), 1.0)];
        let mut grads = vec![Array2::from_shape_vec((1, 2), vec![0.5, -0.25]).unwrap()];
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.0,
                clip_norm: 0.0,
                ..AdamWConfig::default()
            },
            &params,
        );
        opt.step(&mut params, &mut grads, &[true], 0.1);
        assert!((params[0][[0, 0]] - 0.9).abs() < 1e-6);
        assert!((params[0][[0, 1]] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn clipping_bounds_the_gradient() {
        let mut params = vec![Array2::zeros((1, 2))];
        let mut grads = vec![Array2::from_shape_vec((1, 2), vec![30.0, 40.0]).unwrap()];
        let mut opt = AdamW::new(AdamWConfig::default(), &params);
        let norm = opt.step(&mut params, &mut grads, &[false], 0.0);
        assert_eq!(norm, 50.0);
        let clipped = grads[0].iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((clipped - 1.0).abs() < 1e-12);
    }
}
