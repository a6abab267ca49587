use serde::{Deserialize, Serialize};

use crate::ptformer::Matrix;

/// Moment coefficients and ε; the usual published defaults.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with decoupled weight decay. Moments are kept per tensor, aligned
/// with the parameter order handed to [`AdamW::step`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl AdamW {
    pub fn new<'a>(config: AdamConfig, shapes: impl IntoIterator<Item = &'a Matrix>) -> Self {
        let (m, v) = shapes
            .into_iter()
            .map(|p| (Matrix::zeros(p.nrows(), p.ncols()), Matrix::zeros(p.nrows(), p.ncols())))
            .unzip();
        AdamW { config, step: 0, m, v }
    }

    /// One update. `params[i]` is skipped (moments untouched) where
    /// `trainable[i]` is false.
    pub fn step(&mut self, params: Vec<&mut Matrix>, grads: Vec<&Matrix>, trainable: &[bool], lr: f64, weight_decay: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powf(self.step as f64);
        let bc2 = 1.0 - beta2.powf(self.step as f64);
        for (i, (theta, g)) in params.into_iter().zip(grads).enumerate() {
            if !trainable[i] {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..theta.len() {
                let gk = g[k];
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                theta[k] -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * theta[k]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut p = Matrix::from_row_slice(2, 2, &[1.0, -2.0, 3.5, 0.25]);
        let before = p.clone();
        let g = Matrix::zeros(2, 2);
        let mut opt = AdamW::new(AdamConfig::default(), [&p]);
        opt.step(vec![&mut p], vec![&g], &[true], 1e-3, 0.0);
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let mut p = Matrix::from_row_slice(1, 3, &[0.0, 0.0, 0.0]);
        let g = Matrix::from_row_slice(1, 3, &[2.0, -0.5, 0.0]);
        let mut opt = AdamW::new(AdamConfig::default(), [&p]);
        opt.step(vec![&mut p], vec![&g], &[true], 0.1, 0.0);
        // m̂ = g, v̂ = g², so the step is lr·g/(|g|+ε)
        assert!((p[0] + 0.1 * 2.0 / (2.0 + 1e-8)).abs() < 1e-15);
        assert!((p[1] - 0.1 * 0.5 / (0.5 + 1e-8)).abs() < 1e-15);
        assert_eq!(p[2], 0.0);
    }

    #[test]
    fn decay_is_decoupled_and_frozen_tensors_stay() {
        let mut p = Matrix::from_element(1, 1, 2.0);
        let mut q = Matrix::from_element(1, 1, 5.0);
        let g = Matrix::zeros(1, 1);
        let mut opt = AdamW::new(AdamConfig::default(), [&p, &q]);
        opt.step(vec![&mut p, &mut q], vec![&g, &g], &[true, false], 0.1, 0.01);
        assert!((p[0] - (2.0 - 0.1 * 0.01 * 2.0)).abs() < 1e-15);
        assert_eq!(q[0], 5.0);
    }

    #[test]
    fn zero_learning_rate_never_moves() {
        let mut p = Matrix::from_element(2, 1, 0.7);
        let g = Matrix::from_element(2, 1, 3.0);
        let mut opt = AdamW::new(AdamConfig::default(), [&p]);
        for _ in 0..10 {
            opt.step(vec![&mut p], vec![&g], &[true], 0.0, 0.01);
        }
        assert_eq!(p, Matrix::from_element(2, 1, 0.7));
    }
}
