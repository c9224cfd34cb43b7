//! Adam optimizer with bias correction.

use serde::{Deserialize, Serialize};

use crate::scalar::{cast, Scalar};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers are indexed by position in the canonical
/// parameter list, so the same list must be passed to every step.
pub struct Adam<T> {
    hp: AdamParams,
    t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(hp: AdamParams, params: &[(String, Tensor<T>)]) -> Self {
        Adam {
            hp,
            t: 0,
            m: params.iter().map(|(_, p)| vec![T::zero(); p.numel()]).collect(),
            v: params.iter().map(|(_, p)| vec![T::zero(); p.numel()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over all parameters; entries without a gradient are
    /// treated as zero-gradient.
    pub fn step(&mut self, params: &[(String, Tensor<T>)]) {
        assert_eq!(params.len(), self.m.len(), "parameter list changed");
        self.t += 1;
        let b1 = cast::<T>(self.hp.beta1);
        let b2 = cast::<T>(self.hp.beta2);
        let lr = cast::<T>(self.hp.lr);
        let eps = cast::<T>(self.hp.eps);
        let bias1 = T::one() - cast::<T>(self.hp.beta1.powi(self.t as i32));
        let bias2 = T::one() - cast::<T>(self.hp.beta2.powi(self.t as i32));
        for (i, (_, p)) in params.iter().enumerate() {
            if !p.requires_grad() {
                continue;
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            p.update_data(|data, grad| {
                for j in 0..data.len() {
                    let g = grad.map_or(T::zero(), |g| g[j]);
                    m[j] = b1 * m[j] + (T::one() - b1) * g;
                    v[j] = b2 * v[j] + (T::one() - b2) * g * g;
                    let m_hat = m[j] / bias1;
                    let v_hat = v[j] / bias2;
                    data[j] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_scripted_single_parameter_oracle() {
        // Oracle: straight transcription of the update equations for a
        // single scalar with a fixed gradient schedule.
        let hp = AdamParams {
            lr: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        let grads = [0.3, -0.8, 0.05, 1.2, -0.4, 0.0, 0.7, -1.1, 0.2, 0.9];

        let mut theta = 1.5f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for (t, g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            m = hp.beta1 * m + (1.0 - hp.beta1) * g;
            v = hp.beta2 * v + (1.0 - hp.beta2) * g * g;
            let m_hat = m / (1.0 - hp.beta1.powi(t));
            let v_hat = v / (1.0 - hp.beta2.powi(t));
            theta -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
        }

        let p = Tensor::param(vec![1], vec![1.5f64]).unwrap();
        let params = vec![("p".to_string(), p.clone())];
        let mut adam = Adam::new(hp, &params);
        for g in grads {
            p.zero_grad();
            p.accum_grad(&[g]);
            adam.step(&params);
        }
        assert!(
            (p.value()[0] - theta).abs() < 1e-12,
            "{} vs {theta}",
            p.value()[0]
        );
        assert_eq!(adam.step_count(), 10);
    }

    #[test]
    fn frozen_and_gradless_params_stay_put() {
        let frozen = Tensor::new(vec![2], vec![1.0f64, 2.0]).unwrap();
        let gradless = Tensor::param(vec![2], vec![3.0f64, 4.0]).unwrap();
        let params = vec![
            ("frozen".to_string(), frozen.clone()),
            ("gradless".to_string(), gradless.clone()),
        ];
        let mut adam = Adam::new(AdamParams::default(), &params);
        adam.step(&params);
        assert_eq!(frozen.value(), vec![1.0, 2.0]);
        assert_eq!(gradless.value(), vec![3.0, 4.0]);
    }
}
