//! SGD with momentum, weight decay, and a step learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// `(epoch, divisor)` pairs: from `epoch` on, the rate is divided by the
    /// product of all divisors whose epoch has been reached. Epochs are
    /// 1-based and the list must be sorted ascending.
    pub lr_steps: Vec<(u32, f64)>,
    pub batch_size: usize,
    pub epochs: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_steps: vec![(61, 5.0), (121, 5.0), (161, 5.0)],
            batch_size: 128,
            epochs: 200,
        }
    }
}

/// Learning rate in force during `epoch` (1-based).
pub fn lr_schedule(config: &TrainConfig, epoch: u32) -> f64 {
    let mut lr = config.base_lr;
    for &(step_epoch, divisor) in &config.lr_steps {
        if epoch >= step_epoch {
            lr /= divisor;
        }
    }
    lr
}

/// Momentum buffers for one layer.
#[derive(Clone, Debug)]
pub struct OptimizerState<S: Scalar> {
    pub weight_velocity: Tensor<S>,
    pub bias_velocity: Tensor<S>,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        OptimizerState {
            weight_velocity: Tensor::zeros(&[in_dim, out_dim]),
            bias_velocity: Tensor::zeros(&[out_dim]),
        }
    }
}

/// One SGD step on a parameter tensor:
///
/// ```text
/// g <- g + wd * w
/// v <- momentum * v + g
/// w <- w - lr * v
/// ```
///
/// Weight decay is skipped for bias tensors by passing `weight_decay = 0`.
pub fn sgd_step<S: Scalar>(
    param: &mut Tensor<S>,
    velocity: &mut Tensor<S>,
    grad: &Tensor<S>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    debug_assert_eq!(param.shape(), grad.shape());
    debug_assert_eq!(param.shape(), velocity.shape());
    let lr = S::from_f64(lr);
    let momentum = S::from_f64(momentum);
    let wd = S::from_f64(weight_decay);
    let (p, v, g) = (param.data_mut(), velocity.data_mut(), grad.data());
    for i in 0..p.len() {
        let gi = g[i] + wd * p[i];
        v[i] = momentum * v[i] + gi;
        p[i] -= lr * v[i];
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_steps_down_at_boundaries() {
        let config = TrainConfig::default();
        assert_eq!(lr_schedule(&config, 1), 0.1);
        assert_eq!(lr_schedule(&config, 60), 0.1);
        assert_eq!(lr_schedule(&config, 61), 0.1 / 5.0);
        assert_eq!(lr_schedule(&config, 120), 0.1 / 5.0);
        assert_eq!(lr_schedule(&config, 121), 0.1 / 25.0);
        assert_eq!(lr_schedule(&config, 161), 0.1 / 125.0);
        assert_eq!(lr_schedule(&config, 200), 0.1 / 125.0);
    }

    #[test]
    fn step_matches_recurrence() {
        let mut p = Tensor::from_vec(&[2], vec![1.0f64, -2.0]).unwrap();
        let mut v = Tensor::from_vec(&[2], vec![0.5f64, 0.0]).unwrap();
        let g = Tensor::from_vec(&[2], vec![0.1f64, 0.2]).unwrap();
        sgd_step(&mut p, &mut v, &g, 0.1, 0.9, 0.01);
        // g0 = 0.1 + 0.01*1 = 0.11; v0 = 0.9*0.5 + 0.11 = 0.56; p0 = 1 - 0.056
        assert!((v.data()[0] - 0.56).abs() < 1e-15);
        assert!((p.data()[0] - 0.944).abs() < 1e-15);
        // g1 = 0.2 - 0.02 = 0.18; v1 = 0.18; p1 = -2 - 0.018
        assert!((v.data()[1] - 0.18).abs() < 1e-15);
        assert!((p.data()[1] + 2.018).abs() < 1e-15);
    }

    #[test]
    fn zero_momentum_zero_decay_is_plain_sgd() {
        let mut p = Tensor::from_vec(&[1], vec![3.0f32]).unwrap();
        let mut v = Tensor::zeros(&[1]);
        let g = Tensor::from_vec(&[1], vec![2.0f32]).unwrap();
        sgd_step(&mut p, &mut v, &g, 0.5, 0.0, 0.0);
        assert_eq!(p.data()[0], 2.0);
        sgd_step(&mut p, &mut v, &g, 0.5, 0.0, 0.0);
        assert_eq!(p.data()[0], 1.0);
    }
}
