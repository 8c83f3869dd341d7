//! Dense layers and their forward/backward kernels.

use super::{NnError, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    pub fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
        }
    }

    pub fn from_code(v: u8) -> Option<Activation> {
        match v {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Relu),
            _ => None,
        }
    }
}

/// One dense layer: `Y = act(X W + b)` with `W` of shape `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer<S: Scalar> {
    pub weights: Tensor<S>,
    pub bias: Tensor<S>,
    pub activation: Activation,
}

impl<S: Scalar> Layer<S> {
    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Layer {
            weights: Tensor::zeros(&[in_dim, out_dim]),
            bias: Tensor::zeros(&[out_dim]),
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    /// `act(X W + b)`. Each output element accumulates bias first, then the
    /// products over the input index in ascending order.
    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>, NnError> {
        if x.shape().len() != 2 || x.cols() != self.in_dim() {
            return Err(NnError::ShapeMismatch {
                expected: vec![x.rows(), self.in_dim()],
                got: x.shape().to_vec(),
            });
        }
        let (b, in_dim, out_dim) = (x.rows(), self.in_dim(), self.out_dim());
        let mut y = Tensor::zeros(&[b, out_dim]);
        for r in 0..b {
            let yrow = &mut y.data_mut()[r * out_dim..(r + 1) * out_dim];
            yrow.copy_from_slice(self.bias.data());
            for k in 0..in_dim {
                let xv = x.at2(r, k);
                let wrow = &self.weights.data()[k * out_dim..(k + 1) * out_dim];
                for j in 0..out_dim {
                    yrow[j] += xv * wrow[j];
                }
            }
        }
        if self.activation == Activation::Relu {
            for v in y.data_mut() {
                if !(*v > S::ZERO) {
                    *v = S::ZERO;
                }
            }
        }
        Ok(y)
    }

    /// Gradients for one layer given its cached input `x`, cached output
    /// `y`, and the loss gradient `dy` with respect to `y`. Returns
    /// `(dx, dw, db)`.
    pub fn backward(
        &self,
        x: &Tensor<S>,
        y: &Tensor<S>,
        dy: &Tensor<S>,
    ) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
        let (b, in_dim, out_dim) = (x.rows(), self.in_dim(), self.out_dim());
        debug_assert_eq!(dy.shape(), &[b, out_dim]);

        // Activation gradient. ReLU output is zero exactly where the unit
        // was clamped, so the output doubles as the mask.
        let mut dpre = dy.clone();
        if self.activation == Activation::Relu {
            for i in 0..dpre.len() {
                if !(y.data()[i] > S::ZERO) {
                    dpre.data_mut()[i] = S::ZERO;
                }
            }
        }

        let mut dw = Tensor::zeros(&[in_dim, out_dim]);
        let mut db = Tensor::zeros(&[out_dim]);
        let mut dx = Tensor::zeros(&[b, in_dim]);
        for r in 0..b {
            let drow = &dpre.data()[r * out_dim..(r + 1) * out_dim];
            for j in 0..out_dim {
                db.data_mut()[j] += drow[j];
            }
            for k in 0..in_dim {
                let xv = x.at2(r, k);
                let wrow = &self.weights.data()[k * out_dim..(k + 1) * out_dim];
                let dwrow = &mut dw.data_mut()[k * out_dim..(k + 1) * out_dim];
                let mut acc = S::ZERO;
                for j in 0..out_dim {
                    dwrow[j] += xv * drow[j];
                    acc += drow[j] * wrow[j];
                }
                dx.set2(r, k, acc);
            }
        }
        (dx, dw, db)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_applies_weights_bias_activation() {
        let mut layer = Layer::<f32>::zeros(2, 2, Activation::Relu);
        layer.weights = Tensor::from_vec(&[2, 2], vec![1., -1., 2., 0.5]).unwrap();
        layer.bias = Tensor::from_vec(&[2], vec![0.5, -0.5]).unwrap();
        let x = Tensor::from_vec(&[1, 2], vec![1., 1.]).unwrap();
        // Pre-activation: [1*1 + 1*2 + 0.5, 1*(-1) + 1*0.5 - 0.5] = [3.5, -1.0]
        let y = layer.forward(&x).unwrap();
        assert_eq!(y.data(), &[3.5, 0.0]);

        let mut id = layer.clone();
        id.activation = Activation::Identity;
        assert_eq!(id.forward(&x).unwrap().data(), &[3.5, -1.0]);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let layer = Layer::<f32>::zeros(3, 2, Activation::Relu);
        let x = Tensor::<f32>::zeros(&[1, 2]);
        assert!(layer.forward(&x).is_err());
    }

    #[test]
    fn backward_identity_matches_hand_computation() {
        // Identity activation, b=1: dx = dy W^T, dw = x^T dy, db = dy.
        let mut layer = Layer::<f64>::zeros(2, 2, Activation::Identity);
        layer.weights = Tensor::from_vec(&[2, 2], vec![1., 2., 3., 4.]).unwrap();
        let x = Tensor::from_vec(&[1, 2], vec![5., 6.]).unwrap();
        let y = layer.forward(&x).unwrap();
        let dy = Tensor::from_vec(&[1, 2], vec![0.5, -1.0]).unwrap();
        let (dx, dw, db) = layer.backward(&x, &y, &dy);
        assert_eq!(dx.data(), &[0.5 * 1. + (-1.0) * 2., 0.5 * 3. + (-1.0) * 4.]);
        assert_eq!(dw.data(), &[2.5, -5.0, 3.0, -6.0]);
        assert_eq!(db.data(), &[0.5, -1.0]);
    }

    #[test]
    fn backward_masks_clamped_units() {
        let mut layer = Layer::<f64>::zeros(1, 2, Activation::Relu);
        layer.weights = Tensor::from_vec(&[1, 2], vec![1., -1.]).unwrap();
        let x = Tensor::from_vec(&[1, 1], vec![2.]).unwrap();
        let y = layer.forward(&x).unwrap();
        assert_eq!(y.data(), &[2., 0.]);
        let dy = Tensor::from_vec(&[1, 2], vec![1., 1.]).unwrap();
        let (dx, dw, db) = layer.backward(&x, &y, &dy);
        assert_eq!(db.data(), &[1., 0.]);
        assert_eq!(dw.data(), &[2., 0.]);
        assert_eq!(dx.data(), &[1.]);
    }
}
