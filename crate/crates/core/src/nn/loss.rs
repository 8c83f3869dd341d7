//! Softmax cross-entropy over logits.

use super::{NnError, Scalar, Tensor};

/// Mean cross-entropy over the batch plus the logit gradient
/// `(softmax - onehot) / batch`.
///
/// The softmax subtracts each row's max before exponentiation; logits that
/// fit in the scalar type cannot overflow the exponential.
pub fn loss_and_grad<S: Scalar>(
    logits: &Tensor<S>,
    labels: &[u32],
) -> Result<(S, Tensor<S>), NnError> {
    let (b, classes) = (logits.rows(), logits.cols());
    if labels.len() != b {
        return Err(NnError::ShapeMismatch {
            expected: vec![b],
            got: vec![labels.len()],
        });
    }
    let inv_b = S::ONE / S::from_f64(b as f64);
    let mut grad = Tensor::zeros(&[b, classes]);
    let mut loss = S::ZERO;
    for r in 0..b {
        let label = labels[r] as usize;
        if label >= classes {
            return Err(NnError::BadLabel {
                label: labels[r],
                classes,
            });
        }
        let row = &logits.data()[r * classes..(r + 1) * classes];
        let mut max = row[0];
        for &v in &row[1..] {
            if v > max {
                max = v;
            }
        }
        let mut sum = S::ZERO;
        let grow = &mut grad.data_mut()[r * classes..(r + 1) * classes];
        for j in 0..classes {
            let e = (row[j] - max).exp();
            grow[j] = e;
            sum += e;
        }
        let inv_sum = S::ONE / sum;
        for j in 0..classes {
            grow[j] *= inv_sum;
        }
        // log p = (z - max) - ln(sum), never ln of a flushed-to-zero prob.
        loss += sum.ln() - (row[label] - max);
        grow[label] -= S::ONE;
        for j in 0..classes {
            grow[j] *= inv_b;
        }
    }
    loss *= inv_b;
    if !loss.is_finite() {
        return Err(NnError::NonFinite { context: "loss" });
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_classes() {
        let logits = Tensor::<f64>::zeros(&[2, 4]);
        let (loss, grad) = loss_and_grad(&logits, &[0, 3]).unwrap();
        assert!((loss - (4.0f64).ln()).abs() < 1e-12);
        // softmax is 0.25 everywhere; target entries get -1 before the 1/b scale.
        assert!((grad.at2(0, 0) - (0.25 - 1.0) / 2.0).abs() < 1e-12);
        assert!((grad.at2(0, 1) - 0.25 / 2.0).abs() < 1e-12);
        assert!((grad.at2(1, 3) - (0.25 - 1.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn shift_invariance() {
        let a = Tensor::from_vec(&[1, 3], vec![1.0f64, 2.0, 3.0]).unwrap();
        let b = Tensor::from_vec(&[1, 3], vec![1001.0f64, 1002.0, 1003.0]).unwrap();
        let (la, _) = loss_and_grad(&a, &[1]).unwrap();
        let (lb, _) = loss_and_grad(&b, &[1]).unwrap();
        assert!((la - lb).abs() < 1e-12);
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let logits = Tensor::from_vec(&[1, 2], vec![500.0f32, -500.0]).unwrap();
        let (loss, grad) = loss_and_grad(&logits, &[1]).unwrap();
        assert!(loss.is_finite());
        assert!(grad.all_finite());
    }

    #[test]
    fn rejects_out_of_range_label() {
        let logits = Tensor::<f32>::zeros(&[1, 3]);
        assert!(matches!(
            loss_and_grad(&logits, &[3]),
            Err(NnError::BadLabel { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn grad_rows_sum_to_zero() {
        let logits = Tensor::from_vec(&[2, 3], vec![0.3f64, -1.2, 0.9, 2.0, 0.0, -0.5]).unwrap();
        let (_, grad) = loss_and_grad(&logits, &[2, 0]).unwrap();
        for r in 0..2 {
            let s: f64 = (0..3).map(|j| grad.at2(r, j)).sum();
            assert!(s.abs() < 1e-12);
        }
    }
}
