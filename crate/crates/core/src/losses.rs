//! Soft Dice and L1 reconstruction losses with their gradients.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Smoothing term in numerator and denominator of the soft Dice ratio.
pub const DICE_EPS: f64 = 1e-6;

/// Checks that `truth` is a valid `[.., C, H, W]` one-hot encoding: entries are
/// 0 or 1 and, with more than one channel, exactly one channel is set per pixel.
pub fn validate_one_hot<T: Scalar>(truth: &[T], channels: usize, plane: usize) -> Result<()> {
    if truth.iter().any(|&v| v != T::zero() && v != T::one()) {
        return Err(Error::InvalidLabel("one-hot mask entries must be 0 or 1".into()));
    }
    if channels > 1 {
        for sample in truth.chunks_exact(channels * plane) {
            for p in 0..plane {
                let active = (0..channels).filter(|&c| sample[c * plane + p] == T::one()).count();
                if active != 1 {
                    return Err(Error::InvalidLabel(format!(
                        "pixel {p} has {active} active channels, expected exactly one"
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Soft Dice loss of one sample laid out as `[C, H*W]`, with its gradient
/// with respect to `pred`.
pub fn dice_sample<T: Scalar>(pred: &[T], truth: &[T], channels: usize) -> (T, Vec<T>) {
    let plane = pred.len() / channels;
    let eps = T::from_f64(DICE_EPS);
    let two = T::from_f64(2.0);
    let inv_c = T::one() / T::from_f64(channels as f64);
    let mut loss = T::one();
    let mut grad = vec![T::zero(); pred.len()];
    for c in 0..channels {
        let p = &pred[c * plane..(c + 1) * plane];
        let t = &truth[c * plane..(c + 1) * plane];
        let mut inter = T::zero();
        let mut p2 = T::zero();
        let mut t2 = T::zero();
        for (&pv, &tv) in p.iter().zip(t) {
            inter += pv * tv;
            p2 += pv * pv;
            t2 += tv * tv;
        }
        let num = two * inter + eps;
        let den = p2 + t2 + eps;
        loss -= inv_c * num / den;
        for ((g, &pv), &tv) in grad[c * plane..(c + 1) * plane].iter_mut().zip(p).zip(t) {
            *g = -inv_c * (two * tv / den - num * two * pv / (den * den));
        }
    }
    (loss, grad)
}

/// Mean soft Dice loss over the samples of `[N, C, H, W]` (or a single
/// `[C, H, W]`) predictions against one-hot truth.
pub fn dice_loss<T: Scalar>(pred: &Tensor<T>, truth: &Tensor<T>) -> Result<T> {
    if pred.shape() != truth.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs truth {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    let (n, c, plane) = match *pred.shape() {
        [c, h, w] => (1, c, h * w),
        [n, c, h, w] => (n, c, h * w),
        ref s => return Err(Error::Shape(format!("dice loss needs CHW or NCHW, got {s:?}"))),
    };
    if n == 0 || c == 0 || plane == 0 {
        return Err(Error::Shape("dice loss on an empty tensor".into()));
    }
    validate_one_hot(truth.data(), c, plane)?;
    let total: T = pred
        .data()
        .chunks_exact(c * plane)
        .zip(truth.data().chunks_exact(c * plane))
        .map(|(p, t)| dice_sample(p, t, c).0)
        .sum();
    Ok(total / T::from_f64(n as f64))
}

/// Mean absolute difference.
pub fn reconstruction_loss<T: Scalar>(x: &Tensor<T>, x_hat: &Tensor<T>) -> Result<T> {
    if x.shape() != x_hat.shape() {
        return Err(Error::Shape(format!(
            "image {:?} vs reconstruction {:?}",
            x.shape(),
            x_hat.shape()
        )));
    }
    if x.is_empty() {
        return Err(Error::Shape("reconstruction loss on an empty tensor".into()));
    }
    Ok(l1_with_grad(x_hat.data(), x.data(), false).0)
}

/// `mean |pred - target|` and, optionally, its gradient with respect to `pred`.
pub(crate) fn l1_with_grad<T: Scalar>(pred: &[T], target: &[T], want_grad: bool) -> (T, Vec<T>) {
    let n = T::from_f64(pred.len() as f64);
    let total: T = pred.iter().zip(target).map(|(&p, &t)| (p - t).abs()).sum();
    let grad = if want_grad {
        pred.iter()
            .zip(target)
            .map(|(&p, &t)| {
                let d = p - t;
                if d > T::zero() {
                    T::one() / n
                } else if d < T::zero() {
                    -T::one() / n
                } else {
                    T::zero()
                }
            })
            .collect()
    } else {
        Vec::new()
    };
    (total / n, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn perfect_overlap_is_zero() {
        let truth = t(&[2, 2, 2], &[1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0]);
        assert!(dice_loss(&truth, &truth).unwrap().abs() < 1e-5);
    }

    #[test]
    fn disjoint_is_one() {
        let pred = t(&[1, 2, 2], &[1.0, 1.0, 0.0, 0.0]);
        let truth = t(&[1, 2, 2], &[0.0, 0.0, 1.0, 1.0]);
        assert!((dice_loss(&pred, &truth).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn half_overlap() {
        let pred = t(&[1, 2, 2], &[1.0, 1.0, 0.0, 0.0]);
        let truth = t(&[1, 2, 2], &[1.0, 0.0, 1.0, 0.0]);
        // 1 - (2*1 + e) / (2 + 2 + e)
        let expected = 1.0 - (2.0 + DICE_EPS) / (4.0 + DICE_EPS);
        assert!((dice_loss(&pred, &truth).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.5).abs() < 1e-6);
    }

    #[test]
    fn rejects_non_one_hot() {
        let pred = t(&[2, 1, 2], &[0.5; 4]);
        let both = t(&[2, 1, 2], &[1.0, 0.0, 1.0, 1.0]);
        assert!(matches!(dice_loss(&pred, &both), Err(Error::InvalidLabel(_))));
        let fractional = t(&[1, 1, 2], &[0.5, 0.0]);
        assert!(matches!(
            dice_loss(&t(&[1, 1, 2], &[0.5; 2]), &fractional),
            Err(Error::InvalidLabel(_))
        ));
    }

    #[test]
    fn l1_examples() {
        let x = t(&[1, 1, 2, 2], &[0.0; 4]);
        assert_eq!(reconstruction_loss(&x, &x).unwrap(), 0.0);
        let half = t(&[1, 1, 2, 2], &[0.5; 4]);
        assert_eq!(reconstruction_loss(&x, &half).unwrap(), 0.5);
    }
}
