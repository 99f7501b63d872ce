//! Training losses with analytic gradients.

use crate::tensor::{Real, Tensor};

/// Mean squared error over every element; returns (loss, dloss/dpred).
pub fn mse_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> (T, Tensor<T>) {
    assert_eq!(pred.shape, target.shape, "mse shapes");
    let n = T::from_f64(pred.numel() as f64);
    let mut loss = T::zero();
    let mut grad = Tensor::zeros(&pred.shape);
    for i in 0..pred.numel() {
        let d = pred.data[i] - target.data[i];
        loss += d * d;
        grad.data[i] = (T::one() + T::one()) * d / n;
    }
    (loss / n, grad)
}

/// Kullback-Leibler divergence D(target || softmax(logits)), evaluated
/// directly on pre-softmax logits for numerical stability, averaged over the
/// batch (axis 0). Spatial softmax over everything after the batch axis.
///
/// Gradient with respect to the logits is `softmax(z) - target` per sample
/// (divided by the batch size), using that each target sums to one.
pub fn kl_loss_on_logits<T: Real>(logits: &Tensor<T>, target: &Tensor<T>) -> (T, Tensor<T>) {
    assert_eq!(logits.shape, target.shape, "kl shapes");
    let n = logits.shape[0];
    let plane = logits.inner();
    let mut loss = T::zero();
    let mut grad = Tensor::zeros(&logits.shape);
    let inv_n = T::one() / T::from_f64(n as f64);
    for s in 0..n {
        let z = &logits.data[s * plane..(s + 1) * plane];
        let a = &target.data[s * plane..(s + 1) * plane];
        let mut mx = T::neg_infinity();
        for v in z {
            if *v > mx {
                mx = *v;
            }
        }
        let mut sum = T::zero();
        for v in z {
            sum += (*v - mx).exp();
        }
        let lse = sum.ln() + mx;
        let g = &mut grad.data[s * plane..(s + 1) * plane];
        for i in 0..plane {
            if a[i] > T::zero() {
                loss += a[i] * (a[i].ln() - z[i] + lse);
            }
            let softmax = (z[i] - lse).exp();
            g[i] = (softmax - a[i]) * inv_n;
        }
    }
    (loss * inv_n, grad)
}
