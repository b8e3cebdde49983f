//! Identity classification loss: a bias-free linear head over the neck
//! features and softmax cross-entropy with optional label smoothing.
//! Loss math runs in f64; gradients come back as f32 for the optimizer.

use ndarray::{Array2, ArrayView2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::softmax_rows;

/// Per-domain classifier: n_id x d weight matrix, no bias.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub weight: Array2<f32>,
}

impl ClassifierHead {
    pub fn new(n_id: usize, feature_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = (6.0 / feature_dim as f64).sqrt() as f32;
        let weight = Array2::from_shape_fn((n_id, feature_dim), |_| {
            rng.random_range(-bound..bound)
        });
        ClassifierHead { weight }
    }

    pub fn from_weight(weight: Array2<f32>) -> Self {
        ClassifierHead { weight }
    }

    pub fn n_classes(&self) -> usize {
        self.weight.dim().0
    }

    pub fn logits(&self, features: &ArrayView2<f32>) -> Array2<f32> {
        features.dot(&self.weight.t())
    }
}

pub struct IdLossResult {
    pub loss: f64,
    pub accuracy: f64,
    /// d(loss)/d(logits), already divided by the batch size.
    pub grad_logits: Array2<f32>,
}

/// Cross-entropy over logits with label smoothing. Labels are 1-based
/// contiguous identities in [1, n_id].
pub fn id_loss_from_logits(
    logits: &ArrayView2<f32>,
    labels: &[u32],
    smoothing: f64,
) -> Result<IdLossResult> {
    let (b, n) = logits.dim();
    if b == 0 {
        return Err(Error::EmptyBatch);
    }
    debug_assert_eq!(b, labels.len());
    for &label in labels {
        if label == 0 || label as usize > n {
            return Err(Error::LabelOutOfRange { label, n_id: n });
        }
    }
    let logits64 = logits.mapv(|v| v as f64);
    let p = softmax_rows(&logits64.view());
    let uniform = smoothing / n as f64;
    let mut loss = 0.0;
    let mut correct = 0usize;
    let mut grad = Array2::<f32>::zeros((b, n));
    for bi in 0..b {
        let target = labels[bi] as usize - 1;
        let mut argmax = 0usize;
        for j in 0..n {
            if p[[bi, j]] > p[[bi, argmax]] {
                argmax = j;
            }
            let q = uniform + if j == target { 1.0 - smoothing } else { 0.0 };
            let pj = p[[bi, j]].max(f64::MIN_POSITIVE);
            if q > 0.0 {
                loss -= q * pj.ln();
            }
            grad[[bi, j]] = ((p[[bi, j]] - q) / b as f64) as f32;
        }
        if argmax == target {
            correct += 1;
        }
    }
    Ok(IdLossResult {
        loss: loss / b as f64,
        accuracy: correct as f64 / b as f64,
        grad_logits: grad,
    })
}

/// Spec surface: scalar identity loss of features under a head.
pub fn id_loss(
    features: &ArrayView2<f32>,
    head: &ClassifierHead,
    labels: &[u32],
    smoothing: f64,
) -> Result<f64> {
    let logits = head.logits(features);
    Ok(id_loss_from_logits(&logits.view(), labels, smoothing)?.loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn uniform_logits_give_log_n() {
        let logits = Array2::<f32>::zeros((1, 4));
        let r = id_loss_from_logits(&logits.view(), &[2], 0.0).unwrap();
        assert!((r.loss - 4.0f64.ln()).abs() < 1e-9, "loss {}", r.loss);
    }

    #[test]
    fn confident_correct_logit_drives_loss_to_zero() {
        let mut logits = Array2::<f32>::zeros((1, 4));
        logits[[0, 0]] = 50.0;
        let r = id_loss_from_logits(&logits.view(), &[1], 0.0).unwrap();
        assert!(r.loss < 1e-9);
        assert_eq!(r.accuracy, 1.0);
    }

    #[test]
    fn two_class_hand_example() {
        // logits (1, 0), true class 1 -> ln(1 + e^{-1})
        let logits = array![[1.0f32, 0.0]];
        let r = id_loss_from_logits(&logits.view(), &[1], 0.0).unwrap();
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((r.loss - expected).abs() < 1e-6);
        assert!((r.loss - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn smoothing_keeps_loss_positive() {
        let mut logits = Array2::<f32>::zeros((1, 4));
        logits[[0, 0]] = 60.0;
        let r = id_loss_from_logits(&logits.view(), &[1], 0.1).unwrap();
        assert!(r.loss > 0.0);
    }

    #[test]
    fn gradient_matches_softmax_minus_target() {
        let logits = array![[0.5f32, -0.25, 1.0]];
        let r = id_loss_from_logits(&logits.view(), &[3], 0.0).unwrap();
        let p = softmax_rows(&logits.mapv(|v| v as f64).view());
        for j in 0..3 {
            let target = if j == 2 { 1.0 } else { 0.0 };
            let expect = p[[0, j]] - target;
            assert!((r.grad_logits[[0, j]] as f64 - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn out_of_range_labels_rejected() {
        let logits = Array2::<f32>::zeros((1, 4));
        assert!(id_loss_from_logits(&logits.view(), &[0], 0.0).is_err());
        assert!(id_loss_from_logits(&logits.view(), &[5], 0.0).is_err());
    }

    #[test]
    fn head_logits_shape() {
        let head = ClassifierHead::new(7, 32, 3);
        let features = Array2::<f32>::ones((4, 32));
        assert_eq!(head.logits(&features.view()).dim(), (4, 7));
    }
}
