//! Per-domain batch normalization. Train mode normalizes by batch statistics
//! and folds them into running averages; eval mode is a pure function of the
//! stored statistics, which is what makes captured domain state replayable.

use ndarray::{Array1, Array4, ArrayView4};

use crate::error::{Error, Result};

pub const DEFAULT_EPS: f32 = 1e-5;
pub const DEFAULT_MOMENTUM: f32 = 0.1;

/// One layer's normalization state: running statistics plus the learned
/// affine pair. Variances use the biased (population) estimator throughout.
#[derive(Debug, Clone, PartialEq)]
pub struct BnLayerState {
    pub channels: usize,
    pub running_mean: Array1<f32>,
    pub running_var: Array1<f32>,
    pub gamma: Array1<f32>,
    pub beta: Array1<f32>,
    pub eps: f32,
    pub momentum: f32,
}

impl BnLayerState {
    /// Fresh state: identity statistics (mean 0, var 1) and identity affine.
    pub fn new(channels: usize) -> Self {
        BnLayerState {
            channels,
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            eps: DEFAULT_EPS,
            momentum: DEFAULT_MOMENTUM,
        }
    }

    pub fn with_params(
        running_mean: Array1<f32>,
        running_var: Array1<f32>,
        gamma: Array1<f32>,
        beta: Array1<f32>,
        eps: f32,
        momentum: f32,
    ) -> Result<Self> {
        let channels = running_mean.len();
        if [running_var.len(), gamma.len(), beta.len()]
            .iter()
            .any(|&l| l != channels)
        {
            return Err(Error::ChannelMismatch {
                expected: channels,
                got: running_var.len().max(gamma.len()).max(beta.len()),
            });
        }
        if !(eps > 0.0) {
            return Err(Error::InvalidConfig(format!("bn eps must be > 0, got {eps}")));
        }
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "bn momentum must lie in (0, 1), got {momentum}"
            )));
        }
        if running_var.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidConfig("negative running variance".into()));
        }
        Ok(BnLayerState {
            channels,
            running_mean,
            running_var,
            gamma,
            beta,
            eps,
            momentum,
        })
    }

    pub fn param_count_affine(&self) -> usize {
        2 * self.channels
    }

    pub fn value_count_full(&self) -> usize {
        4 * self.channels
    }
}

/// Per-batch byproducts needed by the backward pass.
#[derive(Debug)]
pub struct BnTrainCache {
    pub xhat: Array4<f32>,
    pub inv_std: Array1<f32>,
}

/// Train-mode forward: normalize by this batch's per-channel statistics,
/// apply the affine pair, and fold the batch statistics into the running
/// averages (new = (1 - m) * old + m * batch). Reductions run in f64.
pub fn bn_forward_train(
    state: &mut BnLayerState,
    x: &ArrayView4<f32>,
) -> Result<(Array4<f32>, BnTrainCache)> {
    let (b, c, h, w) = x.dim();
    if c != state.channels {
        return Err(Error::ChannelMismatch {
            expected: state.channels,
            got: c,
        });
    }
    let n = b * h * w;
    if n < 2 {
        return Err(Error::DegenerateBatch);
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("batch-norm input"));
    }

    let scale = 1.0 / n as f64;
    let x_std = x.as_standard_layout();
    let xs = x_std.as_slice().expect("standard layout");
    let plane = h * w;
    let mut mean = Array1::<f32>::zeros(c);
    let mut var = Array1::<f32>::zeros(c);
    for ci in 0..c {
        let mut acc = 0.0f64;
        for bi in 0..b {
            let base = (bi * c + ci) * plane;
            for &v in &xs[base..base + plane] {
                acc += v as f64;
            }
        }
        let mu = acc * scale;
        let mut acc2 = 0.0f64;
        for bi in 0..b {
            let base = (bi * c + ci) * plane;
            for &v in &xs[base..base + plane] {
                let d = v as f64 - mu;
                acc2 += d * d;
            }
        }
        mean[ci] = mu as f32;
        var[ci] = (acc2 * scale) as f32;
    }

    let mut inv_std = Array1::<f32>::zeros(c);
    for ci in 0..c {
        inv_std[ci] = 1.0 / (var[ci] as f64 + state.eps as f64).sqrt() as f32;
    }

    let mut xhat = Array4::<f32>::zeros((b, c, h, w));
    let mut out = Array4::<f32>::zeros((b, c, h, w));
    {
        let xh = xhat.as_slice_mut().expect("freshly allocated");
        let os = out.as_slice_mut().expect("freshly allocated");
        for bi in 0..b {
            for ci in 0..c {
                let (m, is, g, be) = (mean[ci], inv_std[ci], state.gamma[ci], state.beta[ci]);
                let base = (bi * c + ci) * plane;
                for i in base..base + plane {
                    let v = (xs[i] - m) * is;
                    xh[i] = v;
                    os[i] = g * v + be;
                }
            }
        }
    }

    let m = state.momentum;
    for ci in 0..c {
        state.running_mean[ci] = (1.0 - m) * state.running_mean[ci] + m * mean[ci];
        state.running_var[ci] = (1.0 - m) * state.running_var[ci] + m * var[ci];
    }

    Ok((out, BnTrainCache { xhat, inv_std }))
}

/// Eval-mode forward: pure function of (state, x) using stored statistics.
pub fn bn_forward_eval(state: &BnLayerState, x: &ArrayView4<f32>) -> Result<Array4<f32>> {
    let (b, c, h, w) = x.dim();
    if c != state.channels {
        return Err(Error::ChannelMismatch {
            expected: state.channels,
            got: c,
        });
    }
    if state
        .running_mean
        .iter()
        .chain(state.running_var.iter())
        .any(|v| !v.is_finite())
    {
        return Err(Error::NonFinite("batch-norm stored statistics"));
    }
    let x_std = x.as_standard_layout();
    let xs = x_std.as_slice().expect("standard layout");
    let plane = h * w;
    let mut out = Array4::<f32>::zeros((b, c, h, w));
    {
        let os = out.as_slice_mut().expect("freshly allocated");
        for ci in 0..c {
            let inv_std = 1.0 / (state.running_var[ci] as f64 + state.eps as f64).sqrt() as f32;
            let (m, g, be) = (state.running_mean[ci], state.gamma[ci], state.beta[ci]);
            for bi in 0..b {
                let base = (bi * c + ci) * plane;
                for i in base..base + plane {
                    os[i] = g * (xs[i] - m) * inv_std + be;
                }
            }
        }
    }
    Ok(out)
}

/// Backward pass for the train-mode forward (population-variance batchnorm).
/// Returns (grad_x, grad_gamma, grad_beta).
pub fn bn_backward(
    state: &BnLayerState,
    cache: &BnTrainCache,
    grad_out: &ArrayView4<f32>,
) -> (Array4<f32>, Array1<f32>, Array1<f32>) {
    let (b, c, h, w) = grad_out.dim();
    let n = (b * h * w) as f64;
    let plane = h * w;
    let g_std = grad_out.as_standard_layout();
    let gs = g_std.as_slice().expect("standard layout");
    let xh = cache.xhat.as_slice().expect("standard layout");
    let mut grad_gamma = Array1::<f32>::zeros(c);
    let mut grad_beta = Array1::<f32>::zeros(c);
    let mut grad_x = Array4::<f32>::zeros((b, c, h, w));
    let gx = grad_x.as_slice_mut().expect("freshly allocated");
    for ci in 0..c {
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for bi in 0..b {
            let base = (bi * c + ci) * plane;
            for i in base..base + plane {
                let dy = gs[i] as f64;
                sum_dy += dy;
                sum_dy_xhat += dy * xh[i] as f64;
            }
        }
        grad_gamma[ci] = sum_dy_xhat as f32;
        grad_beta[ci] = sum_dy as f32;
        let g = state.gamma[ci] as f64;
        let inv_std = cache.inv_std[ci] as f64;
        let k = g * inv_std / n;
        for bi in 0..b {
            let base = (bi * c + ci) * plane;
            for i in base..base + plane {
                let dy = gs[i] as f64;
                gx[i] = (k * (n * dy - sum_dy - xh[i] as f64 * sum_dy_xhat)) as f32;
            }
        }
    }
    (grad_x, grad_gamma, grad_beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_input_normalizes_to_beta() {
        let mut state = BnLayerState::new(2);
        let x = Array4::from_elem((2, 2, 3, 3), 5.0f32);
        let (y, _) = bn_forward_train(&mut state, &x.view()).unwrap();
        for &v in y.iter() {
            assert!(v.abs() < 1e-4, "constant input should map to 0, got {v}");
        }
    }

    #[test]
    fn hand_example_two_values() {
        // Channel values {1, 3}, gamma=2, beta=1, eps=1e-5 -> about {-1, 3}.
        let mut state = BnLayerState::new(1);
        state.gamma[0] = 2.0;
        state.beta[0] = 1.0;
        let x = Array4::from_shape_vec((2, 1, 1, 1), vec![1.0, 3.0]).unwrap();
        let (y, _) = bn_forward_train(&mut state, &x.view()).unwrap();
        assert!((y[[0, 0, 0, 0]] - (-1.0)).abs() < 1e-4);
        assert!((y[[1, 0, 0, 0]] - 3.0).abs() < 1e-4);
    }

    #[test]
    fn running_update_hand_example() {
        let mut state = BnLayerState::new(1);
        assert_eq!(state.momentum, 0.1);
        let x = Array4::from_elem((2, 1, 1, 1), 10.0f32);
        let _ = bn_forward_train(&mut state, &x.view()).unwrap();
        assert!((state.running_mean[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn eval_identity_statistics() {
        let state = BnLayerState::new(3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array4::from_shape_fn((2, 3, 4, 4), |_| rng.random_range(-10.0..10.0f32));
        let y = bn_forward_eval(&state, &x.view()).unwrap();
        for (a, b) in x.iter().zip(y.iter()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn eval_centered_input_returns_beta() {
        let mut state = BnLayerState::new(2);
        state.running_mean = ndarray::array![3.0, -1.5];
        state.beta = ndarray::array![0.25, 7.0];
        let x = Array4::from_shape_fn((1, 2, 2, 2), |(_, c, _, _)| state.running_mean[c]);
        let y = bn_forward_eval(&state, &x.view()).unwrap();
        for c in 0..2 {
            for &v in y.index_axis(ndarray::Axis(1), c).iter() {
                assert!((v - state.beta[c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn eval_hand_example() {
        // mean 2, var 4, gamma 3, beta -1, x 4 -> 3*(4-2)/2 - 1 = 2.
        let state = BnLayerState::with_params(
            ndarray::array![2.0],
            ndarray::array![4.0],
            ndarray::array![3.0],
            ndarray::array![-1.0],
            1e-12,
            0.1,
        )
        .unwrap();
        let x = Array4::from_elem((1, 1, 1, 1), 4.0f32);
        let y = bn_forward_eval(&state, &x.view()).unwrap();
        assert!((y[[0, 0, 0, 0]] - 2.0).abs() < 1e-4);
    }

    #[test]
    fn train_normalization_moments() {
        let mut state = BnLayerState::new(4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array4::from_shape_fn((4, 4, 8, 8), |_| rng.random_range(-3.0..5.0f32));
        let (y, _) = bn_forward_train(&mut state, &x.view()).unwrap();
        // gamma=1, beta=0 so y is the normalized map itself.
        let n = (4 * 8 * 8) as f64;
        for c in 0..4 {
            let mut mean = 0.0f64;
            let mut var = 0.0f64;
            for bi in 0..4 {
                for yy in 0..8 {
                    for xx in 0..8 {
                        mean += y[[bi, c, yy, xx]] as f64;
                    }
                }
            }
            mean /= n;
            for bi in 0..4 {
                for yy in 0..8 {
                    for xx in 0..8 {
                        let d = y[[bi, c, yy, xx]] as f64 - mean;
                        var += d * d;
                    }
                }
            }
            var /= n;
            assert!(mean.abs() < 1e-5, "channel {c} mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "channel {c} var {var}");
        }
    }

    #[test]
    fn eval_is_pure_and_deterministic() {
        let state = BnLayerState::new(2);
        let before = state.clone();
        let x = Array4::from_shape_fn((2, 2, 3, 3), |(b, c, y, xx)| {
            (b + c * 2 + y * 5 + xx) as f32 * 0.37 - 1.0
        });
        let y1 = bn_forward_eval(&state, &x.view()).unwrap();
        let y2 = bn_forward_eval(&state, &x.view()).unwrap();
        assert_eq!(y1, y2);
        assert_eq!(state, before);
    }

    #[test]
    fn affine_recovery_identity() {
        // gamma = sqrt(var + eps), beta = mean makes eval-mode BN the identity.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mean = Array1::from_shape_fn(3, |_| rng.random_range(-2.0..2.0f32));
        let var = Array1::from_shape_fn(3, |_| rng.random_range(0.1..4.0f32));
        let eps = DEFAULT_EPS;
        let gamma = var.mapv(|v| (v + eps).sqrt());
        let state =
            BnLayerState::with_params(mean.clone(), var, gamma, mean, eps, 0.1).unwrap();
        let x = Array4::from_shape_fn((2, 3, 4, 4), |_| rng.random_range(-3.0..3.0f32));
        let y = bn_forward_eval(&state, &x.view()).unwrap();
        for (a, b) in x.iter().zip(y.iter()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn running_mean_fixed_point() {
        let mut state = BnLayerState::new(1);
        state.running_mean[0] = 2.0;
        // Batch with mean exactly 2.0 leaves the running mean unchanged.
        let x = Array4::from_shape_vec((2, 1, 1, 1), vec![1.0, 3.0]).unwrap();
        let _ = bn_forward_train(&mut state, &x.view()).unwrap();
        assert!((state.running_mean[0] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn degenerate_batch_rejected() {
        let mut state = BnLayerState::new(1);
        let x = Array4::from_elem((1, 1, 1, 1), 1.0f32);
        assert!(matches!(
            bn_forward_train(&mut state, &x.view()),
            Err(Error::DegenerateBatch)
        ));
    }

    #[test]
    fn non_finite_input_rejected() {
        let mut state = BnLayerState::new(1);
        let mut x = Array4::from_elem((2, 1, 1, 1), 1.0f32);
        x[[0, 0, 0, 0]] = f32::NAN;
        assert!(bn_forward_train(&mut state, &x.view()).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Array4::from_shape_fn((2, 2, 3, 3), |_| rng.random_range(-1.0..1.0f32));
        let coeff = Array4::from_shape_fn((2, 2, 3, 3), |_| rng.random_range(-1.0..1.0f32));
        let base_state = {
            let mut s = BnLayerState::new(2);
            s.gamma = ndarray::array![1.3, 0.7];
            s.beta = ndarray::array![0.1, -0.2];
            s
        };
        let loss = |input: &Array4<f32>| -> f64 {
            let mut s = base_state.clone();
            let (y, _) = bn_forward_train(&mut s, &input.view()).unwrap();
            y.iter()
                .zip(coeff.iter())
                .map(|(a, b)| *a as f64 * *b as f64)
                .sum()
        };
        let mut s = base_state.clone();
        let (_, cache) = bn_forward_train(&mut s, &x.view()).unwrap();
        let (gx, _, _) = bn_backward(&base_state, &cache, &coeff.view());
        let h = 1e-3f32;
        for idx in [(0, 0, 0, 0), (1, 1, 2, 2), (0, 1, 1, 0)] {
            let mut plus = x.clone();
            plus[idx] += h;
            let mut minus = x.clone();
            minus[idx] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h as f64);
            let an = gx[idx] as f64;
            assert!(
                (an - fd).abs() / fd.abs().max(1e-3) < 2e-2,
                "analytic {an} vs fd {fd}"
            );
        }
    }
}
