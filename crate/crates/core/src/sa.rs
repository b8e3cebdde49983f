//! Semantics-adaption kernels: bias-free depth-wise convolutions that
//! aggregate each channel spatially without mixing channels. One k x k
//! kernel per channel, stride 1, zero padding (k-1)/2 so the module can sit
//! between a conv layer and its batch norm without reshaping anything.

use ndarray::{Array3, Array4, ArrayView3, ArrayView4};
use num_traits::Float;

use crate::error::{Error, Result};

/// Per-channel depth-wise kernel bank. `weights` is (channels, k, k); there
/// is deliberately no bias term.
#[derive(Debug, Clone, PartialEq)]
pub struct SaKernel<F = f32> {
    pub channels: usize,
    pub kernel_size: usize,
    pub weights: Array3<F>,
}

impl<F: Float> SaKernel<F> {
    pub fn from_weights(weights: Array3<F>) -> Result<Self> {
        let (channels, k, k2) = weights.dim();
        if k != k2 || k % 2 == 0 || k == 0 {
            return Err(Error::EvenKernelSize(k));
        }
        Ok(SaKernel {
            channels,
            kernel_size: k,
            weights,
        })
    }

    pub fn param_count(&self) -> usize {
        self.weights.len()
    }
}

/// Identity initialization: 1.0 at the center tap, 0.0 elsewhere, so the
/// forward pass reproduces its input exactly until training moves the taps.
pub fn sa_init_identity<F: Float>(channels: usize, kernel_size: usize) -> Result<SaKernel<F>> {
    if kernel_size % 2 == 0 || kernel_size == 0 {
        return Err(Error::EvenKernelSize(kernel_size));
    }
    let mut weights = Array3::from_elem((channels, kernel_size, kernel_size), F::zero());
    let center = kernel_size / 2;
    for c in 0..channels {
        weights[[c, center, center]] = F::one();
    }
    Ok(SaKernel {
        channels,
        kernel_size,
        weights,
    })
}

/// Number of values in a depth-wise kernel bank: channels * k^2.
pub fn sa_param_count(channels: usize, kernel_size: usize) -> usize {
    channels * kernel_size * kernel_size
}

/// Depth-wise cross-correlation of one (C, H, W) feature map, stride 1,
/// zero padding (k-1)/2. Channel c of the output depends only on channel c
/// of the input.
pub fn sa_forward<F: Float>(kernel: &SaKernel<F>, feature_map: &ArrayView3<F>) -> Result<Array3<F>> {
    let (c, h, w) = feature_map.dim();
    if c != kernel.channels {
        return Err(Error::ChannelMismatch {
            expected: kernel.channels,
            got: c,
        });
    }
    let mut out = Array3::from_elem((c, h, w), F::zero());
    depthwise_channel_forward(kernel, feature_map, &mut out.view_mut());
    Ok(out)
}

/// Batched variant over (B, C, H, W), used by the backbone executor.
pub fn sa_forward_batch<F: Float>(kernel: &SaKernel<F>, x: &ArrayView4<F>) -> Result<Array4<F>> {
    let (b, c, h, w) = x.dim();
    if c != kernel.channels {
        return Err(Error::ChannelMismatch {
            expected: kernel.channels,
            got: c,
        });
    }
    let mut out = Array4::from_elem((b, c, h, w), F::zero());
    for bi in 0..b {
        depthwise_channel_forward(
            kernel,
            &x.index_axis(ndarray::Axis(0), bi),
            &mut out.index_axis_mut(ndarray::Axis(0), bi),
        );
    }
    Ok(out)
}

/// Tap-outer loop over contiguous row slices: for each kernel tap, the valid
/// output window is a pair of aligned slices, so the inner loop is a plain
/// axpy. Zero taps are skipped (adding 0 * x is an exact no-op), which makes
/// identity-initialized kernels nearly free.
fn depthwise_channel_forward<F: Float>(
    kernel: &SaKernel<F>,
    x: &ArrayView3<F>,
    out: &mut ndarray::ArrayViewMut3<F>,
) {
    let (c, h, w) = x.dim();
    let k = kernel.kernel_size;
    let pad = (k - 1) / 2;
    let x_std = x.as_standard_layout();
    let xs = x_std.as_slice().expect("standard layout");
    let os = out.as_slice_mut().expect("freshly allocated output");
    for ci in 0..c {
        let base = ci * h * w;
        for ky in 0..k {
            let dy = ky as isize - pad as isize;
            let oy0 = (-dy).max(0) as usize;
            let oy1 = ((h as isize - dy).max(0) as usize).min(h);
            for kx in 0..k {
                let wk = kernel.weights[[ci, ky, kx]];
                if wk == F::zero() {
                    continue;
                }
                let dx = kx as isize - pad as isize;
                let ox0 = (-dx).max(0) as usize;
                let ox1 = ((w as isize - dx).max(0) as usize).min(w);
                if ox0 >= ox1 {
                    continue;
                }
                for oy in oy0..oy1 {
                    let iy = (oy as isize + dy) as usize;
                    let orow = base + oy * w;
                    let irow = base + iy * w;
                    let ix0 = (ox0 as isize + dx) as usize;
                    let src = &xs[irow + ix0..irow + ix0 + (ox1 - ox0)];
                    let dst = &mut os[orow + ox0..orow + ox1];
                    for (o, &xv) in dst.iter_mut().zip(src) {
                        *o = *o + wk * xv;
                    }
                }
            }
        }
    }
}

/// Backward pass for the batched forward: gradients w.r.t. the kernel
/// weights and the input feature map.
pub fn sa_backward<F: Float>(
    kernel: &SaKernel<F>,
    x: &ArrayView4<F>,
    grad_out: &ArrayView4<F>,
) -> Result<(Array3<F>, Array4<F>)> {
    let (b, c, h, w) = x.dim();
    if c != kernel.channels {
        return Err(Error::ChannelMismatch {
            expected: kernel.channels,
            got: c,
        });
    }
    let k = kernel.kernel_size;
    let pad = (k - 1) / 2;
    let mut grad_w = Array3::from_elem((c, k, k), F::zero());
    let mut grad_in = Array4::from_elem((b, c, h, w), F::zero());
    let x_std = x.as_standard_layout();
    let xs = x_std.as_slice().expect("standard layout");
    let g_std = grad_out.as_standard_layout();
    let gs = g_std.as_slice().expect("standard layout");
    let gis = grad_in.as_slice_mut().expect("freshly allocated");
    let plane = h * w;
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * plane;
            for ky in 0..k {
                let dy = ky as isize - pad as isize;
                let oy0 = (-dy).max(0) as usize;
                let oy1 = ((h as isize - dy).max(0) as usize).min(h);
                for kx in 0..k {
                    let dx = kx as isize - pad as isize;
                    let ox0 = (-dx).max(0) as usize;
                    let ox1 = ((w as isize - dx).max(0) as usize).min(w);
                    if ox0 >= ox1 {
                        continue;
                    }
                    let wk = kernel.weights[[ci, ky, kx]];
                    let mut gw_acc = F::zero();
                    for oy in oy0..oy1 {
                        let iy = (oy as isize + dy) as usize;
                        let grow = base + oy * w;
                        let irow = base + iy * w;
                        let ix0 = (ox0 as isize + dx) as usize;
                        let n = ox1 - ox0;
                        let g_slice = &gs[grow + ox0..grow + ox0 + n];
                        // d(loss)/d(w) accumulates g . x over the window
                        let x_slice = &xs[irow + ix0..irow + ix0 + n];
                        for (&gv, &xv) in g_slice.iter().zip(x_slice) {
                            gw_acc = gw_acc + gv * xv;
                        }
                        // d(loss)/d(x) scatters wk * g back onto the input
                        if wk != F::zero() {
                            let gi_slice = &mut gis[irow + ix0..irow + ix0 + n];
                            for (gi, &gv) in gi_slice.iter_mut().zip(g_slice) {
                                *gi = *gi + wk * gv;
                            }
                        }
                    }
                    grad_w[[ci, ky, kx]] = grad_w[[ci, ky, kx]] + gw_acc;
                }
            }
        }
    }
    Ok((grad_w, grad_in))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array3, Array4};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Array3<f32> {
        Array3::from_shape_fn((c, h, w), |_| rng.random_range(-1.0..1.0f32))
    }

    #[test]
    fn identity_kernel_shape() {
        let k = sa_init_identity::<f32>(1, 3).unwrap();
        let expected = ndarray::array![[[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.0]]];
        assert_eq!(k.weights, expected);
    }

    #[test]
    fn identity_kernel_sums() {
        let k = sa_init_identity::<f32>(8, 5).unwrap();
        assert_eq!(k.channels, 8);
        for c in 0..8 {
            let sum: f32 = k.weights.index_axis(ndarray::Axis(0), c).sum();
            assert_eq!(sum, 1.0);
            assert_eq!(k.weights[[c, 2, 2]], 1.0);
        }
    }

    #[test]
    fn identity_forward_is_bitwise_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = sa_init_identity::<f32>(4, 5).unwrap();
        let x = random_map(&mut rng, 4, 9, 6);
        let y = sa_forward(&k, &x.view()).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn even_kernel_rejected() {
        assert!(sa_init_identity::<f32>(4, 4).is_err());
        assert!(sa_init_identity::<f32>(4, 0).is_err());
    }

    #[test]
    fn channel_mismatch_rejected() {
        let k = sa_init_identity::<f32>(4, 3).unwrap();
        let x = Array3::<f32>::zeros((5, 4, 4));
        assert!(matches!(
            sa_forward(&k, &x.view()),
            Err(Error::ChannelMismatch { expected: 4, got: 5 })
        ));
    }

    #[test]
    fn averaging_kernel_on_constant_input() {
        let mut k = sa_init_identity::<f32>(1, 3).unwrap();
        k.weights.fill(1.0 / 9.0);
        let x = Array3::from_elem((1, 5, 5), 3.0f32);
        let y = sa_forward(&k, &x.view()).unwrap();
        // Interior keeps the constant; borders shrink from zero padding.
        assert!((y[[0, 2, 2]] - 3.0).abs() < 1e-6);
        assert!(y[[0, 0, 0]] < 3.0);
    }

    #[test]
    fn one_by_one_kernel_is_per_channel_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let weights = Array3::from_shape_fn((3, 1, 1), |_| rng.random_range(0.1..2.0f32));
        let k = SaKernel::from_weights(weights.clone()).unwrap();
        let x = random_map(&mut rng, 3, 4, 4);
        let y = sa_forward(&k, &x.view()).unwrap();
        for c in 0..3 {
            for yy in 0..4 {
                for xx in 0..4 {
                    let expect = x[[c, yy, xx]] * weights[[c, 0, 0]];
                    assert!((y[[c, yy, xx]] - expect).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn hand_convolution_all_ones() {
        // 3x3 ones kernel, 3x3 ones input: center 9, corners 4.
        let k = SaKernel::from_weights(Array3::from_elem((1, 3, 3), 1.0f32)).unwrap();
        let x = Array3::from_elem((1, 3, 3), 1.0f32);
        let y = sa_forward(&k, &x.view()).unwrap();
        assert_eq!(y[[0, 1, 1]], 9.0);
        assert_eq!(y[[0, 0, 0]], 4.0);
        assert_eq!(y[[0, 0, 2]], 4.0);
        assert_eq!(y[[0, 2, 0]], 4.0);
        assert_eq!(y[[0, 2, 2]], 4.0);
    }

    #[test]
    fn param_count_examples() {
        assert_eq!(sa_param_count(64, 5), 1_600);
        assert_eq!(sa_param_count(26_560, 5), 664_000);
        assert_eq!(sa_param_count(26_560, 7), 1_301_440);
        // k=7 needs almost twice the k=5 values.
        let ratio = sa_param_count(26_560, 7) as f64 / sa_param_count(26_560, 5) as f64;
        assert!((ratio - 1.96).abs() < 1e-9);
    }

    #[test]
    fn channel_isolation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let weights = Array3::from_shape_fn((5, 3, 3), |_| rng.random_range(-1.0..1.0f32));
        let k = SaKernel::from_weights(weights).unwrap();
        let x = random_map(&mut rng, 5, 6, 6);
        let base = sa_forward(&k, &x.view()).unwrap();
        for c in 0..5 {
            let mut perturbed = x.clone();
            for v in perturbed.index_axis_mut(ndarray::Axis(0), c).iter_mut() {
                *v += 0.5;
            }
            let y = sa_forward(&k, &perturbed.view()).unwrap();
            for cc in 0..5 {
                let changed = y
                    .index_axis(ndarray::Axis(0), cc)
                    .iter()
                    .zip(base.index_axis(ndarray::Axis(0), cc).iter())
                    .any(|(a, b)| a != b);
                if cc == c {
                    assert!(changed, "channel {c} should change");
                } else {
                    assert!(!changed, "channel {cc} must not change when {c} is perturbed");
                }
            }
        }
    }

    #[test]
    fn linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let weights = Array3::from_shape_fn((3, 5, 5), |_| rng.random_range(-1.0..1.0f32));
        let k = SaKernel::from_weights(weights).unwrap();
        let x = random_map(&mut rng, 3, 7, 5);
        let y = random_map(&mut rng, 3, 7, 5);
        let (a, b) = (0.7f32, -1.3f32);
        let combo = x.mapv(|v| a * v) + y.mapv(|v| b * v);
        let lhs = sa_forward(&k, &combo.view()).unwrap();
        let fx = sa_forward(&k, &x.view()).unwrap();
        let fy = sa_forward(&k, &y.view()).unwrap();
        let rhs = fx.mapv(|v| a * v) + fy.mapv(|v| b * v);
        for (l, r) in lhs.iter().zip(rhs.iter()) {
            let denom = r.abs().max(1.0);
            assert!((l - r).abs() / denom < 1e-5);
        }
    }

    #[test]
    fn weight_gradient_matches_finite_differences_f64() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let weights = Array3::from_shape_fn((2, 3, 3), |_| rng.random_range(-1.0..1.0f64));
        let kernel = SaKernel::from_weights(weights).unwrap();
        let x = Array4::from_shape_fn((2, 2, 5, 4), |_| rng.random_range(-1.0..1.0f64));
        // Scalar loss: weighted sum of outputs with fixed random coefficients.
        let coeff = Array4::from_shape_fn((2, 2, 5, 4), |_| rng.random_range(-1.0..1.0f64));
        let loss = |k: &SaKernel<f64>| -> f64 {
            let y = sa_forward_batch(k, &x.view()).unwrap();
            y.iter().zip(coeff.iter()).map(|(a, b)| a * b).sum()
        };
        let (grad_w, _) = sa_backward(&kernel, &x.view(), &coeff.view()).unwrap();
        let h = 1e-6;
        for c in 0..2 {
            for ky in 0..3 {
                for kx in 0..3 {
                    let mut plus = kernel.clone();
                    plus.weights[[c, ky, kx]] += h;
                    let mut minus = kernel.clone();
                    minus.weights[[c, ky, kx]] -= h;
                    let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                    let an = grad_w[[c, ky, kx]];
                    let denom = fd.abs().max(1e-8);
                    assert!(
                        (an - fd).abs() / denom < 1e-4,
                        "analytic {an} vs fd {fd} at ({c},{ky},{kx})"
                    );
                }
            }
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences_f64() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let weights = Array3::from_shape_fn((2, 3, 3), |_| rng.random_range(-1.0..1.0f64));
        let kernel = SaKernel::from_weights(weights).unwrap();
        let x = Array4::from_shape_fn((1, 2, 4, 4), |_| rng.random_range(-1.0..1.0f64));
        let coeff = Array4::from_shape_fn((1, 2, 4, 4), |_| rng.random_range(-1.0..1.0f64));
        let loss = |input: &Array4<f64>| -> f64 {
            let y = sa_forward_batch(&kernel, &input.view()).unwrap();
            y.iter().zip(coeff.iter()).map(|(a, b)| a * b).sum()
        };
        let (_, grad_in) = sa_backward(&kernel, &x.view(), &coeff.view()).unwrap();
        let h = 1e-6;
        for idx in [(0, 0, 0, 0), (0, 1, 2, 3), (0, 0, 3, 1), (0, 1, 1, 2)] {
            let mut plus = x.clone();
            plus[idx] += h;
            let mut minus = x.clone();
            minus[idx] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let an = grad_in[idx];
            assert!((an - fd).abs() / fd.abs().max(1e-8) < 1e-4);
        }
    }
}
