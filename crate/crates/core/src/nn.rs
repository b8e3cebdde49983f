//! Shared low-level numeric kernels: dense 2-D convolution (im2col + gemm),
//! pooling, activation, and resampling. Everything here is deterministic and
//! single-threaded so eval-mode forward passes are bitwise reproducible.

use ndarray::{Array1, Array2, Array4, ArrayView2, ArrayView4, Axis};

/// Output spatial size of a convolution/pooling window.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

/// Dense conv parameters. Weight rows are output channels, columns are the
/// flattened (in_channels, ky, kx) window, matching the im2col layout below.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: Array2<f32>,
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: Array2::zeros((out_channels, in_channels * kernel * kernel)),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len()
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            conv_out_dim(h, self.kernel, self.stride, self.padding),
            conv_out_dim(w, self.kernel, self.stride, self.padding),
        )
    }

    /// Forward pass over a (B, C, H, W) batch.
    pub fn forward(&self, x: &ArrayView4<f32>) -> Array4<f32> {
        let (b, c, h, w) = x.dim();
        debug_assert_eq!(c, self.in_channels);
        let (oh, ow) = self.out_hw(h, w);
        let mut out = Array4::zeros((b, self.out_channels, oh, ow));
        for bi in 0..b {
            let col = im2col(&x.index_axis(Axis(0), bi), self.kernel, self.stride, self.padding);
            let y = self.weight.dot(&col); // (out, oh*ow)
            let mut dst = out.index_axis_mut(Axis(0), bi);
            for (co, row) in y.axis_iter(Axis(0)).enumerate() {
                for oy in 0..oh {
                    for ox in 0..ow {
                        dst[[co, oy, ox]] = row[oy * ow + ox];
                    }
                }
            }
        }
        out
    }

    /// Gradient w.r.t. the input; needs only the weights.
    pub fn backward_input(
        &self,
        grad_out: &ArrayView4<f32>,
        in_dims: (usize, usize, usize, usize),
    ) -> Array4<f32> {
        let (b, c, h, w) = in_dims;
        debug_assert_eq!(grad_out.dim().1, self.out_channels);
        let mut grad_in = Array4::zeros((b, c, h, w));
        let wt = self.weight.t();
        for bi in 0..b {
            let g = flatten_spatial(&grad_out.index_axis(Axis(0), bi));
            let gcol = wt.dot(&g); // (c*k*k, oh*ow)
            col2im(
                &gcol.view(),
                &mut grad_in.index_axis_mut(Axis(0), bi),
                self.kernel,
                self.stride,
                self.padding,
                (h, w),
            );
        }
        grad_in
    }

    /// Gradient w.r.t. the flattened weights; needs the saved input.
    pub fn backward_weights(&self, x: &ArrayView4<f32>, grad_out: &ArrayView4<f32>) -> Array2<f32> {
        let b = x.dim().0;
        let mut grad_w = Array2::<f32>::zeros(self.weight.raw_dim());
        for bi in 0..b {
            let g = flatten_spatial(&grad_out.index_axis(Axis(0), bi));
            let col = im2col(&x.index_axis(Axis(0), bi), self.kernel, self.stride, self.padding);
            grad_w += &g.dot(&col.t());
        }
        grad_w
    }

    /// Combined backward, mostly for tests.
    pub fn backward(
        &self,
        x: &ArrayView4<f32>,
        grad_out: &ArrayView4<f32>,
        want_weight_grad: bool,
    ) -> (Array4<f32>, Option<Array2<f32>>) {
        let grad_in = self.backward_input(grad_out, x.dim());
        let grad_w = want_weight_grad.then(|| self.backward_weights(x, grad_out));
        (grad_in, grad_w)
    }
}

fn flatten_spatial(x: &ndarray::ArrayView3<f32>) -> Array2<f32> {
    let (c, h, w) = x.dim();
    let mut out = Array2::zeros((c, h * w));
    for ci in 0..c {
        for y in 0..h {
            for xx in 0..w {
                out[[ci, y * w + xx]] = x[[ci, y, xx]];
            }
        }
    }
    out
}

/// Lower one (C, H, W) image into the (C*k*k, OH*OW) column matrix.
pub fn im2col(
    x: &ndarray::ArrayView3<f32>,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Array2<f32> {
    let (c, h, w) = x.dim();
    let oh = conv_out_dim(h, kernel, stride, padding);
    let ow = conv_out_dim(w, kernel, stride, padding);
    let mut col = Array2::<f32>::zeros((c * kernel * kernel, oh * ow));
    for ci in 0..c {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (ci * kernel + ky) * kernel + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col[[row, oy * ow + ox]] = x[[ci, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add a column matrix back onto an image; the adjoint of `im2col`.
fn col2im(
    col: &ArrayView2<f32>,
    out: &mut ndarray::ArrayViewMut3<f32>,
    kernel: usize,
    stride: usize,
    padding: usize,
    (h, w): (usize, usize),
) {
    let c = out.dim().0;
    let oh = conv_out_dim(h, kernel, stride, padding);
    let ow = conv_out_dim(w, kernel, stride, padding);
    for ci in 0..c {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (ci * kernel + ky) * kernel + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        out[[ci, iy as usize, ix as usize]] += col[[row, oy * ow + ox]];
                    }
                }
            }
        }
    }
}

/// Max pooling with argmax bookkeeping for the backward pass. The saved
/// indices are flat offsets into each (C, H, W) image.
pub fn max_pool(
    x: &ArrayView4<f32>,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> (Array4<f32>, Vec<u32>) {
    let (b, c, h, w) = x.dim();
    let oh = conv_out_dim(h, kernel, stride, padding);
    let ow = conv_out_dim(w, kernel, stride, padding);
    let mut out = Array4::zeros((b, c, oh, ow));
    let mut argmax = vec![0u32; b * c * oh * ow];
    let mut slot = 0usize;
    for bi in 0..b {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = 0u32;
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let v = x[[bi, ci, iy as usize, ix as usize]];
                            if v > best {
                                best = v;
                                best_idx = (iy as usize * w + ix as usize) as u32;
                            }
                        }
                    }
                    out[[bi, ci, oy, ox]] = best;
                    argmax[slot] = best_idx;
                    slot += 1;
                }
            }
        }
    }
    (out, argmax)
}

pub fn max_pool_backward(
    grad_out: &ArrayView4<f32>,
    argmax: &[u32],
    in_dims: (usize, usize, usize, usize),
) -> Array4<f32> {
    let (b, c, h, w) = in_dims;
    let (_, _, oh, ow) = grad_out.dim();
    let mut grad_in = Array4::zeros((b, c, h, w));
    let mut slot = 0usize;
    for bi in 0..b {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let flat = argmax[slot] as usize;
                    grad_in[[bi, ci, flat / w, flat % w]] += grad_out[[bi, ci, oy, ox]];
                    slot += 1;
                }
            }
        }
    }
    grad_in
}

/// Global average pooling (B, C, H, W) -> (B, C).
pub fn global_avg_pool(x: &ArrayView4<f32>) -> Array2<f32> {
    let (b, c, h, w) = x.dim();
    let scale = 1.0 / (h * w) as f64;
    let mut out = Array2::zeros((b, c));
    for bi in 0..b {
        for ci in 0..c {
            let mut acc = 0.0f64;
            for y in 0..h {
                for xx in 0..w {
                    acc += x[[bi, ci, y, xx]] as f64;
                }
            }
            out[[bi, ci]] = (acc * scale) as f32;
        }
    }
    out
}

pub fn global_avg_pool_backward(
    grad_out: &ArrayView2<f32>,
    in_dims: (usize, usize, usize, usize),
) -> Array4<f32> {
    let (b, c, h, w) = in_dims;
    let scale = 1.0 / (h * w) as f32;
    let mut grad_in = Array4::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            let g = grad_out[[bi, ci]] * scale;
            grad_in
                .index_axis_mut(Axis(0), bi)
                .index_axis_mut(Axis(0), ci)
                .fill(g);
        }
    }
    grad_in
}

pub fn relu(x: &mut Array4<f32>) {
    x.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 });
}

pub fn relu_backward(grad_out: &mut Array4<f32>, forward_out: &Array4<f32>) {
    ndarray::Zip::from(grad_out)
        .and(forward_out)
        .for_each(|g, &y| {
            if y <= 0.0 {
                *g = 0.0;
            }
        });
}

/// Bilinear upsampling of a single-channel map to the requested size,
/// with corner-aligned sampling.
pub fn bilinear_resize(src: &ArrayView2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (h, w) = src.dim();
    let mut out = Array2::zeros((out_h, out_w));
    let sy = if out_h > 1 { (h - 1) as f32 / (out_h - 1) as f32 } else { 0.0 };
    let sx = if out_w > 1 { (w - 1) as f32 / (out_w - 1) as f32 } else { 0.0 };
    for oy in 0..out_h {
        let fy = oy as f32 * sy;
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f32;
        for ox in 0..out_w {
            let fx = ox as f32 * sx;
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f32;
            let top = src[[y0, x0]] * (1.0 - wx) + src[[y0, x1]] * wx;
            let bot = src[[y1, x0]] * (1.0 - wx) + src[[y1, x1]] * wx;
            out[[oy, ox]] = top * (1.0 - wy) + bot * wy;
        }
    }
    out
}

/// Numerically stable softmax over the last axis of a (B, N) matrix, in f64.
pub fn softmax_rows(logits: &ArrayView2<f64>) -> Array2<f64> {
    let (b, n) = logits.dim();
    let mut out = Array2::zeros((b, n));
    for bi in 0..b {
        let row = logits.index_axis(Axis(0), bi);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for (j, &v) in row.iter().enumerate() {
            let e = (v - max).exp();
            out[[bi, j]] = e;
            denom += e;
        }
        for j in 0..n {
            out[[bi, j]] /= denom;
        }
    }
    out
}

/// Mean Shannon entropy of softmax rows, used as the distillation floor.
pub fn mean_softmax_entropy(logits: &ArrayView2<f64>) -> f64 {
    let p = softmax_rows(logits);
    let (b, _) = p.dim();
    let mut acc = 0.0;
    for row in p.axis_iter(Axis(0)) {
        for &v in row.iter() {
            if v > 0.0 {
                acc -= v * v.ln();
            }
        }
    }
    acc / b as f64
}

pub fn l2_normalized(v: &Array1<f32>) -> Option<Array1<f32>> {
    let norm = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if norm == 0.0 {
        return None;
    }
    Some(v.mapv(|x| (x as f64 / norm) as f32))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};

    #[test]
    fn conv_identity_kernel() {
        // 1x1 conv with weight 1 is the identity.
        let mut conv = Conv2d::new(1, 1, 1, 1, 0);
        conv.weight[[0, 0]] = 1.0;
        let x = Array4::from_shape_fn((1, 1, 3, 3), |(_, _, y, xx)| (y * 3 + xx) as f32);
        let y = conv.forward(&x.view());
        assert_eq!(x, y);
    }

    #[test]
    fn conv_matches_hand_computation() {
        // 3x3 all-ones kernel over a 3x3 all-ones image, zero padding:
        // center sees all 9 taps, corners see 4.
        let mut conv = Conv2d::new(1, 1, 3, 1, 1);
        conv.weight.fill(1.0);
        let x = Array4::from_elem((1, 1, 3, 3), 1.0f32);
        let y = conv.forward(&x.view());
        assert_eq!(y[[0, 0, 1, 1]], 9.0);
        assert_eq!(y[[0, 0, 0, 0]], 4.0);
        assert_eq!(y[[0, 0, 0, 1]], 6.0);
    }

    #[test]
    fn conv_backward_matches_naive_gradients() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut conv = Conv2d::new(2, 3, 3, 1, 1);
        conv.weight.mapv_inplace(|_| rng.random_range(-1.0..1.0f32));
        let x = Array4::from_shape_fn((2, 2, 5, 4), |_| rng.random_range(-1.0..1.0f32));
        let g = Array4::from_shape_fn((2, 3, 5, 4), |_| rng.random_range(-1.0..1.0f32));
        let (gin, gw) = conv.backward(&x.view(), &g.view(), true);
        let gw = gw.unwrap();

        // Naive f64 accumulation of the same gradients.
        let (b, c, h, w) = x.dim();
        let co = 3usize;
        let k = 3usize;
        let p = 1usize;
        let mut gw_ref = Array2::<f64>::zeros((co, c * k * k));
        let mut gin_ref = Array4::<f64>::zeros((b, c, h, w));
        for bi in 0..b {
            for o in 0..co {
                for oy in 0..h {
                    for ox in 0..w {
                        let go = g[[bi, o, oy, ox]] as f64;
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = oy as isize + ky as isize - p as isize;
                                    let ix = ox as isize + kx as isize - p as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let col = (ci * k + ky) * k + kx;
                                    gw_ref[[o, col]] +=
                                        go * x[[bi, ci, iy as usize, ix as usize]] as f64;
                                    gin_ref[[bi, ci, iy as usize, ix as usize]] +=
                                        go * conv.weight[[o, col]] as f64;
                                }
                            }
                        }
                    }
                }
            }
        }
        for (a, b) in gw.iter().zip(gw_ref.iter()) {
            assert!((*a as f64 - b).abs() < 1e-3, "{a} vs {b}");
        }
        for (a, b) in gin.iter().zip(gin_ref.iter()) {
            assert!((*a as f64 - b).abs() < 1e-3, "{a} vs {b}");
        }
    }

    #[test]
    fn max_pool_round_trip() {
        let x = Array4::from_shape_fn((1, 1, 4, 4), |(_, _, y, xx)| (y * 4 + xx) as f32);
        let (y, argmax) = max_pool(&x.view(), 2, 2, 0);
        assert_eq!(y[[0, 0, 0, 0]], 5.0);
        assert_eq!(y[[0, 0, 1, 1]], 15.0);
        let g = Array4::from_elem((1, 1, 2, 2), 1.0f32);
        let gin = max_pool_backward(&g.view(), &argmax, (1, 1, 4, 4));
        assert_eq!(gin[[0, 0, 1, 1]], 1.0);
        assert_eq!(gin[[0, 0, 0, 0]], 0.0);
        assert_eq!(gin.sum(), 4.0);
    }

    #[test]
    fn gap_is_mean() {
        let x = Array4::from_shape_fn((1, 2, 2, 2), |(_, c, y, xx)| (c * 4 + y * 2 + xx) as f32);
        let y = global_avg_pool(&x.view());
        assert!((y[[0, 0]] - 1.5).abs() < 1e-6);
        assert!((y[[0, 1]] - 5.5).abs() < 1e-6);
    }

    #[test]
    fn bilinear_preserves_constants() {
        let src = Array2::from_elem((3, 5), 2.5f32);
        let out = bilinear_resize(&src.view(), 9, 17);
        for &v in out.iter() {
            assert!((v - 2.5).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let logits = array![[0.0, 1.0, -2.0], [5.0, 5.0, 5.0]];
        let p = softmax_rows(&logits.view());
        for row in p.axis_iter(Axis(0)) {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert!((p[[1, 0]] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn im2col_shapes() {
        let x = Array3::<f32>::zeros((2, 6, 7));
        let col = im2col(&x.view(), 3, 2, 1);
        assert_eq!(col.dim(), (2 * 9, 3 * 4));
    }
}
