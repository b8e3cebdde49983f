//! Training-time augmentation on (3, H, W) tensors: horizontal flip,
//! pad-then-random-crop, and random erasing with the usual area and aspect
//! bounds. Erased pixels are replaced by uniform random values.

use ndarray::Array3;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::train::config::AugmentConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EraseRect {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct AugTrace {
    pub flipped: bool,
    pub crop_offset: Option<(usize, usize)>,
    pub erased: Option<EraseRect>,
}

pub fn augment(img: &Array3<f32>, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Array3<f32> {
    augment_traced(img, cfg, rng).0
}

pub fn augment_traced(
    img: &Array3<f32>,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> (Array3<f32>, AugTrace) {
    let mut out = img.clone();
    let mut trace = AugTrace::default();
    let (_, h, w) = out.dim();

    if cfg.flip && rng.random::<f64>() < 0.5 {
        out = flip_horizontal(&out);
        trace.flipped = true;
    }

    if cfg.pad_crop && cfg.pad > 0 {
        let dy = rng.random_range(0..=2 * cfg.pad);
        let dx = rng.random_range(0..=2 * cfg.pad);
        out = pad_crop(&out, cfg.pad, dy, dx);
        trace.crop_offset = Some((dy, dx));
    }

    if cfg.erase && rng.random::<f64>() < cfg.erase_prob {
        if let Some(rect) = sample_erase_rect(h, w, cfg, rng) {
            for yy in rect.y..rect.y + rect.h {
                for xx in rect.x..rect.x + rect.w {
                    for c in 0..3 {
                        out[[c, yy, xx]] = rng.random::<f32>();
                    }
                }
            }
            trace.erased = Some(rect);
        }
    }

    (out, trace)
}

pub fn flip_horizontal(img: &Array3<f32>) -> Array3<f32> {
    let (c, h, w) = img.dim();
    let mut out = Array3::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[[ci, y, x]] = img[[ci, y, w - 1 - x]];
            }
        }
    }
    out
}

/// Zero-pad by `pad` on every side, then crop back to the original size at
/// offset (dy, dx) in the padded frame.
pub fn pad_crop(img: &Array3<f32>, pad: usize, dy: usize, dx: usize) -> Array3<f32> {
    let (c, h, w) = img.dim();
    let mut out = Array3::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h {
            let sy = y as isize + dy as isize - pad as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = x as isize + dx as isize - pad as isize;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                out[[ci, y, x]] = img[[ci, sy as usize, sx as usize]];
            }
        }
    }
    out
}

/// Sample an erase rectangle with area ratio and aspect ratio inside the
/// configured bounds; gives up after 100 attempts on degenerate sizes.
pub fn sample_erase_rect(
    h: usize,
    w: usize,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Option<EraseRect> {
    let area = (h * w) as f64;
    for _ in 0..100 {
        let target = area * rng.random_range(cfg.erase_area.0..cfg.erase_area.1);
        let aspect = rng.random_range(cfg.erase_aspect.0.ln()..cfg.erase_aspect.1.ln()).exp();
        let eh = (target * aspect).sqrt().round() as usize;
        let ew = (target / aspect).sqrt().round() as usize;
        if eh == 0 || ew == 0 || eh >= h || ew >= w {
            continue;
        }
        let y = rng.random_range(0..=h - eh);
        let x = rng.random_range(0..=w - ew);
        return Some(EraseRect { y, x, h: eh, w: ew });
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn test_image(h: usize, w: usize) -> Array3<f32> {
        Array3::from_shape_fn((3, h, w), |(c, y, x)| (c * h * w + y * w + x) as f32)
    }

    #[test]
    fn all_flags_off_is_identity() {
        let img = test_image(32, 16);
        let cfg = AugmentConfig::none();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = augment(&img, &cfg, &mut rng);
        assert_eq!(img, out);
    }

    #[test]
    fn flip_is_an_involution() {
        let img = test_image(16, 9);
        assert_eq!(flip_horizontal(&flip_horizontal(&img)), img);
        let flipped = flip_horizontal(&img);
        assert_eq!(flipped[[0, 0, 0]], img[[0, 0, 8]]);
    }

    #[test]
    fn pad_crop_centered_is_identity() {
        let img = test_image(20, 10);
        let out = pad_crop(&img, 4, 4, 4);
        assert_eq!(img, out);
    }

    #[test]
    fn erase_rect_bounds_hold() {
        let cfg = AugmentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let rect = sample_erase_rect(64, 32, &cfg, &mut rng).unwrap();
            let ratio = (rect.h * rect.w) as f64 / (64.0 * 32.0);
            // Rounding of the sampled sides can push the realized area
            // slightly past the sampled target's bounds.
            assert!(ratio > 0.01 && ratio < 0.45, "area ratio {ratio}");
            assert!(rect.y + rect.h <= 64 && rect.x + rect.w <= 32);
        }
    }

    #[test]
    fn erase_changes_exactly_one_rectangle() {
        let img = test_image(64, 32);
        let cfg = AugmentConfig {
            flip: false,
            pad_crop: false,
            erase: true,
            erase_prob: 1.0,
            ..AugmentConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (out, trace) = augment_traced(&img, &cfg, &mut rng);
        let rect = trace.erased.expect("erase applied at p=1");
        for y in 0..64 {
            for x in 0..32 {
                let inside =
                    y >= rect.y && y < rect.y + rect.h && x >= rect.x && x < rect.x + rect.w;
                for c in 0..3 {
                    if !inside {
                        assert_eq!(out[[c, y, x]], img[[c, y, x]]);
                    }
                }
            }
        }
        // the rectangle itself was overwritten with values in [0, 1)
        let mut any_changed = false;
        for y in rect.y..rect.y + rect.h {
            for x in rect.x..rect.x + rect.w {
                for c in 0..3 {
                    if out[[c, y, x]] != img[[c, y, x]] {
                        any_changed = true;
                    }
                    assert!((0.0..1.0).contains(&out[[c, y, x]]));
                }
            }
        }
        assert!(any_changed);
    }

    #[test]
    fn deterministic_per_seed() {
        let img = test_image(64, 32);
        let cfg = AugmentConfig::default();
        let a = augment(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(9));
        let b = augment(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }
}
