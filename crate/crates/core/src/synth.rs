//! Seeded synthetic test images: colored gradients with a few filled
//! shapes. Used by decoder calibration, the test suites, and the demo
//! dataset generator.
//!
//! Pixel values stay inside [0.05, 0.95] so finite-difference probes and
//! small perturbations never leave the pixel domain.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::types::ImageTensor;

const LO: f64 = 0.05;
const HI: f64 = 0.95;

fn color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [
        rng.random_range(0.10..0.90),
        rng.random_range(0.10..0.90),
        rng.random_range(0.10..0.90),
    ]
}

/// A gradient background with 1–3 filled circles/rectangles.
pub fn shapes_image(seed: u64, h: usize, w: usize) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c0 = color(&mut rng);
    let c1 = color(&mut rng);
    let horizontal = rng.random_bool(0.5);
    let mut data = ndarray::Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let t = if horizontal {
                x as f64 / (w - 1).max(1) as f64
            } else {
                y as f64 / (h - 1).max(1) as f64
            };
            for c in 0..3 {
                data[(y, x, c)] = c0[c] * (1.0 - t) + c1[c] * t;
            }
        }
    }
    let n_shapes = rng.random_range(1..=3);
    for _ in 0..n_shapes {
        let fill = color(&mut rng);
        if rng.random_bool(0.5) {
            // circle
            let cy = rng.random_range(0..h) as f64;
            let cx = rng.random_range(0..w) as f64;
            let r = rng.random_range(0.12..0.35) * h.min(w) as f64;
            for y in 0..h {
                for x in 0..w {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    if d2 <= r * r {
                        for c in 0..3 {
                            data[(y, x, c)] = fill[c];
                        }
                    }
                }
            }
        } else {
            // rectangle
            let rh = rng.random_range(h / 6..=h / 2).max(1);
            let rw = rng.random_range(w / 6..=w / 2).max(1);
            let y0 = rng.random_range(0..=h - rh);
            let x0 = rng.random_range(0..=w - rw);
            for y in y0..y0 + rh {
                for x in x0..x0 + rw {
                    for c in 0..3 {
                        data[(y, x, c)] = fill[c];
                    }
                }
            }
        }
    }
    data.mapv_inplace(|v| v.clamp(LO, HI));
    ImageTensor::new(data).expect("synthetic image in domain")
}

/// Uniform noise image within the safe margin.
pub fn noise_image(seed: u64, h: usize, w: usize) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = ndarray::Array3::from_shape_fn((h, w, 3), |_| rng.random_range(LO..HI));
    ImageTensor::new(data).expect("noise image in domain")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(shapes_image(7, 32, 32), shapes_image(7, 32, 32));
        assert_ne!(shapes_image(7, 32, 32), shapes_image(8, 32, 32));
    }

    #[test]
    fn values_keep_margin() {
        for seed in 0..8 {
            let img = shapes_image(seed, 32, 32);
            for &v in img.as_slice() {
                assert!((LO..=HI).contains(&v));
            }
        }
    }
}
