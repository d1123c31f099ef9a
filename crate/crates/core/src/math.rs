//! Small deterministic numeric kernels shared by the model and attacks.
//!
//! Matrix products are written as explicit loops with a fixed accumulation
//! order, so repeated runs produce bitwise-identical results regardless of
//! runtime CPU feature dispatch.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// `a (m,k) × b (k,n) → (m,n)`, row-major accumulate.
pub fn matmul(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (m, k) = a.dim();
    let (k2, n) = b.dim();
    assert_eq!(k, k2, "matmul shape mismatch: ({m},{k}) x ({k2},{n})");
    let a = a.as_slice().expect("matmul: lhs not standard layout");
    let b = b.as_slice().expect("matmul: rhs not standard layout");
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            let brow = &b[l * n..(l + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Array2::from_shape_vec((m, n), out).unwrap()
}

fn transpose(a: &Array2<f64>) -> Array2<f64> {
    let (m, n) = a.dim();
    Array2::from_shape_fn((n, m), |(i, j)| a[(j, i)])
}

/// `aᵀ (k,m) × b (k,n) → (m,n)`.
pub fn matmul_transa(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    matmul(&transpose(a), b)
}

/// `a (m,k) × bᵀ (n,k) → (m,n)`.
pub fn matmul_transb(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    matmul(a, &transpose(b))
}

/// Row-wise softmax, in place.
pub fn softmax_rows(x: &mut Array2<f64>) {
    for mut row in x.rows_mut() {
        let mx = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation (smooth, so finite-difference checks stay tight).
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity of two flat vectors. Zero-norm operands are a
/// numerical error.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::numeric("zero-norm operand in cosine similarity"));
    }
    Ok(dot(a, b) / (na * nb))
}

/// Cosine similarity together with its gradients w.r.t. both operands:
/// `d cos/da = b/(|a||b|) − cos·a/|a|²` and symmetrically for `b`.
pub fn cosine_sim_with_grads(a: &[f64], b: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::numeric("zero-norm operand in cosine similarity"));
    }
    let cos = dot(a, b) / (na * nb);
    let ga = a
        .iter()
        .zip(b)
        .map(|(&av, &bv)| bv / (na * nb) - cos * av / (na * na))
        .collect();
    let gb = a
        .iter()
        .zip(b)
        .map(|(&av, &bv)| av / (na * nb) - cos * bv / (nb * nb))
        .collect();
    Ok((cos, ga, gb))
}

/// Elementwise Huber with transition point `delta`.
pub fn huber(d: f64, delta: f64) -> f64 {
    let ad = d.abs();
    if ad <= delta {
        0.5 * d * d
    } else {
        delta * (ad - 0.5 * delta)
    }
}

pub fn huber_grad(d: f64, delta: f64) -> f64 {
    d.clamp(-delta, delta)
}

/// Index/weight table for 1-D bilinear interpolation from `src` samples to
/// `dst` samples (half-pixel-centered mapping, edges clamped).
pub fn bilinear_axis(src: usize, dst: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..dst)
        .map(|o| {
            let s = ((o as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, src as f64 - 1.0);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            let f = s - i0 as f64;
            (i0, i1, 1.0 - f, f)
        })
        .collect()
}

/// Bilinear resize of an `(h, w, c)` array. Same-shape calls return a clone.
pub fn resize_bilinear(src: &Array3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (h, w, c) = src.dim();
    if h == out_h && w == out_w {
        return src.clone();
    }
    let ys = bilinear_axis(h, out_h);
    let xs = bilinear_axis(w, out_w);
    let mut out = Array3::zeros((out_h, out_w, c));
    for (oy, &(y0, y1, wy0, wy1)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, wx0, wx1)) in xs.iter().enumerate() {
            for ch in 0..c {
                out[(oy, ox, ch)] = wy0 * wx0 * src[(y0, x0, ch)]
                    + wy0 * wx1 * src[(y0, x1, ch)]
                    + wy1 * wx0 * src[(y1, x0, ch)]
                    + wy1 * wx1 * src[(y1, x1, ch)];
            }
        }
    }
    out
}

/// Normalized 1-D Gaussian kernel.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    assert!(size >= 1 && size % 2 == 1, "kernel size must be odd");
    let c = (size / 2) as f64;
    let mut k: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    k
}

/// Mirror index without edge repetition (`-1 → 1`, `n → n-2`).
fn reflect_idx(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

/// Separable Gaussian smoothing of an `(h, w, c)` array with reflective
/// padding, applied per channel.
pub fn gaussian_smooth(x: &Array3<f64>, size: usize, sigma: f64) -> Array3<f64> {
    if size == 1 {
        return x.clone();
    }
    let k = gaussian_kernel(size, sigma);
    let r = (size / 2) as isize;
    let (h, w, c) = x.dim();
    let mut tmp = Array3::zeros((h, w, c));
    for y in 0..h {
        for xx in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (t, &kv) in k.iter().enumerate() {
                    let sx = reflect_idx(xx as isize + t as isize - r, w);
                    acc += kv * x[(y, sx, ch)];
                }
                tmp[(y, xx, ch)] = acc;
            }
        }
    }
    let mut out = Array3::zeros((h, w, c));
    for y in 0..h {
        for xx in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (t, &kv) in k.iter().enumerate() {
                    let sy = reflect_idx(y as isize + t as isize - r, h);
                    acc += kv * tmp[(sy, xx, ch)];
                }
                out[(y, xx, ch)] = acc;
            }
        }
    }
    out
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministically mix a base seed with a salt (used to give sub-tasks
/// independent, reproducible RNG streams).
pub fn derive_seed(base: u64, salt: u64) -> u64 {
    let mut s = base ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    let a = splitmix64(&mut s);
    splitmix64(&mut s) ^ a.rotate_left(17)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;

    #[test]
    fn matmul_small_known() {
        let a = array![[1.0, 2.0], [3.0, 4.0]];
        let b = array![[5.0, 6.0], [7.0, 8.0]];
        let c = matmul(&a, &b);
        assert_eq!(c, array![[19.0, 22.0], [43.0, 50.0]]);
        assert_eq!(matmul_transb(&a, &b), array![[17.0, 23.0], [39.0, 53.0]]);
        assert_eq!(matmul_transa(&a, &b), array![[26.0, 30.0], [38.0, 44.0]]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut x = array![[1.0, 2.0, 3.0], [-5.0, 0.0, 5.0]];
        softmax_rows(&mut x);
        for row in x.rows() {
            assert_relative_eq!(row.sum(), 1.0, epsilon = 1e-12);
        }
        assert!(x[(0, 2)] > x[(0, 1)] && x[(0, 1)] > x[(0, 0)]);
    }

    #[test]
    fn gelu_grad_matches_fd() {
        for &x in &[-2.3, -0.7, 0.0, 0.4, 1.9] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert_relative_eq!(gelu_grad(x), fd, epsilon = 1e-8);
        }
    }

    #[test]
    fn cosine_grads_match_fd() {
        let a = vec![0.3, -1.2, 0.8, 2.0];
        let b = vec![1.1, 0.4, -0.5, 0.9];
        let (_, ga, gb) = cosine_sim_with_grads(&a, &b).unwrap();
        let h = 1e-6;
        for i in 0..a.len() {
            let mut ap = a.clone();
            let mut am = a.clone();
            ap[i] += h;
            am[i] -= h;
            let fd = (cosine_sim(&ap, &b).unwrap() - cosine_sim(&am, &b).unwrap()) / (2.0 * h);
            assert_relative_eq!(ga[i], fd, epsilon = 1e-7);
            let mut bp = b.clone();
            let mut bm = b.clone();
            bp[i] += h;
            bm[i] -= h;
            let fd = (cosine_sim(&a, &bp).unwrap() - cosine_sim(&a, &bm).unwrap()) / (2.0 * h);
            assert_relative_eq!(gb[i], fd, epsilon = 1e-7);
        }
    }

    #[test]
    fn cosine_zero_norm_is_numeric_error() {
        let z = vec![0.0, 0.0];
        let a = vec![1.0, 2.0];
        assert!(matches!(
            cosine_sim(&z, &a),
            Err(crate::Error::Numeric(_))
        ));
    }

    #[test]
    fn huber_known_values() {
        assert_relative_eq!(huber(0.5, 1.0), 0.125);
        // constant offset 2.0: per-element 2*1 - 0.5 = 1.5
        assert_relative_eq!(huber(2.0, 1.0), 1.5);
        assert_relative_eq!(huber_grad(2.0, 1.0), 1.0);
        assert_relative_eq!(huber_grad(-0.3, 1.0), -0.3);
    }

    #[test]
    fn gaussian_kernel_normalized_and_symmetric() {
        let k = gaussian_kernel(7, 3.0);
        assert_relative_eq!(k.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        for i in 0..7 {
            assert_relative_eq!(k[i], k[6 - i], epsilon = 1e-15);
        }
    }

    #[test]
    fn smooth_size_one_is_identity() {
        let x = Array3::from_shape_fn((4, 5, 3), |(a, b, c)| (a * 15 + b * 3 + c) as f64);
        assert_eq!(gaussian_smooth(&x, 1, 1.0), x);
    }

    #[test]
    fn smooth_interior_one_hot_preserves_mass() {
        let mut x = Array3::zeros((9, 9, 1));
        x[(4, 4, 0)] = 2.5;
        let y = gaussian_smooth(&x, 3, 1.0);
        assert_relative_eq!(y.sum(), 2.5, epsilon = 1e-12);
        // mass confined to the 3x3 neighborhood
        let mut inside = 0.0;
        for dy in 0..3 {
            for dx in 0..3 {
                inside += y[(3 + dy, 3 + dx, 0)];
            }
        }
        assert_relative_eq!(inside, 2.5, epsilon = 1e-12);
    }

    #[test]
    fn reflect_indexing() {
        assert_eq!(reflect_idx(-1, 5), 1);
        assert_eq!(reflect_idx(-2, 5), 2);
        assert_eq!(reflect_idx(5, 5), 3);
        assert_eq!(reflect_idx(6, 5), 2);
        assert_eq!(reflect_idx(0, 1), 0);
        assert_eq!(reflect_idx(-3, 1), 0);
    }

    #[test]
    fn resize_same_shape_is_identity() {
        let x = Array3::from_shape_fn((8, 8, 3), |(a, b, c)| (a + b + c) as f64 / 20.0);
        assert_eq!(resize_bilinear(&x, 8, 8), x);
    }

    #[test]
    fn resize_constant_stays_constant() {
        let x = Array3::from_elem((6, 10, 3), 0.42);
        let y = resize_bilinear(&x, 13, 4);
        for &v in y.iter() {
            assert_relative_eq!(v, 0.42, epsilon = 1e-12);
        }
    }

    #[test]
    fn derive_seed_is_deterministic_and_spreads() {
        assert_eq!(derive_seed(0, 1), derive_seed(0, 1));
        assert_ne!(derive_seed(0, 1), derive_seed(0, 2));
        assert_ne!(derive_seed(1, 1), derive_seed(0, 1));
    }
}
