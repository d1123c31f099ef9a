//! The attack building blocks: budget projection, the signed PGD step,
//! the decoder-space and feature-space losses, image mixing, the dominance
//! regularizer, and the MI/TI gradient transforms.

use ndarray::{Array2, Array3};

use super::config::{AttackConfig, FeatureLossKind, GradTransformKind, MixMode};
use crate::error::{Error, Result};
use crate::math;
use crate::metrics::feature_dominance;
use crate::model::SegModel;
use crate::types::{EmbeddingGrid, ImageTensor, MaskLogits};

/// Project a perturbation onto the feasible set: elementwise into
/// `[-epsilon, epsilon]`, then such that `clean + delta` stays in `[0, 1]`.
/// Both are interval projections containing zero, so the sequential clamp
/// equals the joint projection and the function is idempotent.
pub fn project(delta: &Array3<f64>, epsilon: f64, clean: &ImageTensor) -> Array3<f64> {
    let mut out = delta.clone();
    project_inplace(&mut out, epsilon, clean);
    out
}

pub(crate) fn project_inplace(delta: &mut Array3<f64>, epsilon: f64, clean: &ImageTensor) {
    debug_assert_eq!(delta.dim(), clean.data().dim());
    for (d, &c) in delta.iter_mut().zip(clean.data().iter()) {
        let v = d.clamp(-epsilon, epsilon);
        *d = v.clamp(-c, 1.0 - c);
    }
}

#[inline]
fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One signed descent step followed by projection:
/// `delta' = project(delta − step_size·sign(grad))`, with `sign(0) = 0`.
pub fn pgd_step(
    delta: &Array3<f64>,
    grad: &Array3<f64>,
    clean: &ImageTensor,
    config: &AttackConfig,
) -> Result<Array3<f64>> {
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::numeric("non-finite gradient in PGD step"));
    }
    let mut next = delta.clone();
    next.zip_mut_with(grad, |d, &g| *d -= config.step_size * sign0(g));
    project_inplace(&mut next, config.epsilon, clean);
    Ok(next)
}

/// Threshold target logits into clip-MSE target values: `thres_pos` where
/// the target logit is `> 0`, else `thres_neg`.
pub fn clip_targets(target_logits: &MaskLogits, thres_pos: f64, thres_neg: f64) -> Array2<f64> {
    target_logits
        .data()
        .mapv(|v| if v > 0.0 { thres_pos } else { thres_neg })
}

/// Mean over pixels of `(logits_adv − t)²` with `t` the thresholded target
/// values.
pub fn clip_mse_loss(
    logits_adv: &MaskLogits,
    logits_target: &MaskLogits,
    thres_pos: f64,
    thres_neg: f64,
) -> Result<f64> {
    if logits_adv.data().dim() != logits_target.data().dim() {
        return Err(Error::input("clip-MSE logits shape mismatch"));
    }
    let t = clip_targets(logits_target, thres_pos, thres_neg);
    let n = t.len() as f64;
    Ok(logits_adv
        .data()
        .iter()
        .zip(t.iter())
        .map(|(a, tv)| (a - tv) * (a - tv))
        .sum::<f64>()
        / n)
}

/// Feature-space loss between two embedding grids.
///
/// All three variants are zero when the grids are equal; cosine is also
/// zero for any pair of parallel, same-direction grids (it compares
/// directions, not magnitudes).
pub fn feature_loss(
    e_adv: &EmbeddingGrid,
    e_target: &EmbeddingGrid,
    kind: FeatureLossKind,
) -> Result<f64> {
    feature_loss_with_grad(e_adv, e_target, kind).map(|(v, _)| v)
}

/// Feature loss and its gradient with respect to `e_adv`.
pub fn feature_loss_with_grad(
    e_adv: &EmbeddingGrid,
    e_target: &EmbeddingGrid,
    kind: FeatureLossKind,
) -> Result<(f64, Array3<f64>)> {
    if !e_adv.same_shape(e_target) {
        return Err(Error::input("feature loss needs equally shaped grids"));
    }
    let a = e_adv.flat();
    let b = e_target.flat();
    let n = a.len() as f64;
    let dim = e_adv.data().dim();
    match kind {
        FeatureLossKind::Mse => {
            let mut grad = Vec::with_capacity(a.len());
            let mut loss = 0.0;
            for (&x, &y) in a.iter().zip(b) {
                let d = x - y;
                loss += d * d;
                grad.push(2.0 * d / n);
            }
            Ok((loss / n, Array3::from_shape_vec(dim, grad).unwrap()))
        }
        FeatureLossKind::Cosine => {
            let (cos, ga, _) = math::cosine_sim_with_grads(a, b)?;
            let grad: Vec<f64> = ga.iter().map(|g| -g).collect();
            Ok((1.0 - cos, Array3::from_shape_vec(dim, grad).unwrap()))
        }
        FeatureLossKind::Huber => {
            let mut grad = Vec::with_capacity(a.len());
            let mut loss = 0.0;
            for (&x, &y) in a.iter().zip(b) {
                let d = x - y;
                loss += math::huber(d, 1.0);
                grad.push(math::huber_grad(d, 1.0) / n);
            }
            Ok((loss / n, Array3::from_shape_vec(dim, grad).unwrap()))
        }
    }
}

/// Combine an adversarial and a competition image. Symmetric in its
/// arguments under both modes.
pub fn mix_images(a: &ImageTensor, b: &ImageTensor, mode: MixMode) -> Result<ImageTensor> {
    if a.data().dim() != b.data().dim() {
        return Err(Error::input("mix_images needs equally sized images"));
    }
    let mixed = match mode {
        MixMode::SumClamp => (a.data() + b.data()).mapv(|v| v.clamp(0.0, 1.0)),
        MixMode::Mean => (a.data() + b.data()).mapv(|v| 0.5 * v),
    };
    ImageTensor::new(mixed)
}

/// Derivative of the mixed image with respect to the first argument, as an
/// elementwise factor.
pub(crate) fn mix_grad_factor(a: &ImageTensor, b: &ImageTensor, mode: MixMode) -> Array3<f64> {
    match mode {
        MixMode::SumClamp => {
            let mut f = a.data() + b.data();
            f.mapv_inplace(|s| if s > 0.0 && s < 1.0 { 1.0 } else { 0.0 });
            f
        }
        MixMode::Mean => Array3::from_elem(a.data().dim(), 0.5),
    }
}

/// Feature dominance with gradients w.r.t. `f_adv` and `f_mix`
/// (`f_com` never depends on the perturbation).
pub(crate) fn fd_with_grads(
    f_adv: &EmbeddingGrid,
    f_com: &EmbeddingGrid,
    f_mix: &EmbeddingGrid,
) -> Result<(f64, Array3<f64>, Array3<f64>)> {
    let (cos_am, d_adv, d_mix_a) = math::cosine_sim_with_grads(f_adv.flat(), f_mix.flat())?;
    let (cos_cm, _, d_mix_c) = math::cosine_sim_with_grads(f_com.flat(), f_mix.flat())?;
    let dim = f_adv.data().dim();
    let d_mix: Vec<f64> = d_mix_a.iter().zip(&d_mix_c).map(|(a, c)| a - c).collect();
    Ok((
        cos_am - cos_cm,
        Array3::from_shape_vec(dim, d_adv).unwrap(),
        Array3::from_shape_vec(dim, d_mix).unwrap(),
    ))
}

/// Dominance regularizer: `−fd` of the adversarial image against one
/// competition image, through the model's encoder. Minimizing it raises the
/// feature dominance of the adversarial image.
pub fn dominance_reg_loss(
    model: &dyn SegModel,
    adv: &ImageTensor,
    competition: &ImageTensor,
    mix_mode: MixMode,
) -> Result<f64> {
    let f_adv = model.encode_image(adv)?;
    let f_com = model.encode_image(competition)?;
    let f_mix = model.encode_image(&mix_images(adv, competition, mix_mode)?)?;
    Ok(-feature_dominance(&f_adv, &f_com, &f_mix)?)
}

/// Gradient transform state (MI momentum accumulator).
pub type TransformState = Array3<f64>;

/// Apply the configured gradient transform.
///
/// `none` is the identity. `mi` returns the updated momentum accumulator
/// `decay·state + grad/‖grad‖₁` (decayed state alone when the gradient is
/// all-zero). `ti` smooths the gradient with a normalized Gaussian kernel
/// under reflective padding.
pub fn transform_gradient(
    grad: &Array3<f64>,
    state: TransformState,
    config: &AttackConfig,
) -> Result<(Array3<f64>, TransformState)> {
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::numeric("non-finite gradient in transform"));
    }
    match config.grad_transform {
        GradTransformKind::None => Ok((grad.clone(), state)),
        GradTransformKind::Mi => {
            let l1: f64 = grad.iter().map(|g| g.abs()).sum();
            let mut next = state;
            next.mapv_inplace(|v| v * config.mi_decay);
            if l1 > 0.0 {
                next.zip_mut_with(grad, |s, &g| *s += g / l1);
            }
            Ok((next.clone(), next))
        }
        GradTransformKind::Ti => {
            let smoothed = math::gaussian_smooth(grad, config.ti_kernel_size, config.ti_sigma);
            Ok((smoothed, state))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::Array3;

    fn img_const(v: f64) -> ImageTensor {
        ImageTensor::new(Array3::from_elem((2, 2, 3), v)).unwrap()
    }

    #[test]
    fn project_budget_and_domain_clamps() {
        let clean = img_const(0.5);
        let mut delta = Array3::zeros((2, 2, 3));
        delta[(0, 0, 0)] = 10.0 / 255.0;
        let out = project(&delta, 8.0 / 255.0, &clean);
        assert_relative_eq!(out[(0, 0, 0)], 8.0 / 255.0);

        let clean = img_const(0.01);
        let mut delta = Array3::zeros((2, 2, 3));
        delta[(1, 1, 2)] = -8.0 / 255.0;
        let out = project(&delta, 8.0 / 255.0, &clean);
        assert_relative_eq!(out[(1, 1, 2)], -0.01, epsilon = 1e-15);
    }

    #[test]
    fn project_is_idempotent() {
        let clean = img_const(0.9);
        let delta = Array3::from_shape_fn((2, 2, 3), |(y, x, c)| {
            0.3 * ((y + 2 * x + c) as f64 - 3.0)
        });
        let once = project(&delta, 0.05, &clean);
        let twice = project(&once, 0.05, &clean);
        assert_eq!(once, twice);
        // already-feasible input unchanged
        let feasible = Array3::from_elem((2, 2, 3), 0.01);
        assert_eq!(project(&feasible, 0.05, &clean), feasible);
    }

    #[test]
    fn pgd_step_moves_against_gradient_sign() {
        let clean = img_const(0.5);
        let cfg = AttackConfig::default();
        let delta = Array3::zeros((2, 2, 3));
        let mut grad = Array3::zeros((2, 2, 3));
        grad[(0, 0, 0)] = 3.7;
        grad[(0, 0, 1)] = -1.0;
        let next = pgd_step(&delta, &grad, &clean, &cfg).unwrap();
        assert_relative_eq!(next[(0, 0, 0)], -2.0 / 255.0);
        assert_relative_eq!(next[(0, 0, 1)], 2.0 / 255.0);
        assert_relative_eq!(next[(1, 1, 1)], 0.0); // sign(0) = 0

        // zero gradient leaves delta unchanged
        let same = pgd_step(&delta, &Array3::zeros((2, 2, 3)), &clean, &cfg).unwrap();
        assert_eq!(same, delta);
    }

    #[test]
    fn pgd_steps_saturate_at_budget() {
        // constant-sign gradient: the clamp binds at step 4 and holds
        let clean = img_const(0.5);
        let cfg = AttackConfig::default();
        let grad = Array3::from_elem((2, 2, 3), 1.0);
        let mut delta = Array3::zeros((2, 2, 3));
        for step in 0..10 {
            delta = pgd_step(&delta, &grad, &clean, &cfg).unwrap();
            let expect = (-(2.0 * (step as f64 + 1.0)) / 255.0).max(-8.0 / 255.0);
            assert_relative_eq!(delta[(0, 1, 0)], expect);
        }
        for &d in delta.iter() {
            assert_relative_eq!(d, -8.0 / 255.0);
        }
    }

    #[test]
    fn pgd_rejects_non_finite_gradient() {
        let clean = img_const(0.5);
        let cfg = AttackConfig::default();
        let mut grad = Array3::zeros((2, 2, 3));
        grad[(0, 0, 0)] = f64::NAN;
        assert!(matches!(
            pgd_step(&Array3::zeros((2, 2, 3)), &grad, &clean, &cfg),
            Err(Error::Numeric(_))
        ));
    }

    fn logits(vals: Array2<f64>) -> MaskLogits {
        MaskLogits::new(vals).unwrap()
    }

    #[test]
    fn clip_mse_examples() {
        // exact threshold match -> zero loss
        let target = logits(Array2::from_shape_fn((2, 2), |(y, _)| if y == 0 { 5.0 } else { -3.0 }));
        let adv = logits(Array2::from_shape_fn((2, 2), |(y, _)| if y == 0 { 40.0 } else { -10.0 }));
        assert_relative_eq!(clip_mse_loss(&adv, &target, 40.0, -10.0).unwrap(), 0.0);

        // thresholding: logit 5.0 -> 40, logit -3.0 -> -10
        let t = clip_targets(&target, 40.0, -10.0);
        assert_relative_eq!(t[(0, 0)], 40.0);
        assert_relative_eq!(t[(1, 0)], -10.0);

        // all-positive target, zero adv logits: loss = 40^2
        let target = logits(Array2::from_elem((3, 3), 1.0));
        let adv = logits(Array2::zeros((3, 3)));
        assert_relative_eq!(clip_mse_loss(&adv, &target, 40.0, -10.0).unwrap(), 1600.0);
    }

    fn grid(vals: Vec<f64>) -> EmbeddingGrid {
        let n = vals.len();
        EmbeddingGrid::new(Array3::from_shape_vec((1, 1, n), vals).unwrap()).unwrap()
    }

    #[test]
    fn feature_loss_zero_at_equality_for_all_kinds() {
        let a = grid(vec![0.4, -1.0, 2.2]);
        for kind in [FeatureLossKind::Mse, FeatureLossKind::Cosine, FeatureLossKind::Huber] {
            assert_relative_eq!(feature_loss(&a, &a, kind).unwrap(), 0.0);
        }
    }

    #[test]
    fn feature_loss_hand_values() {
        // orthogonal unit vectors: cosine loss = 1
        let a = grid(vec![1.0, 0.0]);
        let b = grid(vec![0.0, 1.0]);
        assert_relative_eq!(feature_loss(&a, &b, FeatureLossKind::Cosine).unwrap(), 1.0);

        // constant offset 2.0: huber per element = 2*1 - 0.5 = 1.5
        let a = grid(vec![2.0, 2.0, 2.0]);
        let z = grid(vec![0.0, 0.0, 0.0]);
        assert_relative_eq!(feature_loss(&a, &z, FeatureLossKind::Huber).unwrap(), 1.5);

        // mse of constant offset 2.0 is 4
        assert_relative_eq!(feature_loss(&a, &z, FeatureLossKind::Mse).unwrap(), 4.0);
    }

    #[test]
    fn feature_loss_grads_match_fd() {
        let a = vec![0.5, -0.3, 1.2, 0.1];
        let b = vec![-0.2, 0.4, 0.9, 0.7];
        for kind in [FeatureLossKind::Mse, FeatureLossKind::Cosine, FeatureLossKind::Huber] {
            let ga = grid(a.clone());
            let gb = grid(b.clone());
            let (_, dg) = feature_loss_with_grad(&ga, &gb, kind).unwrap();
            let h = 1e-6;
            for i in 0..a.len() {
                let mut up = a.clone();
                up[i] += h;
                let mut dn = a.clone();
                dn[i] -= h;
                let fd = (feature_loss(&grid(up), &gb, kind).unwrap()
                    - feature_loss(&grid(dn), &gb, kind).unwrap())
                    / (2.0 * h);
                let an = dg.as_slice().unwrap()[i];
                assert_relative_eq!(an, fd, epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn cosine_zero_norm_errors() {
        let z = grid(vec![0.0, 0.0]);
        let a = grid(vec![1.0, 0.0]);
        assert!(matches!(
            feature_loss(&z, &a, FeatureLossKind::Cosine),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn mix_modes_and_symmetry() {
        let a = img_const(0.7);
        let b = img_const(0.6);
        let sum = mix_images(&a, &b, MixMode::SumClamp).unwrap();
        assert_relative_eq!(sum.data()[(0, 0, 0)], 1.0);
        let mean = mix_images(&a, &b, MixMode::Mean).unwrap();
        assert_relative_eq!(mean.data()[(0, 0, 0)], 0.65);

        let z = img_const(0.0);
        assert_eq!(mix_images(&z, &z, MixMode::SumClamp).unwrap(), z);

        let ab = mix_images(&a, &b, MixMode::SumClamp).unwrap();
        let ba = mix_images(&b, &a, MixMode::SumClamp).unwrap();
        assert_eq!(ab, ba);
    }

    #[test]
    fn fd_grads_match_fd_differences() {
        let a = vec![0.6, -0.2, 0.9];
        let c = vec![0.1, 0.8, -0.5];
        let m = vec![0.4, 0.3, 0.2];
        let (fd0, d_adv, d_mix) = fd_with_grads(&grid(a.clone()), &grid(c.clone()), &grid(m.clone())).unwrap();
        let fd_of = |a: &[f64], m: &[f64]| {
            feature_dominance(&grid(a.to_vec()), &grid(c.clone()), &grid(m.to_vec())).unwrap()
        };
        assert_relative_eq!(fd0, fd_of(&a, &m));
        let h = 1e-6;
        for i in 0..3 {
            let mut up = a.clone();
            up[i] += h;
            let mut dn = a.clone();
            dn[i] -= h;
            let fd = (fd_of(&up, &m) - fd_of(&dn, &m)) / (2.0 * h);
            assert_relative_eq!(d_adv.as_slice().unwrap()[i], fd, epsilon = 1e-7);

            let mut up = m.clone();
            up[i] += h;
            let mut dn = m.clone();
            dn[i] -= h;
            let fd = (fd_of(&a, &up) - fd_of(&a, &dn)) / (2.0 * h);
            assert_relative_eq!(d_mix.as_slice().unwrap()[i], fd, epsilon = 1e-7);
        }
    }

    #[test]
    fn transform_none_is_identity() {
        let cfg = AttackConfig::default();
        let g = Array3::from_shape_fn((2, 2, 3), |(y, x, c)| (y + x + c) as f64 - 1.5);
        let state = Array3::zeros((2, 2, 3));
        let (out, _) = transform_gradient(&g, state, &cfg).unwrap();
        assert_eq!(out, g);
    }

    #[test]
    fn transform_mi_decay_zero_is_pure_l1_normalization() {
        let cfg = AttackConfig {
            grad_transform: GradTransformKind::Mi,
            mi_decay: 0.0,
            ..Default::default()
        };
        let g = Array3::from_shape_fn((1, 2, 3), |(_, x, c)| (x as f64 - 0.5) * (c as f64 + 1.0));
        let l1: f64 = g.iter().map(|v| v.abs()).sum();
        let (out, state) = transform_gradient(&g, Array3::from_elem((1, 2, 3), 9.0), &cfg).unwrap();
        for (o, gv) in out.iter().zip(g.iter()) {
            assert_relative_eq!(*o, gv / l1);
        }
        assert_eq!(out, state);
    }

    #[test]
    fn transform_mi_zero_gradient_returns_decayed_state() {
        let cfg = AttackConfig {
            grad_transform: GradTransformKind::Mi,
            mi_decay: 0.5,
            ..Default::default()
        };
        let state = Array3::from_elem((1, 1, 3), 2.0);
        let (out, next) = transform_gradient(&Array3::zeros((1, 1, 3)), state, &cfg).unwrap();
        for &v in out.iter() {
            assert_relative_eq!(v, 1.0);
        }
        assert_eq!(out, next);
    }

    #[test]
    fn transform_ti_kernel_one_is_identity_and_spreads_otherwise() {
        let mut cfg = AttackConfig {
            grad_transform: GradTransformKind::Ti,
            ti_kernel_size: 1,
            ti_sigma: 1.0,
            ..Default::default()
        };
        let mut g = Array3::zeros((7, 7, 1));
        g[(3, 3, 0)] = 4.0;
        let (out, _) = transform_gradient(&g, Array3::zeros((7, 7, 1)), &cfg).unwrap();
        assert_eq!(out, g);

        cfg.ti_kernel_size = 3;
        let (out, _) = transform_gradient(&g, Array3::zeros((7, 7, 1)), &cfg).unwrap();
        assert_relative_eq!(out.sum(), 4.0, epsilon = 1e-12);
        assert!(out[(3, 3, 0)] < 4.0 && out[(2, 3, 0)] > 0.0);
    }
}
