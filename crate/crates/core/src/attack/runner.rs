//! The attack loop: T iterations of loss evaluation, gradient transform,
//! and projected signed descent.

use std::time::{Duration, Instant};

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{AttackConfig, AttackMethod};
use super::objectives::ClipMseObjective;
use super::ops::{
    feature_loss_with_grad, fd_with_grads, mix_grad_factor, mix_images, pgd_step,
    transform_gradient,
};
use super::sampler::CompetitionSampler;
use crate::error::{Error, Result};
use crate::model::{check_input_resolution, SegModel};
use crate::types::{ImageTensor, Prompt};

/// Losses recorded at one iteration, measured at the pre-step perturbation.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct IterationRecord {
    pub iter: usize,
    pub total_loss: f64,
    /// Feature loss for encoder attacks; absent for the decoder attack.
    pub feature_loss: Option<f64>,
    /// `−fd` of the current competition draw(s); only present when the
    /// dominance regularizer participates in the objective.
    pub reg_loss: Option<f64>,
    /// Feature dominance against the iteration's competition draw(s);
    /// logged for every encoder attack, absent for the decoder attack.
    pub fd_estimate: Option<f64>,
}

/// An adversarial image together with its optimization trace.
#[derive(Debug, Clone)]
pub struct AttackResult {
    pub adv_image: ImageTensor,
    pub per_iteration: Vec<IterationRecord>,
    pub config_echo: AttackConfig,
    pub elapsed: Duration,
}

impl AttackResult {
    pub fn final_record(&self) -> &IterationRecord {
        self.per_iteration.last().expect("at least one iteration")
    }
}

fn iter_context(err: Error, iter: usize) -> Error {
    match err {
        Error::Numeric(msg) => Error::numeric(format!("iteration {iter}: {msg}")),
        other => other,
    }
}

/// Run the configured attack. The decoder attack optimizes over the given
/// prompts; the encoder attacks (`pata*`) never read them, so their output
/// is bitwise independent of the prompt argument.
pub fn run_attack(
    model: &dyn SegModel,
    clean: &ImageTensor,
    target: &ImageTensor,
    prompts: &[Prompt],
    config: &AttackConfig,
) -> Result<AttackResult> {
    config.validate()?;
    check_input_resolution(model, clean)?;
    check_input_resolution(model, target)?;
    let start = Instant::now();

    let (records, delta) = match config.method {
        AttackMethod::DecoderAttack => decoder_attack(model, clean, target, prompts, config)?,
        _ => encoder_attack(model, clean, target, config)?,
    };

    let adv_image = ImageTensor::from_clamped(clean.data() + &delta)?;
    let deviation = adv_image.linf_distance(clean);
    if deviation > config.epsilon + 1e-6 {
        return Err(Error::numeric(format!(
            "projection failed to hold the budget: {deviation} > {}",
            config.epsilon
        )));
    }
    Ok(AttackResult {
        adv_image,
        per_iteration: records,
        config_echo: config.clone(),
        elapsed: start.elapsed(),
    })
}

fn decoder_attack(
    model: &dyn SegModel,
    clean: &ImageTensor,
    target: &ImageTensor,
    prompts: &[Prompt],
    config: &AttackConfig,
) -> Result<(Vec<IterationRecord>, Array3<f64>)> {
    let (h, w) = model.input_resolution();
    for p in prompts {
        p.validate(h, w)?;
    }
    let objective = ClipMseObjective::new(model, target, prompts, config.thres_pos, config.thres_neg)?;

    let mut delta = Array3::zeros(clean.data().dim());
    let mut state = Array3::zeros(clean.data().dim());
    let mut records = Vec::with_capacity(config.iterations);
    for t in 0..config.iterations {
        let adv = ImageTensor::from_clamped(clean.data() + &delta)?;
        let eval = model
            .input_gradient(&adv, &objective)
            .map_err(|e| iter_context(e, t))?;
        let (grad, next_state) =
            transform_gradient(&eval.pixel_grad, state, config).map_err(|e| iter_context(e, t))?;
        state = next_state;
        delta = pgd_step(&delta, &grad, clean, config).map_err(|e| iter_context(e, t))?;
        records.push(IterationRecord {
            iter: t,
            total_loss: eval.value,
            feature_loss: None,
            reg_loss: None,
            fd_estimate: None,
        });
    }
    Ok((records, delta))
}

fn encoder_attack(
    model: &dyn SegModel,
    clean: &ImageTensor,
    target: &ImageTensor,
    config: &AttackConfig,
) -> Result<(Vec<IterationRecord>, Array3<f64>)> {
    let regularized = matches!(
        config.method,
        AttackMethod::PataPlus | AttackMethod::PataPlusPlus
    );
    // The regularizer gradient (two extra encoder passes per draw) only has
    // to flow when it can change the update direction.
    let needs_reg_grad = regularized && config.lambda_reg > 0.0;

    let e_target = model.encode_image(target)?;
    let sampler = CompetitionSampler::new(&config.competition, model.input_resolution())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut delta = Array3::zeros(clean.data().dim());
    let mut state = Array3::zeros(clean.data().dim());
    let mut records = Vec::with_capacity(config.iterations);
    for t in 0..config.iterations {
        let wrap = |e: Error| iter_context(e, t);
        let adv = ImageTensor::from_clamped(clean.data() + &delta)?;
        let (e_adv, enc_pb) = model.encode_with_pullback(&adv).map_err(wrap)?;
        let (floss, mut d_e_adv) =
            feature_loss_with_grad(&e_adv, &e_target, config.feature_loss).map_err(wrap)?;

        // Competition draws: regularizer term for pata_plus/pata_plus_plus,
        // dominance logging for every encoder attack.
        let count = config.competition.count_per_iter;
        let weight = config.lambda_reg / count as f64;
        let mut fd_sum = 0.0;
        let mut reg_pixel_grad: Option<Array3<f64>> = None;
        for _ in 0..count {
            let com = sampler.draw(clean, &mut rng).map_err(wrap)?;
            let mix = mix_images(&adv, &com, config.competition.mix_mode).map_err(wrap)?;
            let e_com = model.encode_image(&com).map_err(wrap)?;
            if needs_reg_grad {
                let (e_mix, mix_pb) = model.encode_with_pullback(&mix).map_err(wrap)?;
                let (fd, d_fadv, d_fmix) = fd_with_grads(&e_adv, &e_com, &e_mix).map_err(wrap)?;
                fd_sum += fd;
                // Loss_reg = −fd, weighted by lambda over the draws.
                d_e_adv.zip_mut_with(&d_fadv, |a, &g| *a -= weight * g);
                let cot = d_fmix.mapv(|g| -weight * g);
                let mut mix_pixels = mix_pb(&cot).map_err(wrap)?;
                mix_pixels *= &mix_grad_factor(&adv, &com, config.competition.mix_mode);
                match &mut reg_pixel_grad {
                    Some(acc) => *acc += &mix_pixels,
                    None => reg_pixel_grad = Some(mix_pixels),
                }
            } else {
                let e_mix = model.encode_image(&mix).map_err(wrap)?;
                fd_sum +=
                    crate::metrics::feature_dominance(&e_adv, &e_com, &e_mix).map_err(wrap)?;
            }
        }
        let fd_mean = fd_sum / count as f64;
        let reg_loss = -fd_mean;
        let total = if regularized {
            floss + config.lambda_reg * reg_loss
        } else {
            floss
        };
        if !total.is_finite() {
            return Err(Error::numeric(format!(
                "iteration {t}: non-finite attack loss {total}"
            )));
        }

        let mut grad = enc_pb(&d_e_adv).map_err(wrap)?;
        if let Some(rg) = reg_pixel_grad {
            grad += &rg;
        }
        let (grad, next_state) = transform_gradient(&grad, state, config).map_err(wrap)?;
        state = next_state;
        delta = pgd_step(&delta, &grad, clean, config).map_err(wrap)?;
        records.push(IterationRecord {
            iter: t,
            total_loss: total,
            feature_loss: Some(floss),
            reg_loss: regularized.then_some(reg_loss),
            fd_estimate: Some(fd_mean),
        });
    }
    Ok((records, delta))
}
