//! Prompt-set generation and the cross-prompt transfer experiment.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{run_attack, AttackConfig, AttackMethod};
use crate::error::{Error, Result};
use crate::math;
use crate::metrics::miou;
use crate::model::SegModel;
use crate::types::{ImageTensor, Prompt};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptRole {
    Train,
    Test,
    Grid,
}

/// A generated set of prompts with its provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptSet {
    pub role: PromptRole,
    pub seed: u64,
    pub id: String,
    pub prompts: Vec<Prompt>,
}

/// `n` distinct point prompts uniform over the pixel grid; duplicates are
/// rejected and redrawn.
pub fn sample_points(n: usize, dims: (usize, usize), seed: u64, role: PromptRole) -> Result<PromptSet> {
    let (h, w) = dims;
    if n == 0 {
        return Err(Error::input("prompt sets need n >= 1 points"));
    }
    if n > h * w {
        return Err(Error::input(format!(
            "cannot place {n} distinct points on a {h}x{w} grid"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::with_capacity(n);
    let mut prompts = Vec::with_capacity(n);
    while prompts.len() < n {
        let x = rng.random_range(0..w as u32);
        let y = rng.random_range(0..h as u32);
        if seen.insert((x, y)) {
            prompts.push(Prompt::point(x, y));
        }
    }
    Ok(PromptSet {
        role,
        seed,
        id: format!("pts{n}-s{seed}"),
        prompts,
    })
}

/// Points at the centers of `stride × stride` cells tiling the image
/// (segment-everything lattice). Centers of partial edge cells clamp to the
/// image bounds.
pub fn grid_prompts(stride: usize, dims: (usize, usize)) -> Result<PromptSet> {
    let (h, w) = dims;
    if stride == 0 {
        return Err(Error::input("grid stride must be >= 1"));
    }
    let cells_y = h.div_ceil(stride);
    let cells_x = w.div_ceil(stride);
    let mut prompts = Vec::with_capacity(cells_y * cells_x);
    for cy in 0..cells_y {
        for cx in 0..cells_x {
            let y = (cy * stride + stride / 2).min(h - 1) as u32;
            let x = (cx * stride + stride / 2).min(w - 1) as u32;
            prompts.push(Prompt::point(x, y));
        }
    }
    Ok(PromptSet {
        role: PromptRole::Grid,
        seed: 0,
        id: format!("grid-stride{stride}"),
        prompts,
    })
}

/// Random box prompts: uniform centers, side lengths uniform in
/// `[0.2, 0.8]` of the image dimensions.
pub fn sample_boxes(n: usize, dims: (usize, usize), seed: u64) -> Result<PromptSet> {
    let (h, w) = dims;
    if n == 0 {
        return Err(Error::input("prompt sets need n >= 1 boxes"));
    }
    if h < 2 || w < 2 {
        return Err(Error::input("boxes need at least a 2x2 image"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut prompts = Vec::with_capacity(n);
    for _ in 0..n {
        let bw = ((rng.random_range(0.2..=0.8) * w as f64).round() as usize).clamp(2, w);
        let bh = ((rng.random_range(0.2..=0.8) * h as f64).round() as usize).clamp(2, h);
        let cx = rng.random_range(0..w);
        let cy = rng.random_range(0..h);
        let x1 = cx.saturating_sub(bw / 2).min(w - bw);
        let y1 = cy.saturating_sub(bh / 2).min(h - bh);
        prompts.push(Prompt::bbox(
            x1 as u32,
            y1 as u32,
            (x1 + bw - 1) as u32,
            (y1 + bh - 1) as u32,
        ));
    }
    Ok(PromptSet {
        role: PromptRole::Test,
        seed,
        id: format!("box{n}-s{seed}"),
        prompts,
    })
}

/// One row of the cross-prompt experiment table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrossPromptRow {
    pub k: usize,
    pub train_miou: f64,
    pub test_miou: f64,
}

/// The cross-prompt transfer experiment: for each K, run the decoder attack
/// with K freshly sampled training points, then score mIoU of adversarial
/// vs. target masks on both the training points and the held-out test set.
///
/// Target masks are recomputed per prompt from the target image; training
/// mIoU is measured on the exact points used during optimization.
pub fn cross_prompt_experiment(
    model: &dyn SegModel,
    clean: &ImageTensor,
    target: &ImageTensor,
    k_values: &[usize],
    test_set: &PromptSet,
    config: &AttackConfig,
) -> Result<Vec<CrossPromptRow>> {
    if k_values.is_empty() {
        return Err(Error::input("cross-prompt experiment needs k_values"));
    }
    if test_set.role != PromptRole::Test {
        return Err(Error::input("cross-prompt experiment needs a test-role prompt set"));
    }
    let dims = model.input_resolution();
    let e_target = model.encode_image(target)?;
    let mut rows = Vec::with_capacity(k_values.len());
    for &k in k_values {
        let train = sample_points(k, dims, math::derive_seed(config.seed, 0x7a11 + k as u64), PromptRole::Train)
            .map_err(|e| Error::input(format!("K={k}: {e}")))?;
        let cfg = AttackConfig {
            method: AttackMethod::DecoderAttack,
            train_prompts: k,
            ..config.clone()
        };
        let result = run_attack(model, clean, target, &train.prompts, &cfg)
            .map_err(|e| Error::input(format!("K={k}: attack failed: {e}")))?;
        let e_adv = model.encode_image(&result.adv_image)?;

        let score = |set: &PromptSet| -> Result<f64> {
            let mut pairs = Vec::with_capacity(set.prompts.len());
            for p in &set.prompts {
                let adv_logits = model.decode_mask(&e_adv, p)?;
                let target_logits = model.decode_mask(&e_target, p)?;
                pairs.push((adv_logits, target_logits));
            }
            Ok(miou(&pairs, &set.id)?.miou)
        };
        rows.push(CrossPromptRow {
            k,
            train_miou: score(&train)?,
            test_miou: score(test_set)?,
        });
    }
    Ok(rows)
}
