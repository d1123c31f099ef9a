//! Decoder calibration: a short moment-matching fit on synthetic shape
//! images that picks the logit affine so masks come out non-degenerate
//! (some foreground, some background) instead of whatever a random
//! projection happens to produce. Runs once at model construction; it is
//! part of model identity, not of evaluation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::toy::ToyModel;
use crate::math;
use crate::synth;
use crate::types::Prompt;

const CAL_IMAGES: usize = 12;
const CAL_PROMPTS_PER_IMAGE: usize = 6;
/// Fraction of pixels that end up above the zero threshold on the
/// calibration distribution.
const MASK_QUANTILE: f64 = 0.70;
const TARGET_SPREAD: f64 = 2.0;

pub(crate) fn calibrate_decoder(model: &mut ToyModel, seed: u64) {
    let (h, w) = (model.arch().input_h, model.arch().input_w);
    let mut rng = ChaCha8Rng::seed_from_u64(math::derive_seed(seed, 0xca11));
    let mut raw = Vec::new();
    for i in 0..CAL_IMAGES {
        let img = synth::shapes_image(math::derive_seed(seed, 0x1000 + i as u64), h, w);
        for _ in 0..CAL_PROMPTS_PER_IMAGE {
            let prompt = Prompt::point(rng.random_range(0..w as u32), rng.random_range(0..h as u32));
            raw.extend(model.raw_similarity(&img, &prompt).expect("calibration forward"));
        }
    }
    raw.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let quantile = raw[((raw.len() - 1) as f64 * MASK_QUANTILE) as usize];
    let median = raw[raw.len() / 2];
    let mad = raw.iter().map(|v| (v - median).abs()).sum::<f64>() / raw.len() as f64;
    let scale = TARGET_SPREAD / mad.max(1e-9);
    model.set_logit_affine(scale, -scale * quantile);
}
