//! Evaluation quantities: mask binarization, IoU/mIoU over prompt sets,
//! and the feature-dominance measure.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{mix_images, CompetitionSampler, CompetitionSpec};
use crate::error::{Error, Result};
use crate::math;
use crate::model::SegModel;
use crate::types::{EmbeddingGrid, ImageTensor, MaskLogits};

/// A binary segmentation mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    bits: Array2<bool>,
}

impl BinaryMask {
    pub fn new(bits: Array2<bool>) -> Self {
        Self { bits }
    }

    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        Self {
            bits: Array2::from_shape_fn((h, w), |(y, x)| f(y, x)),
        }
    }

    pub fn height(&self) -> usize {
        self.bits.dim().0
    }

    pub fn width(&self) -> usize {
        self.bits.dim().1
    }

    pub fn bits(&self) -> &Array2<bool> {
        &self.bits
    }

    pub fn count_true(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }
}

/// Binarize logits at the strict zero threshold: a pixel is masked iff its
/// logit is `> 0`.
pub fn binarize(logits: &MaskLogits) -> BinaryMask {
    BinaryMask {
        bits: logits.data().mapv(|v| v > 0.0),
    }
}

/// Intersection over union. Two empty masks agree perfectly (1.0); exactly
/// one empty mask scores 0.0.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.bits.dim() != b.bits.dim() {
        return Err(Error::input(format!(
            "mask shapes differ: {:?} vs {:?}",
            a.bits.dim(),
            b.bits.dim()
        )));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (x, y) in a.bits.iter().zip(b.bits.iter()) {
        inter += (*x && *y) as usize;
        union += (*x || *y) as usize;
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Per-pair IoUs and their mean over a set of logit pairs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub per_pair_iou: Vec<f64>,
    pub miou: f64,
    pub n_pairs: usize,
    pub prompt_set_id: String,
}

/// Binarize each `(adv, target)` logit pair and average the IoUs.
pub fn miou(pairs: &[(MaskLogits, MaskLogits)], prompt_set_id: &str) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::input("mIoU over an empty pair list"));
    }
    let mut per_pair_iou = Vec::with_capacity(pairs.len());
    for (a, b) in pairs {
        per_pair_iou.push(iou(&binarize(a), &binarize(b))?);
    }
    let miou = per_pair_iou.iter().sum::<f64>() / per_pair_iou.len() as f64;
    Ok(EvalReport {
        n_pairs: per_pair_iou.len(),
        miou,
        per_pair_iou,
        prompt_set_id: prompt_set_id.to_string(),
    })
}

/// Feature dominance: `fd = CosSim(f_adv, f_mix) − CosSim(f_com, f_mix)`
/// over fully flattened grids. Antisymmetric under swapping adv and com;
/// range `[-2, 2]`.
pub fn feature_dominance(
    f_adv: &EmbeddingGrid,
    f_com: &EmbeddingGrid,
    f_mix: &EmbeddingGrid,
) -> Result<f64> {
    if !f_adv.same_shape(f_com) || !f_adv.same_shape(f_mix) {
        return Err(Error::input("feature dominance needs equally shaped grids"));
    }
    Ok(math::cosine_sim(f_adv.flat(), f_mix.flat())? - math::cosine_sim(f_com.flat(), f_mix.flat())?)
}

/// Monte-Carlo feature-dominance estimate: average `fd` over `m`
/// competition draws against `clean_source`.
pub fn fd_estimate(
    model: &dyn SegModel,
    adv: &ImageTensor,
    clean_source: &ImageTensor,
    spec: &CompetitionSpec,
    m: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if m == 0 {
        return Err(Error::input("fd_estimate needs m >= 1 draws"));
    }
    let sampler = CompetitionSampler::new(spec, (adv.height(), adv.width()))?;
    let f_adv = model.encode_image(adv)?;
    let mut sum = 0.0;
    for _ in 0..m {
        let com = sampler.draw(clean_source, rng)?;
        let mix = mix_images(adv, &com, spec.mix_mode)?;
        let f_com = model.encode_image(&com)?;
        let f_mix = model.encode_image(&mix)?;
        sum += feature_dominance(&f_adv, &f_com, &f_mix)?;
    }
    Ok(sum / m as f64)
}

/// Write a mask as a 1-bit grayscale PNG (masked pixels white).
pub fn write_mask_png(mask: &BinaryMask, path: &Path) -> Result<()> {
    let (h, w) = (mask.height(), mask.width());
    let stride = w.div_ceil(8);
    let mut packed = vec![0u8; stride * h];
    for y in 0..h {
        for x in 0..w {
            if mask.bits[(y, x)] {
                packed[y * stride + x / 8] |= 0x80 >> (x % 8);
            }
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::One);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::input(format!("png header: {e}")))?;
    writer
        .write_image_data(&packed)
        .map_err(|e| Error::input(format!("png data: {e}")))?;
    Ok(())
}

/// Read a mask PNG (any grayscale depth; nonzero means masked).
pub fn read_mask_png(path: &Path) -> Result<BinaryMask> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(BinaryMask {
        bits: Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
            img.get_pixel(x as u32, y as u32).0[0] != 0
        }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::Array3;

    fn logits_of(vals: &[f64], h: usize, w: usize) -> MaskLogits {
        MaskLogits::new(Array2::from_shape_vec((h, w), vals.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn binarize_is_strict() {
        let l = logits_of(&[-0.5, 0.0, 0.5, 1.0], 2, 2);
        let m = binarize(&l);
        assert_eq!(m.bits()[(0, 0)], false);
        assert_eq!(m.bits()[(0, 1)], false, "zero logit is background");
        assert_eq!(m.bits()[(1, 0)], true);
        assert_eq!(m.bits()[(1, 1)], true);

        let zeros = logits_of(&[0.0; 4], 2, 2);
        assert_eq!(binarize(&zeros).count_true(), 0);
        let ones = logits_of(&[1.0; 4], 2, 2);
        assert_eq!(binarize(&ones).count_true(), 4);
    }

    #[test]
    fn iou_known_cases() {
        let a = BinaryMask::from_fn(8, 8, |y, _| y < 4);
        let b = BinaryMask::from_fn(8, 8, |_, x| x < 4);
        // rows 0-3 vs cols 0-3: |∧| = 16, |∨| = 48
        assert_relative_eq!(iou(&a, &b).unwrap(), 1.0 / 3.0);
        assert_relative_eq!(iou(&a, &a).unwrap(), 1.0);
        let empty = BinaryMask::from_fn(8, 8, |_, _| false);
        let disjoint = BinaryMask::from_fn(8, 8, |y, _| y >= 4);
        assert_relative_eq!(iou(&a, &disjoint).unwrap(), 0.0);
        assert_relative_eq!(iou(&empty, &empty).unwrap(), 1.0);
        assert_relative_eq!(iou(&a, &empty).unwrap(), 0.0);
        assert_relative_eq!(iou(&a, &b).unwrap(), iou(&b, &a).unwrap());
    }

    #[test]
    fn iou_shape_mismatch_is_input_error() {
        let a = BinaryMask::from_fn(4, 4, |_, _| true);
        let b = BinaryMask::from_fn(4, 5, |_, _| true);
        assert!(matches!(iou(&a, &b), Err(Error::Input(_))));
    }

    #[test]
    fn miou_mean_and_errors() {
        let l1 = logits_of(&[1.0; 4], 2, 2);
        let l0 = logits_of(&[-1.0; 4], 2, 2);
        // identical pair -> 1.0; (all, none) pair -> 0.0
        let report = miou(
            &[(l1.clone(), l1.clone()), (l1.clone(), l0.clone())],
            "pairs",
        )
        .unwrap();
        assert_eq!(report.n_pairs, 2);
        assert_relative_eq!(report.miou, 0.5);
        assert_eq!(report.per_pair_iou, vec![1.0, 0.0]);
        assert!(miou(&[], "x").is_err());
    }

    #[test]
    fn miou_json_field_names() {
        let l1 = logits_of(&[1.0; 4], 2, 2);
        let report = miou(&[(l1.clone(), l1)], "pts64").unwrap();
        let json = serde_json::to_value(&report).unwrap();
        assert!(json.get("per_pair_iou").is_some());
        assert!(json.get("miou").is_some());
        assert!(json.get("n_pairs").is_some());
        assert_eq!(json["prompt_set_id"], "pts64");
    }

    fn grid_of(vals: Vec<f64>, d: usize) -> EmbeddingGrid {
        EmbeddingGrid::new(Array3::from_shape_vec((1, 1, d), vals).unwrap()).unwrap()
    }

    #[test]
    fn fd_hand_case_and_antisymmetry() {
        let a = grid_of(vec![1.0, 0.0], 2);
        let c = grid_of(vec![0.0, 1.0], 2);
        let m = grid_of(vec![1.0, 0.0], 2);
        // cos(a,m)=1, cos(c,m)=0
        assert_relative_eq!(feature_dominance(&a, &c, &m).unwrap(), 1.0);
        assert_relative_eq!(
            feature_dominance(&c, &a, &m).unwrap(),
            -feature_dominance(&a, &c, &m).unwrap()
        );
        assert_relative_eq!(feature_dominance(&a, &a, &m).unwrap(), 0.0);
    }

    #[test]
    fn fd_mix_equals_adv_is_nonnegative() {
        // replacing f_mix with f_adv gives fd = 1 - cos(f_com, f_adv) >= 0
        let a = grid_of(vec![0.3, -0.8, 0.5], 3);
        let c = grid_of(vec![1.0, 0.2, -0.4], 3);
        let fd = feature_dominance(&a, &c, &a).unwrap();
        assert!(fd >= 0.0);
    }

    #[test]
    fn mask_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mask = BinaryMask::from_fn(13, 9, |y, x| (y * 9 + x) % 3 == 0);
        let path = dir.path().join("mask.png");
        write_mask_png(&mask, &path).unwrap();
        let back = read_mask_png(&path).unwrap();
        assert_eq!(mask, back);
    }
}
