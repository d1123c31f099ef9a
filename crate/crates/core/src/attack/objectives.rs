//! [`Objective`] implementations used by the attack loop (and reusable for
//! any model behind the [`SegModel`] trait).

use ndarray::Array2;

use super::config::FeatureLossKind;
use super::ops::{clip_targets, feature_loss_with_grad};
use crate::error::{Error, Result};
use crate::model::{Objective, ObjectiveEval, SegModel};
use crate::types::{EmbeddingGrid, ImageTensor, MaskLogits, Prompt};

/// Decoder-space clip-MSE objective: drive each prompt's logits toward the
/// thresholded target values, averaged over pixels and prompts.
pub struct ClipMseObjective {
    prompts: Vec<Prompt>,
    targets: Vec<Array2<f64>>,
}

impl ClipMseObjective {
    /// Precompute the thresholded target-logit values for every prompt from
    /// the target image.
    pub fn new(
        model: &dyn SegModel,
        target_image: &ImageTensor,
        prompts: &[Prompt],
        thres_pos: f64,
        thres_neg: f64,
    ) -> Result<Self> {
        if prompts.is_empty() {
            return Err(Error::input("decoder attack requires at least one prompt"));
        }
        let embedding = model.encode_image(target_image)?;
        let targets = prompts
            .iter()
            .map(|p| {
                model
                    .decode_mask(&embedding, p)
                    .map(|lg| clip_targets(&lg, thres_pos, thres_neg))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            prompts: prompts.to_vec(),
            targets,
        })
    }
}

impl Objective for ClipMseObjective {
    fn prompts(&self) -> &[Prompt] {
        &self.prompts
    }

    fn eval(&self, _embedding: &EmbeddingGrid, logits: &[MaskLogits]) -> Result<ObjectiveEval> {
        let k = self.prompts.len() as f64;
        let mut value = 0.0;
        let mut d_logits = Vec::with_capacity(logits.len());
        for (lg, t) in logits.iter().zip(&self.targets) {
            if lg.data().dim() != t.dim() {
                return Err(Error::input("clip-MSE logits shape mismatch"));
            }
            let n = t.len() as f64;
            let mut d = Array2::zeros(t.dim());
            let mut loss = 0.0;
            for ((dv, &lv), &tv) in d.iter_mut().zip(lg.data().iter()).zip(t.iter()) {
                let diff = lv - tv;
                loss += diff * diff;
                *dv = 2.0 * diff / (n * k);
            }
            value += loss / (n * k);
            d_logits.push(d);
        }
        Ok(ObjectiveEval {
            value,
            d_embedding: None,
            d_logits,
        })
    }
}

/// Encoder-feature objective: distance between the embedding and a fixed
/// target embedding under the configured feature loss.
pub struct FeatureObjective {
    pub target: EmbeddingGrid,
    pub kind: FeatureLossKind,
}

impl Objective for FeatureObjective {
    fn eval(&self, embedding: &EmbeddingGrid, _logits: &[MaskLogits]) -> Result<ObjectiveEval> {
        let (value, grad) = feature_loss_with_grad(embedding, &self.target, self.kind)?;
        Ok(ObjectiveEval {
            value,
            d_embedding: Some(grad),
            d_logits: vec![],
        })
    }
}
