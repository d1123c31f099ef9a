//! The prompt-guided segmentation model contract and the desk-scale toy
//! model.
//!
//! A model is a two-stage pipeline: an image encoder producing an
//! [`EmbeddingGrid`], and a prompt-conditioned decoder mapping an embedding
//! plus a [`Prompt`] to per-pixel [`MaskLogits`]. Attacks additionally need
//! exact gradients of scalar objectives with respect to input pixels, which
//! the [`SegModel`] trait exposes through reverse-mode pullbacks.
//!
//! Real pretrained checkpoints plug in behind the same trait: implement the
//! two forward passes and the two pullbacks and everything downstream (the
//! attack loop, the metrics, the bench harness) works unchanged.

mod calibrate;
mod instrument;
mod io;
mod toy;

pub use instrument::CountingModel;
pub use io::{load_model, save_weights, ModelDefinition};
pub use toy::{ToyArch, ToyModel};

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::types::{EmbeddingGrid, ImageTensor, MaskLogits, Prompt};

/// Pullback of an encoder forward pass: maps a cotangent on the embedding
/// to a cotangent on the input pixels.
pub type EncPullback<'a> = Box<dyn FnOnce(&Array3<f64>) -> Result<Array3<f64>> + Send + 'a>;

/// Pullback of a decoder forward pass: maps a cotangent on the logits to a
/// cotangent on the embedding.
pub type DecPullback<'a> = Box<dyn FnOnce(&Array2<f64>) -> Result<Array3<f64>> + Send + 'a>;

/// Value and input-pixel gradient of a scalar objective.
#[derive(Debug, Clone)]
pub struct LossEval {
    pub value: f64,
    pub pixel_grad: Array3<f64>,
}

/// Gradients of a scalar objective with respect to the model outputs it
/// consumed.
pub struct ObjectiveEval {
    pub value: f64,
    /// dL/d embedding, when the objective reads the embedding directly.
    pub d_embedding: Option<Array3<f64>>,
    /// dL/d logits, one entry per prompt in [`Objective::prompts`] order.
    pub d_logits: Vec<Array2<f64>>,
}

/// A scalar objective over model outputs (embedding and/or per-prompt
/// logits), together with its output-side gradients. [`SegModel`] chains
/// these through the model to input pixels.
pub trait Objective: Send + Sync {
    /// Prompts whose decoded logits the objective needs (possibly none).
    fn prompts(&self) -> &[Prompt] {
        &[]
    }

    fn eval(&self, embedding: &EmbeddingGrid, logits: &[MaskLogits]) -> Result<ObjectiveEval>;
}

/// The segmentation model contract. Implementations must be deterministic:
/// fixed parameters and inputs produce bitwise-identical outputs, and
/// evaluation is read-only so concurrent calls are safe.
pub trait SegModel: Send + Sync {
    fn identity(&self) -> &str;

    fn patch_size(&self) -> usize;

    /// `(height, width)` the model accepts.
    fn input_resolution(&self) -> (usize, usize);

    /// `(grid_h, grid_w, dim)` of the encoder output; constant for a given
    /// model regardless of image content.
    fn embedding_shape(&self) -> (usize, usize, usize);

    fn encode_image(&self, image: &ImageTensor) -> Result<EmbeddingGrid>;

    fn decode_mask(&self, embedding: &EmbeddingGrid, prompt: &Prompt) -> Result<MaskLogits>;

    fn encode_with_pullback<'a>(
        &'a self,
        image: &ImageTensor,
    ) -> Result<(EmbeddingGrid, EncPullback<'a>)>;

    fn decode_with_pullback<'a>(
        &'a self,
        embedding: &EmbeddingGrid,
        prompt: &Prompt,
    ) -> Result<(MaskLogits, DecPullback<'a>)>;

    /// Full forward pass; exactly the composition of encode and decode.
    fn forward(&self, image: &ImageTensor, prompt: &Prompt) -> Result<MaskLogits> {
        let embedding = self.encode_image(image)?;
        self.decode_mask(&embedding, prompt)
    }

    /// Gradient of `objective` with respect to input pixels, via one encoder
    /// pass plus one decoder pass per objective prompt.
    fn input_gradient(&self, image: &ImageTensor, objective: &dyn Objective) -> Result<LossEval> {
        let (embedding, enc_pb) = self.encode_with_pullback(image)?;
        let prompts = objective.prompts();
        let mut logits = Vec::with_capacity(prompts.len());
        let mut dec_pbs = Vec::with_capacity(prompts.len());
        for prompt in prompts {
            let (lg, pb) = self.decode_with_pullback(&embedding, prompt)?;
            logits.push(lg);
            dec_pbs.push(pb);
        }
        let eval = objective.eval(&embedding, &logits)?;
        if !eval.value.is_finite() {
            return Err(Error::numeric(format!(
                "objective produced non-finite loss {}",
                eval.value
            )));
        }
        if eval.d_logits.len() != prompts.len() {
            return Err(Error::input(format!(
                "objective returned {} logit gradients for {} prompts",
                eval.d_logits.len(),
                prompts.len()
            )));
        }

        let (gh, gw, gd) = self.embedding_shape();
        let mut d_embedding = eval.d_embedding.unwrap_or_else(|| Array3::zeros((gh, gw, gd)));
        for (pb, dl) in dec_pbs.into_iter().zip(&eval.d_logits) {
            d_embedding += &pb(dl)?;
        }
        let pixel_grad = enc_pb(&d_embedding)?;
        if pixel_grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite input gradient"));
        }
        Ok(LossEval {
            value: eval.value,
            pixel_grad,
        })
    }
}

/// Objective that is linear in the embedding: `loss = Σ w ⊙ e`. Its
/// embedding gradient is the weight tensor itself, which makes it both the
/// finite-difference test functional and the building block for encoder
/// vector-Jacobian products.
pub struct LinearEmbedding {
    pub weights: Array3<f64>,
}

impl Objective for LinearEmbedding {
    fn eval(&self, embedding: &EmbeddingGrid, _logits: &[MaskLogits]) -> Result<ObjectiveEval> {
        if self.weights.dim() != embedding.data().dim() {
            return Err(Error::input("linear functional shape mismatch"));
        }
        let value = self
            .weights
            .iter()
            .zip(embedding.data().iter())
            .map(|(w, e)| w * e)
            .sum();
        Ok(ObjectiveEval {
            value,
            d_embedding: Some(self.weights.clone()),
            d_logits: vec![],
        })
    }
}

pub(crate) fn check_input_resolution(model: &dyn SegModel, image: &ImageTensor) -> Result<()> {
    let (h, w) = model.input_resolution();
    if image.height() != h || image.width() != w {
        return Err(Error::config(format!(
            "model {} expects {}x{} input, got {}x{}",
            model.identity(),
            h,
            w,
            image.height(),
            image.width()
        )));
    }
    Ok(())
}
