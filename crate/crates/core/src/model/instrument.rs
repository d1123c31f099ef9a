//! Instrumented model wrapper that counts which prompts enter loss
//! computations, used to assert train/test prompt discipline in the
//! cross-prompt experiment.

use std::collections::HashMap;
use std::sync::Mutex;

use super::{DecPullback, EncPullback, LossEval, Objective, SegModel};
use crate::error::Result;
use crate::types::{EmbeddingGrid, ImageTensor, MaskLogits, Prompt};

/// Wraps a model and records, per prompt, how many times that prompt was
/// decoded inside a gradient (i.e. attack-loss) computation. Plain
/// `decode_mask` calls (evaluation) are not counted.
pub struct CountingModel<'a> {
    inner: &'a dyn SegModel,
    loss_prompt_counts: Mutex<HashMap<Prompt, u64>>,
}

impl<'a> CountingModel<'a> {
    pub fn new(inner: &'a dyn SegModel) -> Self {
        Self {
            inner,
            loss_prompt_counts: Mutex::new(HashMap::new()),
        }
    }

    /// Prompts seen in loss computations so far, with counts.
    pub fn loss_prompt_counts(&self) -> HashMap<Prompt, u64> {
        self.loss_prompt_counts.lock().unwrap().clone()
    }
}

impl SegModel for CountingModel<'_> {
    fn identity(&self) -> &str {
        self.inner.identity()
    }

    fn patch_size(&self) -> usize {
        self.inner.patch_size()
    }

    fn input_resolution(&self) -> (usize, usize) {
        self.inner.input_resolution()
    }

    fn embedding_shape(&self) -> (usize, usize, usize) {
        self.inner.embedding_shape()
    }

    fn encode_image(&self, image: &ImageTensor) -> Result<EmbeddingGrid> {
        self.inner.encode_image(image)
    }

    fn decode_mask(&self, embedding: &EmbeddingGrid, prompt: &Prompt) -> Result<MaskLogits> {
        self.inner.decode_mask(embedding, prompt)
    }

    fn encode_with_pullback<'b>(
        &'b self,
        image: &ImageTensor,
    ) -> Result<(EmbeddingGrid, EncPullback<'b>)> {
        self.inner.encode_with_pullback(image)
    }

    fn decode_with_pullback<'b>(
        &'b self,
        embedding: &EmbeddingGrid,
        prompt: &Prompt,
    ) -> Result<(MaskLogits, DecPullback<'b>)> {
        let mut counts = self.loss_prompt_counts.lock().unwrap();
        *counts.entry(*prompt).or_insert(0) += 1;
        drop(counts);
        self.inner.decode_with_pullback(embedding, prompt)
    }

    fn input_gradient(&self, image: &ImageTensor, objective: &dyn Objective) -> Result<LossEval> {
        {
            let mut counts = self.loss_prompt_counts.lock().unwrap();
            for p in objective.prompts() {
                *counts.entry(*p).or_insert(0) += 1;
            }
        }
        self.inner.input_gradient(image, objective)
    }
}
