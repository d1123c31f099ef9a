//! Competition image sampling: random crops of the clean image, or draws
//! from an external image pool.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::config::{CompetitionSource, CompetitionSpec};
use crate::error::{Error, Result};
use crate::types::ImageTensor;

/// Resolves a [`CompetitionSpec`] once (loading any external pool) and then
/// draws competition images at the model resolution.
pub struct CompetitionSampler {
    source: CompetitionSource,
    pool: Vec<ImageTensor>,
    scale_range: (f64, f64),
    resolution: (usize, usize),
}

impl CompetitionSampler {
    pub fn new(spec: &CompetitionSpec, resolution: (usize, usize)) -> Result<Self> {
        spec.validate()?;
        let pool = match spec.source {
            CompetitionSource::ExternalImages => spec
                .pool
                .iter()
                .map(|p| ImageTensor::load(p, Some(resolution)))
                .collect::<Result<Vec<_>>>()?,
            CompetitionSource::SelfPatches => Vec::new(),
        };
        Ok(Self {
            source: spec.source,
            pool,
            scale_range: spec.patch_scale_range,
            resolution,
        })
    }

    /// Pool sampler for tests and in-memory use.
    pub fn from_pool(pool: Vec<ImageTensor>, resolution: (usize, usize)) -> Result<Self> {
        if pool.is_empty() {
            return Err(Error::config("competition pool is empty"));
        }
        let pool = pool
            .into_iter()
            .map(|img| img.resized(resolution.0, resolution.1))
            .collect();
        Ok(Self {
            source: CompetitionSource::ExternalImages,
            pool,
            scale_range: (0.1, 0.5),
            resolution,
        })
    }

    /// Draw one competition image. `self_patches` crops the clean image with
    /// side fractions uniform over the configured range at a uniform
    /// position, then resizes to the model resolution.
    pub fn draw(&self, clean: &ImageTensor, rng: &mut ChaCha8Rng) -> Result<ImageTensor> {
        match self.source {
            CompetitionSource::ExternalImages => {
                let idx = rng.random_range(0..self.pool.len());
                Ok(self.pool[idx].clone())
            }
            CompetitionSource::SelfPatches => {
                let (h, w) = (clean.height(), clean.width());
                let (lo, hi) = self.scale_range;
                let fh: f64 = rng.random_range(lo..=hi);
                let fw: f64 = rng.random_range(lo..=hi);
                let ph = ((fh * h as f64).round() as usize).clamp(1, h);
                let pw = ((fw * w as f64).round() as usize).clamp(1, w);
                let oy = rng.random_range(0..=h - ph);
                let ox = rng.random_range(0..=w - pw);
                clean.crop_resized(oy, ox, ph, pw, self.resolution.0, self.resolution.1)
            }
        }
    }
}

/// One-shot form of the sampler: resolve the spec and draw a single
/// competition image at the clean image's resolution.
pub fn sample_competition(
    clean: &ImageTensor,
    spec: &CompetitionSpec,
    rng: &mut ChaCha8Rng,
) -> Result<ImageTensor> {
    CompetitionSampler::new(spec, (clean.height(), clean.width()))?.draw(clean, rng)
}
