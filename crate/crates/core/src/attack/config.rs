//! Attack configuration. The JSON form mirrors the field names exactly;
//! every field is optional with the documented default, and unknown keys
//! are a hard error so sweep typos fail loudly.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMethod {
    /// End-to-end clip-MSE attack through the mask decoder, over the
    /// supplied training prompts.
    DecoderAttack,
    /// Prompt-agnostic encoder-feature attack.
    Pata,
    /// Feature attack plus dominance regularization against external
    /// competition images.
    PataPlus,
    /// Feature attack plus dominance regularization against self-cropped
    /// patches, one fresh patch per iteration.
    PataPlusPlus,
}

impl AttackMethod {
    pub fn name(&self) -> &'static str {
        match self {
            AttackMethod::DecoderAttack => "decoder_attack",
            AttackMethod::Pata => "pata",
            AttackMethod::PataPlus => "pata_plus",
            AttackMethod::PataPlusPlus => "pata_plus_plus",
        }
    }

    pub fn is_encoder_attack(&self) -> bool {
        !matches!(self, AttackMethod::DecoderAttack)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureLossKind {
    Mse,
    Cosine,
    Huber,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradTransformKind {
    None,
    Mi,
    Ti,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompetitionSource {
    ExternalImages,
    SelfPatches,
}

/// How the adversarial and competition images combine into the mixed image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixMode {
    /// Literal pixel sum, clamped back into [0, 1]. The default.
    SumClamp,
    /// Pixel mean.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompetitionSpec {
    pub source: CompetitionSource,
    /// Competition draws per attack iteration (averaged).
    pub count_per_iter: usize,
    /// Image files for `external_images`.
    pub pool: Vec<PathBuf>,
    /// Patch side fractions for `self_patches`, drawn uniformly.
    pub patch_scale_range: (f64, f64),
    pub mix_mode: MixMode,
}

impl Default for CompetitionSpec {
    fn default() -> Self {
        Self {
            source: CompetitionSource::SelfPatches,
            count_per_iter: 1,
            pool: Vec::new(),
            patch_scale_range: (0.1, 0.5),
            mix_mode: MixMode::SumClamp,
        }
    }
}

impl CompetitionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count_per_iter == 0 {
            return Err(Error::config("competition count_per_iter must be >= 1"));
        }
        match self.source {
            CompetitionSource::ExternalImages => {
                if self.pool.is_empty() {
                    return Err(Error::config(
                        "external_images competition requires a non-empty pool",
                    ));
                }
            }
            CompetitionSource::SelfPatches => {
                let (lo, hi) = self.patch_scale_range;
                if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                    return Err(Error::config(format!(
                        "patch_scale_range ({lo}, {hi}) must be ordered within (0, 1]"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub method: AttackMethod,
    /// L-infinity budget in pixel units.
    pub epsilon: f64,
    pub step_size: f64,
    pub iterations: usize,
    pub feature_loss: FeatureLossKind,
    /// Weight of the dominance regularizer.
    pub lambda_reg: f64,
    /// Clip-MSE target value on target-masked pixels.
    pub thres_pos: f64,
    /// Clip-MSE target value on background pixels.
    pub thres_neg: f64,
    /// Training prompt count K for the decoder attack.
    pub train_prompts: usize,
    pub competition: CompetitionSpec,
    pub grad_transform: GradTransformKind,
    pub mi_decay: f64,
    pub ti_kernel_size: usize,
    pub ti_sigma: f64,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            method: AttackMethod::Pata,
            epsilon: 8.0 / 255.0,
            step_size: 2.0 / 255.0,
            iterations: 200,
            feature_loss: FeatureLossKind::Mse,
            lambda_reg: 0.01,
            thres_pos: 40.0,
            thres_neg: -10.0,
            train_prompts: 1,
            competition: CompetitionSpec::default(),
            grad_transform: GradTransformKind::None,
            mi_decay: 1.0,
            ti_kernel_size: 7,
            ti_sigma: 3.0,
            seed: 0,
        }
    }
}

impl AttackConfig {
    /// Validate ranges. An epsilon of zero is allowed (identity attack);
    /// otherwise the step size must fit inside the budget.
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config(format!("epsilon {} must be >= 0", self.epsilon)));
        }
        if !(self.step_size > 0.0) {
            return Err(Error::config(format!(
                "step_size {} must be > 0",
                self.step_size
            )));
        }
        if self.epsilon > 0.0 && self.step_size > self.epsilon {
            return Err(Error::config(format!(
                "step_size {} exceeds epsilon {}",
                self.step_size, self.epsilon
            )));
        }
        if self.iterations == 0 {
            return Err(Error::config("iterations must be >= 1"));
        }
        if self.lambda_reg < 0.0 {
            return Err(Error::config("lambda_reg must be >= 0"));
        }
        if !(self.thres_neg < 0.0 && 0.0 < self.thres_pos) {
            return Err(Error::config(format!(
                "need thres_neg < 0 < thres_pos, got {} and {}",
                self.thres_neg, self.thres_pos
            )));
        }
        if self.ti_kernel_size == 0 || self.ti_kernel_size % 2 == 0 {
            return Err(Error::config("ti_kernel_size must be odd and >= 1"));
        }
        if !(self.ti_sigma > 0.0) {
            return Err(Error::config("ti_sigma must be > 0"));
        }
        if self.mi_decay < 0.0 {
            return Err(Error::config("mi_decay must be >= 0"));
        }
        self.competition.validate()?;
        match self.method {
            AttackMethod::PataPlus => {
                if self.competition.source != CompetitionSource::ExternalImages {
                    return Err(Error::config(
                        "pata_plus regularizes against external_images; set competition.source accordingly",
                    ));
                }
            }
            AttackMethod::PataPlusPlus => {
                if self.competition.source != CompetitionSource::SelfPatches {
                    return Err(Error::config(
                        "pata_plus_plus regularizes against self_patches; set competition.source accordingly",
                    ));
                }
                if self.competition.count_per_iter != 1 {
                    return Err(Error::config(
                        "pata_plus_plus uses a single competition patch per iteration",
                    ));
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn from_json_str(json: &str) -> Result<Self> {
        let cfg: AttackConfig = serde_json::from_str(json)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&raw)
    }
}
