//! Constrained PGD attacks on prompt-guided segmentation models: the
//! decoder-space clip-MSE attack, the prompt-agnostic encoder-feature
//! attack, and its feature-dominance-regularized variants, plus the MI/TI
//! gradient transforms.

mod config;
mod objectives;
mod ops;
mod runner;
mod sampler;

pub use config::{
    AttackConfig, AttackMethod, CompetitionSource, CompetitionSpec, FeatureLossKind,
    GradTransformKind, MixMode,
};
pub use objectives::{ClipMseObjective, FeatureObjective};
pub use ops::{
    clip_mse_loss, clip_targets, dominance_reg_loss, feature_loss, feature_loss_with_grad,
    mix_images, pgd_step, project, transform_gradient, TransformState,
};
pub use runner::{run_attack, AttackResult, IterationRecord};
pub use sampler::{sample_competition, CompetitionSampler};
