//! Generative models of the behavior policy.

mod gaussian;
mod schedule;
mod score_model;

pub use gaussian::{
    train_gaussian, GaussianBehavior, GaussianConfig, GaussianMeta, ACTION_CLIP, LOG_STD_MAX, LOG_STD_MIN,
};
pub use schedule::{NoiseSchedule, ScheduleCoeffs};
pub(crate) use score_model::repeat_rows;
pub use score_model::{
    denoising_loss, denoising_objective, probability_flow, time_embedding, train_behavior, train_score_model,
    BehaviorTrainConfig, NoisePredictor, ScoreModel, ScoreModelConfig, ScoreModelMeta, SolverConfig,
};
