//! Forward noising, DDIM reverse sampling and denoising pretraining.

pub mod data;
pub mod pretrain;
pub mod sampler;
pub mod schedule;

pub use data::{GaussianMixture, MixtureConfig};
pub use pretrain::{pretrain, PretrainConfig, PretrainOutput};
pub use sampler::{
    complete_from, ddim_step, forward_noise, log_prob_step, predict_x0, sample_trajectory,
    standard_normal, GaussianStepDistribution, Trajectory,
};
pub use schedule::{BetaSchedule, InferenceGrid, NoiseSchedule, ScheduleConfig, StepCoefficients};
