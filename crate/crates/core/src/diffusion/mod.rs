//! Discrete diffusion schedule, forward process, prediction conversions, the
//! move operator and deterministic samplers.

pub mod analytic;
mod ops;
mod sampler;
mod schedule;

pub use ops::{
    forward_diffuse, forward_fixed, move_coefficients, move_sample, pred_to_eps, pred_to_x0, split_prediction,
    step_back, PredictionMode,
};
pub use sampler::{
    guided_prediction, guided_prediction_rows, sample_ode, sdedit, Denoiser, Trajectory, TrajectoryState,
};
pub use schedule::{Schedule, ScheduleParams, TimeGrid, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_TIMESTEPS};
