//! Teacher training and the staged distillation pipeline.
//!
//! A stage trains a student that covers `n = N_T / N_S` teacher steps in one
//! jump. The first stage regresses the guided teacher with MSE; later stages
//! train against a discriminator, first conditioned on the starting point and
//! then without it.

mod adversarial;
mod batch;
mod convert;
mod log;
mod mse;
mod pipeline;
mod teacher;

use serde::{Deserialize, Serialize};

use crate::autodiff::OptimizerConfig;
use crate::diffusion::TimeGrid;
use crate::error::{Error, Result};
use crate::nets::GuidanceConfig;

pub use adversarial::{
    adversarial_step, d_loss_value, draw_disc_noise, g_loss_value, noise_disc_inputs, AdversarialLosses, DiscNoise,
};
pub use batch::{forward_fixed_rows, make_batch, student_jump, teacher_multistep_target, walk_to, DistillBatch};
pub use convert::{convert_to_x0_prediction, ConversionReport};
pub use log::{JsonLinesSink, LogRecord, LogSink, Phase};
pub use mse::mse_distill_step;
pub use pipeline::{
    flow_probe_noises, run_levels_from, run_pipeline, ConversionConfig, LevelConfig, LevelObjective, PipelineOutput,
    ProbeConfig, StageArtifact, DEFAULT_FULL_LR, DEFAULT_LORA_LR, DEFAULT_MSE_LR,
};
pub use teacher::{train_teacher, TeacherConfig, TeacherReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    Mse,
    AdversarialConditional,
    AdversarialUnconditional,
}

impl Objective {
    pub fn is_adversarial(self) -> bool {
        !matches!(self, Objective::Mse)
    }
}

/// Discriminator-input noising timesteps with integer weights.
///
/// `late_weights`, when set, replaces `weights` from `switch_fraction` of the
/// phase's iterations onwards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscNoiseConfig {
    pub timesteps: Vec<usize>,
    pub weights: Vec<u32>,
    #[serde(default)]
    pub late_weights: Option<Vec<u32>>,
    #[serde(default = "default_switch_fraction")]
    pub switch_fraction: f64,
}

fn default_switch_fraction() -> f64 {
    0.5
}

impl DiscNoiseConfig {
    pub fn standard() -> Self {
        Self {
            timesteps: vec![10, 250, 500, 750],
            weights: vec![1, 1, 1, 1],
            late_weights: Some(vec![5, 1, 1, 1]),
            switch_fraction: 0.5,
        }
    }

    /// Weights in force at `iteration` of a phase lasting `iterations`.
    pub fn weights_at(&self, iteration: usize, iterations: usize) -> &[u32] {
        match &self.late_weights {
            Some(late) if iteration as f64 >= self.switch_fraction * iterations as f64 => late,
            _ => &self.weights,
        }
    }

    pub fn validate(&self, key: &str, timesteps: usize) -> Result<()> {
        if self.timesteps.is_empty() {
            return Err(Error::config(key, "noise timestep set is empty"));
        }
        if let Some(&t) = self.timesteps.iter().find(|&&t| t > timesteps) {
            return Err(Error::config(key, format!("noise timestep {t} exceeds {timesteps}")));
        }
        let lists = std::iter::once(&self.weights).chain(self.late_weights.as_ref());
        for w in lists {
            if w.len() != self.timesteps.len() {
                return Err(Error::config(key, "one weight per noise timestep is required"));
            }
            if w.contains(&0) {
                return Err(Error::config(key, "noise weights must be positive integers"));
            }
        }
        if !(0.0..=1.0).contains(&self.switch_fraction) {
            return Err(Error::config(key, "switch_fraction must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// One training phase of one distillation level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    /// Name used in logs and errors.
    pub tag: String,
    pub teacher_steps: usize,
    pub student_steps: usize,
    pub objective: Objective,
    /// Guidance applied to the teacher targets (MSE phases only).
    pub guidance: Option<GuidanceConfig>,
    /// Train low-rank adapters instead of the full network.
    pub lora_rank: Option<usize>,
    /// Start times the student is trained on, in `[1, T]`. Coarse students may
    /// train on extra points between their grid times.
    pub student_timesteps: Vec<usize>,
    pub disc_noise: Option<DiscNoiseConfig>,
    pub student_lr: f64,
    pub disc_lr: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl StageConfig {
    /// Teacher sub-steps per student step.
    pub fn substeps(&self) -> usize {
        self.teacher_steps / self.student_steps
    }

    /// Teacher step size `T / N_T`.
    pub fn teacher_spacing(&self, timesteps: usize) -> f64 {
        timesteps as f64 / self.teacher_steps as f64
    }

    pub fn student_optimizer(&self) -> OptimizerConfig {
        match self.objective {
            Objective::Mse => OptimizerConfig::standard(self.student_lr),
            _ => OptimizerConfig::adversarial(self.student_lr),
        }
    }

    pub fn disc_optimizer(&self) -> OptimizerConfig {
        OptimizerConfig::adversarial(self.disc_lr)
    }

    pub fn validate(&self, timesteps: usize) -> Result<()> {
        let key = |field: &str| format!("stage `{}`.{field}", self.tag);
        if self.student_steps == 0 || self.teacher_steps == 0 {
            return Err(Error::config(key("student_steps"), "step counts must be positive"));
        }
        if !self.teacher_steps.is_multiple_of(self.student_steps) {
            return Err(Error::config(
                key("student_steps"),
                format!(
                    "teacher steps {} not divisible by student steps {}",
                    self.teacher_steps, self.student_steps
                ),
            ));
        }
        if self.teacher_steps > timesteps {
            return Err(Error::config(key("teacher_steps"), "more steps than timesteps"));
        }
        if self.batch_size == 0 {
            return Err(Error::config(key("batch_size"), "must be positive"));
        }
        for (name, lr) in [("student_lr", self.student_lr), ("disc_lr", self.disc_lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::config(key(name), "learning rate must be positive"));
            }
        }
        if self.lora_rank == Some(0) {
            return Err(Error::config(key("lora_rank"), "must be positive"));
        }
        if self.student_timesteps.is_empty() {
            return Err(Error::config(key("student_timesteps"), "must not be empty"));
        }
        if let Some(&t) = self.student_timesteps.iter().find(|&&t| t == 0 || t > timesteps) {
            return Err(Error::config(
                key("student_timesteps"),
                format!("start time {t} outside [1, {timesteps}]"),
            ));
        }
        match self.objective {
            Objective::Mse => {
                if self.disc_noise.is_some() {
                    return Err(Error::config(key("disc_noise"), "MSE phases have no discriminator"));
                }
            }
            _ => {
                if self.guidance.is_some() {
                    return Err(Error::config(
                        key("guidance"),
                        "guidance is only applied in the MSE phase",
                    ));
                }
                if let Some(n) = &self.disc_noise {
                    n.validate(&key("disc_noise"), timesteps)?;
                }
            }
        }
        Ok(())
    }
}

/// Nonzero points of the `steps`-grid, ascending.
pub fn full_grid_timesteps(steps: usize, timesteps: usize) -> Result<Vec<usize>> {
    let grid = TimeGrid::new(steps, timesteps)?;
    let mut v: Vec<usize> = grid.times().iter().copied().filter(|&t| t > 0).collect();
    v.sort_unstable();
    Ok(v)
}
