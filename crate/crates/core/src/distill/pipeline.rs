use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adversarial::{adversarial_step, draw_disc_noise};
use super::batch::{draw_conditions, forward_fixed_rows, gaussian, jump_targets, make_batch, student_jump, walk_to};
use super::convert::{convert_to_x0_prediction, ConversionReport};
use super::log::{LogRecord, LogSink, Phase};
use super::mse::mse_distill_step;
use super::teacher::{train_teacher, TeacherReport, TEACHER_TAG};
use super::{full_grid_timesteps, DiscNoiseConfig, Objective, StageConfig};
use crate::autodiff::{AdamState, OptimizerConfig, Tensor};
use crate::checkpoint::{save_checkpoint, CheckpointMeta};
use crate::config::PipelineConfig;
use crate::diffusion::{Schedule, TimeGrid};
use crate::error::{Error, Result};
use crate::eval::{flow_preservation_error, FlowSampler, ToyDataset};
use crate::nets::{
    Condition, DenoiserNet, Discriminator, DiscriminatorForm, GuidanceConfig, DEFAULT_GUIDANCE_SCALE,
    DEFAULT_HEAD_WIDTH, DEFAULT_LORA_RANK,
};

pub const DEFAULT_MSE_LR: f64 = 1e-3;
pub const DEFAULT_LORA_LR: f64 = 1e-3;
pub const DEFAULT_FULL_LR: f64 = 1e-5;
/// Student step count whose network serves as the skip-level reference.
pub const DEFAULT_SKIP_LEVEL: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LevelObjective {
    Mse,
    /// Conditional phase with adapters, unconditional phase with adapters,
    /// merge, then unconditional training of the whole network.
    Adversarial,
}

fn default_objective() -> LevelObjective {
    LevelObjective::Adversarial
}
fn default_mse_iterations() -> usize {
    5000
}
fn default_adv_iterations() -> usize {
    3000
}
fn default_batch() -> usize {
    256
}
fn default_lora_rank() -> usize {
    DEFAULT_LORA_RANK
}
fn default_head_width() -> usize {
    DEFAULT_HEAD_WIDTH
}

/// One distillation level `N_T -> N_S` as written in a pipeline config.
///
/// Unset options resolve from the step counts: students with at most two
/// steps train on the quarter points of `[0, T]`, re-noise discriminator
/// inputs that land on `t = 0`, and take their unconditional "real" samples
/// from the 8-step student; the 1-step student is converted to
/// x0-prediction first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelConfig {
    pub teacher_steps: usize,
    pub student_steps: usize,
    #[serde(default = "default_objective")]
    pub objective: LevelObjective,
    /// Teacher guidance scale, MSE levels only (defaults to 6; 1 disables it).
    #[serde(default)]
    pub guidance_scale: Option<f64>,
    #[serde(default = "default_mse_iterations")]
    pub iterations: usize,
    #[serde(default = "default_adv_iterations")]
    pub conditional_iterations: usize,
    #[serde(default = "default_adv_iterations")]
    pub unconditional_iterations: usize,
    #[serde(default = "default_adv_iterations")]
    pub full_iterations: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub learning_rate: Option<f64>,
    #[serde(default)]
    pub lora_learning_rate: Option<f64>,
    #[serde(default)]
    pub full_learning_rate: Option<f64>,
    #[serde(default = "default_lora_rank")]
    pub lora_rank: usize,
    #[serde(default = "default_head_width")]
    pub head_width: usize,
    #[serde(default)]
    pub student_timesteps: Option<Vec<usize>>,
    #[serde(default)]
    pub disc_noise: Option<DiscNoiseConfig>,
    #[serde(default)]
    pub skip_level_steps: Option<usize>,
    #[serde(default)]
    pub convert_to_x0: Option<bool>,
}

impl LevelConfig {
    pub fn new(teacher_steps: usize, student_steps: usize, objective: LevelObjective) -> Self {
        Self {
            teacher_steps,
            student_steps,
            objective,
            guidance_scale: None,
            iterations: default_mse_iterations(),
            conditional_iterations: default_adv_iterations(),
            unconditional_iterations: default_adv_iterations(),
            full_iterations: default_adv_iterations(),
            batch_size: default_batch(),
            learning_rate: None,
            lora_learning_rate: None,
            full_learning_rate: None,
            lora_rank: default_lora_rank(),
            head_width: default_head_width(),
            student_timesteps: None,
            disc_noise: None,
            skip_level_steps: None,
            convert_to_x0: None,
        }
    }

    pub fn tag(&self) -> String {
        self.student_steps.to_string()
    }

    fn coarse(&self) -> bool {
        self.student_steps <= 2
    }

    pub fn resolved_timesteps(&self, timesteps: usize) -> Result<Vec<usize>> {
        match &self.student_timesteps {
            Some(v) => Ok(v.clone()),
            None if self.coarse() => Ok(quarter_points(timesteps)),
            None => full_grid_timesteps(self.student_steps, timesteps),
        }
    }

    pub fn resolved_disc_noise(&self, timesteps: usize) -> Option<DiscNoiseConfig> {
        match &self.disc_noise {
            Some(n) => Some(n.clone()),
            None if self.coarse() => {
                let mut n = DiscNoiseConfig::standard();
                for t in &mut n.timesteps {
                    *t = ((*t * timesteps) as f64 / 1000.0).round().max(1.0) as usize;
                }
                Some(n)
            }
            None => None,
        }
    }

    /// Student steps of the network supplying unconditional "real" samples.
    pub fn resolved_skip_level(&self, available: &[usize]) -> usize {
        match self.skip_level_steps {
            Some(s) => s,
            None if self.coarse() && available.contains(&DEFAULT_SKIP_LEVEL) => DEFAULT_SKIP_LEVEL,
            None => self.teacher_steps,
        }
    }

    pub fn resolved_convert(&self) -> bool {
        self.convert_to_x0.unwrap_or(self.student_steps == 1)
    }

    /// Phase settings in execution order.
    pub fn phases(&self, timesteps: usize, seed: u64) -> Result<Vec<(Phase, StageConfig)>> {
        let base = StageConfig {
            tag: self.tag(),
            teacher_steps: self.teacher_steps,
            student_steps: self.student_steps,
            objective: Objective::Mse,
            guidance: None,
            lora_rank: None,
            student_timesteps: self.resolved_timesteps(timesteps)?,
            disc_noise: None,
            student_lr: 0.0,
            disc_lr: 0.0,
            iterations: 0,
            batch_size: self.batch_size,
            seed,
        };
        let phases = match self.objective {
            LevelObjective::Mse => {
                let lr = self.learning_rate.unwrap_or(DEFAULT_MSE_LR);
                let scale = self.guidance_scale.unwrap_or(DEFAULT_GUIDANCE_SCALE);
                vec![(
                    Phase::Mse,
                    StageConfig {
                        guidance: (scale != 1.0).then_some(GuidanceConfig { scale }),
                        student_lr: lr,
                        disc_lr: lr,
                        iterations: self.iterations,
                        ..base
                    },
                )]
            }
            LevelObjective::Adversarial => {
                let lora_lr = self.lora_learning_rate.unwrap_or(DEFAULT_LORA_LR);
                let full_lr = self.full_learning_rate.unwrap_or(DEFAULT_FULL_LR);
                let noise = self.resolved_disc_noise(timesteps);
                let adv = |objective, lora, lr, iterations, salt: u64| StageConfig {
                    objective,
                    lora_rank: lora,
                    disc_noise: noise.clone(),
                    student_lr: lr,
                    disc_lr: lr,
                    iterations,
                    seed: derive_seed(seed, salt),
                    ..base.clone()
                };
                vec![
                    (
                        Phase::Conditional,
                        adv(
                            Objective::AdversarialConditional,
                            Some(self.lora_rank),
                            lora_lr,
                            self.conditional_iterations,
                            1,
                        ),
                    ),
                    (
                        Phase::Unconditional,
                        adv(
                            Objective::AdversarialUnconditional,
                            Some(self.lora_rank),
                            lora_lr,
                            self.unconditional_iterations,
                            2,
                        ),
                    ),
                    (
                        Phase::Full,
                        adv(
                            Objective::AdversarialUnconditional,
                            None,
                            full_lr,
                            self.full_iterations,
                            3,
                        ),
                    ),
                ]
            }
        };
        Ok(phases)
    }

    pub fn validate(&self, key: &str, timesteps: usize) -> Result<()> {
        if self.objective == LevelObjective::Adversarial && self.guidance_scale.is_some() {
            return Err(Error::config(
                key,
                format!("stage {}: guidance is only used by MSE stages", self.describe()),
            ));
        }
        if self.student_steps == 0 || !self.teacher_steps.is_multiple_of(self.student_steps) {
            return Err(Error::config(
                key,
                format!(
                    "stage {}: teacher steps {} not divisible by student steps {}",
                    self.describe(),
                    self.teacher_steps,
                    self.student_steps
                ),
            ));
        }
        if self.student_steps >= self.teacher_steps {
            return Err(Error::config(
                key,
                format!(
                    "stage {}: student must take fewer steps than its teacher",
                    self.describe()
                ),
            ));
        }
        if self.head_width == 0 {
            return Err(Error::config(format!("{key}.head_width"), "must be positive"));
        }
        for (_, phase) in self.phases(timesteps, 0)? {
            phase.validate(timesteps).map_err(|e| match e {
                Error::Config { key: k, msg } => Error::config(format!("{key} ({k})"), msg),
                other => other,
            })?;
        }
        Ok(())
    }

    fn describe(&self) -> String {
        format!("{}->{}", self.teacher_steps, self.student_steps)
    }
}

/// `{T/4, T/2, 3T/4, T}`.
fn quarter_points(timesteps: usize) -> Vec<usize> {
    (1..=4)
        .map(|k| ((k * timesteps) as f64 / 4.0).round() as usize)
        .collect()
}

fn default_conv_iterations() -> usize {
    2000
}
fn default_conv_lr() -> f64 {
    1e-4
}

/// Settings for the switch to x0-prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConversionConfig {
    #[serde(default = "default_conv_iterations")]
    pub iterations: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_conv_lr")]
    pub learning_rate: f64,
    /// Training times; empty means uniform over `0..=T`.
    #[serde(default)]
    pub timesteps: Vec<usize>,
}

impl Default for ConversionConfig {
    fn default() -> Self {
        Self {
            iterations: default_conv_iterations(),
            batch_size: default_batch(),
            learning_rate: default_conv_lr(),
            timesteps: Vec::new(),
        }
    }
}

fn default_probe_size() -> usize {
    256
}
fn default_probe_every() -> usize {
    100
}

/// Fixed probe sets evaluated during training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    #[serde(default = "default_probe_size")]
    pub size: usize,
    /// Jump-error probe period in iterations; 0 disables periodic probes.
    #[serde(default = "default_probe_every")]
    pub every: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            size: default_probe_size(),
            every: default_probe_every(),
        }
    }
}

/// Network produced by one pipeline stage.
#[derive(Clone, Debug)]
pub struct StageArtifact {
    pub tag: String,
    /// Sampling steps the network is meant for.
    pub steps: usize,
    pub net: DenoiserNet,
    pub meta: CheckpointMeta,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub artifacts: Vec<StageArtifact>,
    pub teacher_report: Option<TeacherReport>,
    pub conversion_report: Option<ConversionReport>,
}

impl PipelineOutput {
    pub fn artifact(&self, tag: &str) -> Option<&StageArtifact> {
        self.artifacts.iter().find(|a| a.tag == tag)
    }
}

/// Mixes a base seed with a salt (splitmix64 finalizer).
pub(crate) fn derive_seed(base: u64, salt: u64) -> u64 {
    let mut z = base ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Shared noises and labels for trajectory comparisons.
pub fn flow_probe_noises(dataset: &ToyDataset, n: usize, seed: u64) -> (Tensor, Vec<Condition>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = dataset.sample(n, &mut rng);
    let c = pts.labels.iter().map(|&l| Condition::Class(l)).collect();
    (gaussian(n, 2, &mut rng), c)
}

struct JumpProbe {
    x_t: Tensor,
    t: Vec<usize>,
    c: Vec<Condition>,
    jump_to: Vec<usize>,
    target: Tensor,
}

impl JumpProbe {
    fn error(&self, student: &DenoiserNet, sch: &Schedule) -> Result<f64> {
        let x = student_jump(student, &self.x_t, &self.t, &self.c, &self.jump_to, sch)?;
        let mut total = 0.0;
        for i in 0..x.rows() {
            let d: f64 = x
                .row(i)
                .iter()
                .zip(self.target.row(i))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            total += d.sqrt();
        }
        Ok(total / x.rows() as f64)
    }
}

struct Runner<'a> {
    dataset: &'a ToyDataset,
    cfg: &'a PipelineConfig,
    sch: Schedule,
    sink: &'a mut dyn LogSink,
    out_dir: Option<&'a Path>,
}

fn training_error(stage: &StageConfig, iteration: usize) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::Numeric(msg) => Error::Training {
            stage: stage.tag.clone(),
            iteration,
            msg,
        },
        other => other,
    }
}

impl Runner<'_> {
    fn emit(&mut self, rec: LogRecord) -> Result<()> {
        self.sink.record(rec)
    }

    fn meta(&self, tag: &str, trained: Vec<usize>) -> CheckpointMeta {
        CheckpointMeta {
            stage: tag.into(),
            seed: self.cfg.seed,
            schedule: self.sch.params(),
            dataset: self.dataset.kind().as_str().into(),
            trained_timesteps: trained,
        }
    }

    fn finish_stage(
        &mut self,
        tag: &str,
        steps: usize,
        net: &DenoiserNet,
        trained: Vec<usize>,
    ) -> Result<StageArtifact> {
        let meta = self.meta(tag, trained);
        let checkpoint = match self.out_dir {
            Some(dir) => {
                let path = dir.join(format!("stage-{tag}.ckpt"));
                save_checkpoint(net, &meta, &path)?;
                self.emit(LogRecord::Checkpoint {
                    stage: tag.into(),
                    path: path.display().to_string(),
                })?;
                Some(path)
            }
            None => None,
        };
        self.emit(LogRecord::StageEnd { stage: tag.into() })?;
        Ok(StageArtifact {
            tag: tag.into(),
            steps,
            net: net.clone(),
            meta,
            checkpoint,
        })
    }

    fn jump_probe(
        &self,
        stage: &StageConfig,
        reference: &DenoiserNet,
        reference_steps: usize,
        seed: u64,
    ) -> Result<JumpProbe> {
        let n = self.cfg.probes.size;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = self.dataset.sample(n, &mut rng);
        let c = draw_conditions(&pts.labels, &mut rng);
        let t: Vec<usize> = (0..n)
            .map(|i| stage.student_timesteps[i % stage.student_timesteps.len()])
            .collect();
        let eps = gaussian(n, 2, &mut rng);
        let x_t = forward_fixed_rows(&pts.points, &eps, &t, &self.sch)?;
        let jump_to = jump_targets(&t, stage.substeps(), stage.teacher_spacing(self.sch.timesteps()));
        let spacing = self.sch.timesteps() as f64 / reference_steps as f64;
        let target = walk_to(
            reference,
            &x_t,
            &t,
            &jump_to,
            spacing,
            &c,
            stage.guidance.as_ref(),
            &self.sch,
        )?;
        Ok(JumpProbe {
            x_t,
            t,
            c,
            jump_to,
            target,
        })
    }

    fn flow_error(&self, stage: &StageConfig, student: &DenoiserNet, teacher: &DenoiserNet) -> Result<f64> {
        let (noise, c) = flow_probe_noises(self.dataset, self.cfg.probes.size, derive_seed(self.cfg.seed, 77));
        let sgrid = TimeGrid::new(stage.student_steps, self.sch.timesteps())?;
        let tgrid = TimeGrid::new(stage.teacher_steps, self.sch.timesteps())?;
        flow_preservation_error(
            &FlowSampler {
                net: student,
                grid: &sgrid,
                guidance: None,
            },
            &FlowSampler {
                net: teacher,
                grid: &tgrid,
                guidance: stage.guidance.as_ref(),
            },
            &noise,
            &c,
            &self.sch,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn train_phase(
        &mut self,
        phase: Phase,
        stage: &StageConfig,
        student: &mut DenoiserNet,
        teacher: &DenoiserNet,
        reference: &DenoiserNet,
        reference_steps: usize,
        disc: Option<&mut (Discriminator, AdamState)>,
    ) -> Result<()> {
        stage.validate(self.sch.timesteps())?;
        let tag = stage.tag.clone();
        self.emit(LogRecord::PhaseStart {
            stage: tag.clone(),
            phase,
            iterations: stage.iterations,
        })?;
        let flow_tracked = matches!(phase, Phase::Mse | Phase::Conditional);
        if flow_tracked {
            let error = self.flow_error(stage, student, teacher)?;
            self.emit(LogRecord::FlowProbe {
                stage: tag.clone(),
                phase,
                iteration: 0,
                error,
            })?;
        }
        let probe = self.jump_probe(stage, reference, reference_steps, derive_seed(stage.seed, 99))?;
        let every = self.cfg.probes.every;
        let s_opt = stage.student_optimizer();
        let d_opt = stage.disc_optimizer();
        let mut s_adam = AdamState::new(student.trainable_params());
        let mut rng = ChaCha8Rng::seed_from_u64(stage.seed);
        let mut disc = disc;
        for it in 0..stage.iterations {
            if every > 0 && it % every == 0 {
                let jump_error = probe.error(student, &self.sch)?;
                self.emit(LogRecord::Probe {
                    stage: tag.clone(),
                    phase,
                    iteration: it,
                    jump_error,
                })?;
            }
            let batch = make_batch(self.dataset, stage, reference, reference_steps, &mut rng, &self.sch)?;
            let rec = match (stage.objective, disc.as_deref_mut()) {
                (Objective::Mse, _) => {
                    let loss = mse_distill_step(student, &mut s_adam, &s_opt, &batch, &self.sch)
                        .map_err(training_error(stage, it))?;
                    LogRecord::Iteration {
                        stage: tag.clone(),
                        phase,
                        iteration: it,
                        loss: Some(loss),
                        d_loss: None,
                        g_loss: None,
                        p_real: None,
                        p_fake: None,
                    }
                }
                (_, Some((d, d_adam))) => {
                    let noise = match &stage.disc_noise {
                        Some(n) => Some(draw_disc_noise(
                            &batch.jump_to,
                            &n.timesteps,
                            n.weights_at(it, stage.iterations),
                            (stage.objective == Objective::AdversarialConditional).then_some(&batch.t[..]),
                            batch.x_t.cols(),
                            &mut rng,
                        )?),
                        None => None,
                    };
                    let l = adversarial_step(
                        student,
                        &mut s_adam,
                        &s_opt,
                        d,
                        d_adam,
                        &d_opt,
                        &batch,
                        noise.as_ref(),
                        &self.sch,
                    )
                    .map_err(training_error(stage, it))?;
                    LogRecord::Iteration {
                        stage: tag.clone(),
                        phase,
                        iteration: it,
                        loss: None,
                        d_loss: Some(l.d_loss),
                        g_loss: Some(l.g_loss),
                        p_real: Some(l.p_real),
                        p_fake: Some(l.p_fake),
                    }
                }
                (_, None) => {
                    return Err(Error::Usage(format!(
                        "stage `{tag}`: adversarial phase without a discriminator"
                    )))
                }
            };
            self.emit(rec)?;
        }
        let jump_error = probe.error(student, &self.sch)?;
        self.emit(LogRecord::Probe {
            stage: tag.clone(),
            phase,
            iteration: stage.iterations,
            jump_error,
        })?;
        if flow_tracked {
            let error = self.flow_error(stage, student, teacher)?;
            self.emit(LogRecord::FlowProbe {
                stage: tag,
                phase,
                iteration: stage.iterations,
                error,
            })?;
        }
        Ok(())
    }

    fn new_disc(
        &mut self,
        tag: &str,
        phase: Phase,
        teacher: &DenoiserNet,
        form: DiscriminatorForm,
        head_width: usize,
        seed: u64,
    ) -> Result<(Discriminator, AdamState)> {
        let d = Discriminator::init_from(teacher, form, head_width, seed)?;
        let adam = AdamState::new(d.params());
        self.emit(LogRecord::DiscriminatorInit {
            stage: tag.into(),
            phase,
            form,
        })?;
        Ok((d, adam))
    }

    /// Runs `levels` starting from `start`, a network sampled with `start_steps`.
    fn run_levels(
        &mut self,
        start: DenoiserNet,
        start_steps: usize,
        levels: &[LevelConfig],
    ) -> Result<(Vec<StageArtifact>, Option<ConversionReport>)> {
        let t_max = self.sch.timesteps();
        let mut students: BTreeMap<usize, DenoiserNet> = BTreeMap::new();
        students.insert(start_steps, start.clone());
        let mut current = start;
        let mut artifacts = Vec::new();
        let mut conversion = None;
        for (li, level) in levels.iter().enumerate() {
            let tag = level.tag();
            let level_seed = derive_seed(self.cfg.seed, 1000 + li as u64);
            self.emit(LogRecord::StageStart {
                stage: tag.clone(),
                teacher_steps: level.teacher_steps,
                student_steps: level.student_steps,
            })?;
            let teacher = current.clone();
            let mut student = current.clone();
            if level.resolved_convert() {
                let conv = &self.cfg.conversion;
                let opt = OptimizerConfig::standard(conv.learning_rate);
                let (converted, report) = convert_to_x0_prediction(
                    &student,
                    self.dataset,
                    conv.iterations,
                    conv.batch_size,
                    &opt,
                    &conv.timesteps,
                    derive_seed(level_seed, 50),
                    &self.sch,
                    &tag,
                    self.sink,
                )?;
                self.emit(LogRecord::X0Conversion {
                    stage: tag.clone(),
                    iterations: conv.iterations,
                    final_loss: report.final_loss,
                })?;
                student = converted;
                conversion = Some(report);
            }
            let phases = level.phases(t_max, level_seed)?;
            match level.objective {
                LevelObjective::Mse => {
                    let (phase, stage) = &phases[0];
                    self.train_phase(
                        *phase,
                        stage,
                        &mut student,
                        &teacher,
                        &teacher,
                        level.teacher_steps,
                        None,
                    )?;
                }
                LevelObjective::Adversarial => {
                    let available: Vec<usize> = students.keys().copied().collect();
                    let skip = level.resolved_skip_level(&available);
                    let skip_net = students
                        .get(&skip)
                        .ok_or_else(|| {
                            Error::config(
                                format!("stage {tag}.skip_level_steps"),
                                format!("no {skip}-step network precedes this stage"),
                            )
                        })?
                        .clone();
                    student.attach_lora(level.lora_rank, derive_seed(level_seed, 60))?;
                    self.emit(LogRecord::LoraAttach {
                        stage: tag.clone(),
                        rank: level.lora_rank,
                    })?;

                    let (phase, stage) = &phases[0];
                    let mut d = self.new_disc(
                        &tag,
                        *phase,
                        &teacher,
                        DiscriminatorForm::Conditional,
                        level.head_width,
                        derive_seed(level_seed, 70),
                    )?;
                    self.train_phase(
                        *phase,
                        stage,
                        &mut student,
                        &teacher,
                        &teacher,
                        level.teacher_steps,
                        Some(&mut d),
                    )?;

                    let (phase, stage) = &phases[1];
                    let mut d = self.new_disc(
                        &tag,
                        *phase,
                        &teacher,
                        DiscriminatorForm::Unconditional,
                        level.head_width,
                        derive_seed(level_seed, 71),
                    )?;
                    self.train_phase(*phase, stage, &mut student, &teacher, &skip_net, skip, Some(&mut d))?;

                    student.merge_lora()?;
                    self.emit(LogRecord::LoraMerge { stage: tag.clone() })?;

                    let (phase, stage) = &phases[2];
                    self.train_phase(*phase, stage, &mut student, &teacher, &skip_net, skip, Some(&mut d))?;
                }
            }
            let trained = level.resolved_timesteps(t_max)?;
            artifacts.push(self.finish_stage(&tag, level.student_steps, &student, trained)?);
            students.insert(level.student_steps, student.clone());
            current = student;
        }
        Ok((artifacts, conversion))
    }
}

/// Trains the teacher and every configured stage, in order.
///
/// Checkpoints go to `out_dir` when given. Any failure aborts with the stage
/// name and iteration.
pub fn run_pipeline(
    dataset: &ToyDataset,
    cfg: &PipelineConfig,
    sink: &mut dyn LogSink,
    out_dir: Option<&Path>,
) -> Result<PipelineOutput> {
    cfg.validate()?;
    let mut runner = Runner {
        dataset,
        cfg,
        sch: Schedule::new(cfg.schedule)?,
        sink,
        out_dir,
    };
    runner.emit(LogRecord::StageStart {
        stage: TEACHER_TAG.into(),
        teacher_steps: 0,
        student_steps: cfg.teacher_steps(),
    })?;
    let (teacher, report) = train_teacher(
        dataset,
        cfg.denoiser_config(dataset),
        &cfg.teacher,
        derive_seed(cfg.seed, 1),
        &runner.sch,
        runner.sink,
    )?;
    let mut artifacts = vec![runner.finish_stage(TEACHER_TAG, cfg.teacher_steps(), &teacher, Vec::new())?];
    let (rest, conversion) = runner.run_levels(teacher, cfg.teacher_steps(), &cfg.stages)?;
    artifacts.extend(rest);
    Ok(PipelineOutput {
        artifacts,
        teacher_report: Some(report),
        conversion_report: conversion,
    })
}

/// Runs `levels` from an existing network instead of training a teacher.
///
/// `cfg` supplies the schedule, seeds, conversion and probe settings.
pub fn run_levels_from(
    dataset: &ToyDataset,
    cfg: &PipelineConfig,
    start: DenoiserNet,
    start_steps: usize,
    levels: &[LevelConfig],
    sink: &mut dyn LogSink,
    out_dir: Option<&Path>,
) -> Result<PipelineOutput> {
    let sch = Schedule::new(cfg.schedule)?;
    crate::config::validate_levels(levels, start_steps, sch.timesteps())?;
    let mut runner = Runner {
        dataset,
        cfg,
        sch,
        sink,
        out_dir,
    };
    let (artifacts, conversion) = runner.run_levels(start, start_steps, levels)?;
    Ok(PipelineOutput {
        artifacts,
        teacher_report: None,
        conversion_report: conversion,
    })
}
