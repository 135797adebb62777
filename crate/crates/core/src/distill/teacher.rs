use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::batch::{draw_conditions, forward_fixed_rows, gaussian};
use super::log::{LogRecord, LogSink, Phase};
use crate::autodiff::{adam_step, AdamState, Graph, OptimizerConfig, Tensor};
use crate::diffusion::{PredictionMode, Schedule};
use crate::error::{Error, Result};
use crate::eval::ToyDataset;
use crate::nets::{Condition, DenoiserConfig, DenoiserNet};

pub const TEACHER_TAG: &str = "teacher";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    /// Held-out batch size used for the before/after loss report.
    #[serde(default = "default_heldout")]
    pub heldout_size: usize,
}

fn default_iterations() -> usize {
    20_000
}
fn default_batch() -> usize {
    256
}
fn default_lr() -> f64 {
    1e-3
}
fn default_heldout() -> usize {
    2048
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            iterations: default_iterations(),
            batch_size: default_batch(),
            learning_rate: default_lr(),
            heldout_size: default_heldout(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherReport {
    pub initial_heldout_loss: f64,
    pub final_heldout_loss: f64,
}

struct DenoisingBatch {
    x_t: Tensor,
    t: Vec<usize>,
    c: Vec<Condition>,
    eps: Tensor,
}

fn denoising_batch(dataset: &ToyDataset, n: usize, rng: &mut ChaCha8Rng, sch: &Schedule) -> Result<DenoisingBatch> {
    let pts = dataset.sample(n, rng);
    let c = draw_conditions(&pts.labels, rng);
    let t: Vec<usize> = (0..n).map(|_| rng.random_range(1..=sch.timesteps())).collect();
    let eps = gaussian(n, pts.points.cols(), rng);
    let x_t = forward_fixed_rows(&pts.points, &eps, &t, sch)?;
    Ok(DenoisingBatch { x_t, t, c, eps })
}

fn denoising_loss(net: &DenoiserNet, b: &DenoisingBatch) -> Result<f64> {
    let pred = net.denoise(&b.x_t, &b.t, &b.c)?;
    let s: f64 = pred
        .data()
        .iter()
        .zip(b.eps.data())
        .map(|(p, e)| (p - e) * (p - e))
        .sum();
    Ok(s / pred.len() as f64)
}

/// Trains an ε-prediction network with the standard denoising objective.
///
/// Times are uniform on `1..=T`, inputs come from the forward process with the
/// terminal swap, and labels are dropped to the unconditional token with
/// probability 0.1.
pub fn train_teacher(
    dataset: &ToyDataset,
    net_config: DenoiserConfig,
    cfg: &TeacherConfig,
    seed: u64,
    sch: &Schedule,
    sink: &mut dyn LogSink,
) -> Result<(DenoiserNet, TeacherReport)> {
    if cfg.batch_size == 0 || cfg.heldout_size == 0 {
        return Err(Error::config("teacher.batch_size", "batch sizes must be positive"));
    }
    let opt = OptimizerConfig::standard(cfg.learning_rate);
    opt.validate()?;
    let mut net = DenoiserNet::init(net_config, PredictionMode::Epsilon, seed)?;
    let mut heldout_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0FF5);
    let heldout = denoising_batch(dataset, cfg.heldout_size, &mut heldout_rng, sch)?;
    let initial = denoising_loss(&net, &heldout)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = AdamState::new(net.trainable_params());
    sink.record(LogRecord::PhaseStart {
        stage: TEACHER_TAG.into(),
        phase: Phase::Teacher,
        iterations: cfg.iterations,
    })?;
    for it in 0..cfg.iterations {
        let b = denoising_batch(dataset, cfg.batch_size, &mut rng, sch)?;
        let mut g = Graph::new();
        let bound = net.bind(&mut g, true);
        let x = g.constant(b.x_t);
        let out = net.forward(&mut g, &bound, x, &b.t, &b.c)?;
        let target = g.constant(b.eps);
        let loss = g.mse(out, target)?;
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Training {
                stage: TEACHER_TAG.into(),
                iteration: it,
                msg: format!("loss is {value}"),
            });
        }
        let grads = bound.grads(&g, &g.backward(loss)?);
        adam_step(&mut net.trainable_params_mut(), &grads, &mut adam, &opt)?;
        sink.record(LogRecord::Iteration {
            stage: TEACHER_TAG.into(),
            phase: Phase::Teacher,
            iteration: it,
            loss: Some(value),
            d_loss: None,
            g_loss: None,
            p_real: None,
            p_fake: None,
        })?;
    }
    let report = TeacherReport {
        initial_heldout_loss: initial,
        final_heldout_loss: denoising_loss(&net, &heldout)?,
    };
    Ok((net, report))
}
