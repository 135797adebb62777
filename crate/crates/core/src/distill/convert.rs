use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::batch::{draw_conditions, forward_fixed_rows, gaussian};
use super::log::{LogRecord, LogSink, Phase};
use crate::autodiff::{adam_step, AdamState, Graph, OptimizerConfig, Tensor};
use crate::diffusion::{PredictionMode, Schedule};
use crate::error::{Error, Result};
use crate::eval::ToyDataset;
use crate::nets::{Condition, DenoiserNet};

const EVAL_BATCH: usize = 1024;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConversionReport {
    /// Conversion loss on a fixed evaluation batch before training.
    pub initial_loss: f64,
    /// The same loss after training.
    pub final_loss: f64,
    /// Training-batch loss per iteration.
    pub losses: Vec<f64>,
}

struct ConvBatch {
    x_t: Tensor,
    t: Vec<usize>,
    c: Vec<Condition>,
    target: Tensor,
}

/// `pred_to_x0(x_t, frozen(x_t), t)` row by row.
fn x0_targets(frozen: &DenoiserNet, x_t: &Tensor, t: &[usize], c: &[Condition], sch: &Schedule) -> Result<Tensor> {
    let eps = frozen.denoise(x_t, t, c)?;
    let mut out = x_t.clone();
    for (i, &ti) in t.iter().enumerate() {
        let ab = sch.alpha_bar(ti);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        for (o, &e) in out.row_mut(i).iter_mut().zip(eps.row(i)) {
            *o = (*o - b * e) / a;
        }
    }
    Ok(out)
}

fn conv_batch(
    frozen: &DenoiserNet,
    dataset: &ToyDataset,
    timesteps: &[usize],
    n: usize,
    rng: &mut ChaCha8Rng,
    sch: &Schedule,
) -> Result<ConvBatch> {
    let pts = dataset.sample(n, rng);
    let c = draw_conditions(&pts.labels, rng);
    let t: Vec<usize> = (0..n)
        .map(|_| match timesteps {
            [] => rng.random_range(0..=sch.timesteps()),
            set => set[rng.random_range(0..set.len())],
        })
        .collect();
    let eps = gaussian(n, pts.points.cols(), rng);
    let x_t = forward_fixed_rows(&pts.points, &eps, &t, sch)?;
    let target = x0_targets(frozen, &x_t, &t, &c, sch)?;
    Ok(ConvBatch { x_t, t, c, target })
}

fn eval_loss(online: &DenoiserNet, b: &ConvBatch) -> Result<f64> {
    let out = online.denoise(&b.x_t, &b.t, &b.c)?;
    let s: f64 = out
        .data()
        .iter()
        .zip(b.target.data())
        .map(|(p, q)| (p - q) * (p - q))
        .sum();
    Ok(s / out.rows() as f64)
}

/// Re-targets an ε-prediction network to predict `x0` directly.
///
/// A frozen copy supplies `pred_to_x0` targets; the online copy is relabeled
/// as x0-prediction and regressed onto them. `timesteps` restricts training
/// times; empty means uniform over `0..=T`. Losses are `mean_i |·|²`.
#[allow(clippy::too_many_arguments)]
pub fn convert_to_x0_prediction(
    net: &DenoiserNet,
    dataset: &ToyDataset,
    iterations: usize,
    batch_size: usize,
    opt: &OptimizerConfig,
    timesteps: &[usize],
    seed: u64,
    sch: &Schedule,
    stage: &str,
    sink: &mut dyn LogSink,
) -> Result<(DenoiserNet, ConversionReport)> {
    if net.mode() != PredictionMode::Epsilon {
        return Err(Error::Usage("conversion expects an epsilon-prediction network".into()));
    }
    if net.lora().is_some() {
        return Err(Error::Usage("merge adapters before conversion".into()));
    }
    if batch_size == 0 {
        return Err(Error::config("conversion.batch_size", "must be positive"));
    }
    opt.validate()?;
    let frozen = net.clone();
    let mut online = net.clone();
    online.relabel_x0();

    let mut eval_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0_4E47);
    let eval = conv_batch(&frozen, dataset, timesteps, EVAL_BATCH, &mut eval_rng, sch)?;
    let initial_loss = eval_loss(&online, &eval)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = AdamState::new(online.trainable_params());
    let mut losses = Vec::with_capacity(iterations);
    sink.record(LogRecord::PhaseStart {
        stage: stage.into(),
        phase: Phase::Conversion,
        iterations,
    })?;
    for it in 0..iterations {
        let b = conv_batch(&frozen, dataset, timesteps, batch_size, &mut rng, sch)?;
        let mut g = Graph::new();
        let bound = online.bind(&mut g, true);
        let x = g.constant(b.x_t);
        let out = online.forward(&mut g, &bound, x, &b.t, &b.c)?;
        let target = g.constant(b.target);
        let per_coord = g.mse(out, target)?;
        let loss = g.scale(per_coord, frozen.config().data_dim as f64)?;
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Training {
                stage: stage.into(),
                iteration: it,
                msg: format!("conversion loss is {value}"),
            });
        }
        let grads = bound.grads(&g, &g.backward(loss)?);
        adam_step(&mut online.trainable_params_mut(), &grads, &mut adam, opt)?;
        losses.push(value);
        sink.record(LogRecord::Iteration {
            stage: stage.into(),
            phase: Phase::Conversion,
            iteration: it,
            loss: Some(value),
            d_loss: None,
            g_loss: None,
            p_real: None,
            p_fake: None,
        })?;
    }
    let final_loss = eval_loss(&online, &eval)?;
    Ok((
        online,
        ConversionReport {
            initial_loss,
            final_loss,
            losses,
        },
    ))
}
