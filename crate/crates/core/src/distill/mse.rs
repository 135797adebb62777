use super::batch::{jump_node, DistillBatch};
use crate::autodiff::{adam_step, AdamState, Graph, OptimizerConfig};
use crate::diffusion::Schedule;
use crate::error::{Error, Result};
use crate::nets::DenoiserNet;

/// One regression update of the student towards the teacher's multi-step
/// target. Returns the pre-update loss `mean_i |x̂_i - x_i|²`.
pub fn mse_distill_step(
    student: &mut DenoiserNet,
    adam: &mut AdamState,
    opt: &OptimizerConfig,
    batch: &DistillBatch,
    sch: &Schedule,
) -> Result<f64> {
    let mut g = Graph::new();
    let bound = student.bind(&mut g, true);
    let x = g.constant(batch.x_t.clone());
    let u = student.forward(&mut g, &bound, x, &batch.t, &batch.c)?;
    let jump = jump_node(&mut g, x, u, &batch.t, &batch.jump_to, sch, student.mode())?;
    let target = g.constant(batch.target.clone());
    let per_coord = g.mse(jump, target)?;
    let loss = g.scale(per_coord, batch.x_t.cols() as f64)?;
    let value = g.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::Numeric(format!("distillation loss is {value}")));
    }
    let grads = bound.grads(&g, &g.backward(loss)?);
    adam_step(&mut student.trainable_params_mut(), &grads, adam, opt)?;
    Ok(value)
}
