use super::ops::{forward_fixed, move_sample, PredictionMode};
use super::schedule::{Schedule, TimeGrid};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::nets::{cfg_combine, Condition, GuidanceConfig};

/// Anything that maps `(x_t, t, c)` batches to a prediction.
pub trait Denoiser {
    fn prediction_mode(&self) -> PredictionMode;

    /// `x` is `[B, d]`; `t` and `c` carry one entry per row.
    fn predict(&self, x: &Tensor, t: &[usize], c: &[Condition]) -> Result<Tensor>;
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn prediction_mode(&self) -> PredictionMode {
        (**self).prediction_mode()
    }
    fn predict(&self, x: &Tensor, t: &[usize], c: &[Condition]) -> Result<Tensor> {
        (**self).predict(x, t, c)
    }
}

/// Prediction at a shared timestep, optionally with classifier-free guidance.
pub fn guided_prediction<D: Denoiser + ?Sized>(
    net: &D,
    x: &Tensor,
    t: usize,
    c: &[Condition],
    guidance: Option<&GuidanceConfig>,
) -> Result<Tensor> {
    let ts = vec![t; x.rows()];
    guided_prediction_rows(net, x, &ts, c, guidance)
}

/// As [`guided_prediction`] with a timestep per row.
pub fn guided_prediction_rows<D: Denoiser + ?Sized>(
    net: &D,
    x: &Tensor,
    ts: &[usize],
    c: &[Condition],
    guidance: Option<&GuidanceConfig>,
) -> Result<Tensor> {
    let cond = net.predict(x, ts, c)?;
    match guidance {
        None => Ok(cond),
        Some(g) => {
            let null = vec![Condition::Null; c.len()];
            let uncond = net.predict(x, ts, &null)?;
            cfg_combine(&cond, &uncond, g.scale)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryState {
    pub t: usize,
    pub x: Tensor,
}

pub type Trajectory = Vec<TrajectoryState>;

/// Deterministic sampling along `grid`, starting from `noise` at `t = T`.
///
/// The network is evaluated at every grid time except 0. Returns all
/// `N + 1` states, the last at `t = 0`.
pub fn sample_ode<D: Denoiser + ?Sized>(
    net: &D,
    grid: &TimeGrid,
    noise: &Tensor,
    c: &[Condition],
    guidance: Option<&GuidanceConfig>,
    sch: &Schedule,
) -> Result<Trajectory> {
    run_grid(net, grid.times(), noise.clone(), c, guidance, sch)
}

fn run_grid<D: Denoiser + ?Sized>(
    net: &D,
    times: &[usize],
    start: Tensor,
    c: &[Condition],
    guidance: Option<&GuidanceConfig>,
    sch: &Schedule,
) -> Result<Trajectory> {
    if c.len() != start.rows() {
        return Err(Error::Shape(format!(
            "{} conditions for {} samples",
            c.len(),
            start.rows()
        )));
    }
    let mut traj = Vec::with_capacity(times.len());
    let mut x = start;
    traj.push(TrajectoryState {
        t: times[0],
        x: x.clone(),
    });
    for w in times.windows(2) {
        let (t, t_next) = (w[0], w[1]);
        let u = guided_prediction(net, &x, t, c, guidance)?;
        x = move_sample(&x, &u, t, t_next, sch, net.prediction_mode())?;
        traj.push(TrajectoryState {
            t: t_next,
            x: x.clone(),
        });
    }
    Ok(traj)
}

/// Noises `x0` to `t_start` and denoises it along the grid points below.
pub fn sdedit<D: Denoiser + ?Sized>(
    net: &D,
    x0: &Tensor,
    eps: &Tensor,
    t_start: usize,
    grid: &TimeGrid,
    c: &[Condition],
    sch: &Schedule,
) -> Result<Tensor> {
    let partial = grid.below(t_start)?;
    let x = forward_fixed(x0, eps, t_start, sch)?;
    let traj = run_grid(net, partial.times(), x, c, None, sch)?;
    Ok(traj.last().expect("trajectory is never empty").x.clone())
}
