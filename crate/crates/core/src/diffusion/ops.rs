use serde::{Deserialize, Serialize};

use super::schedule::Schedule;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// What a denoiser's raw output means.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionMode {
    /// Output is the noise estimate.
    Epsilon,
    /// Output is the clean-sample estimate.
    X0,
}

impl PredictionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PredictionMode::Epsilon => "epsilon",
            PredictionMode::X0 => "x0",
        }
    }
}

/// `sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`.
pub fn forward_diffuse(x0: &Tensor, eps: &Tensor, t: usize, sch: &Schedule) -> Result<Tensor> {
    sch.check_time(t)?;
    let ab = sch.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// Forward process with pure noise substituted at the terminal step.
pub fn forward_fixed(x0: &Tensor, eps: &Tensor, t: usize, sch: &Schedule) -> Result<Tensor> {
    sch.check_time(t)?;
    x0.expect_same_shape(eps)?;
    if t == sch.timesteps() {
        Ok(eps.clone())
    } else {
        forward_diffuse(x0, eps, t, sch)
    }
}

/// Clean-sample estimate from a noise estimate.
pub fn pred_to_x0(x_t: &Tensor, eps_hat: &Tensor, t: usize, sch: &Schedule) -> Result<Tensor> {
    sch.check_time(t)?;
    let ab = sch.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x_t.zip_map(eps_hat, |x, e| (x - b * e) / a)
}

/// Noise estimate from a clean-sample estimate. Undefined at `t = 0`.
pub fn pred_to_eps(x_t: &Tensor, x0_hat: &Tensor, t: usize, sch: &Schedule) -> Result<Tensor> {
    sch.check_time(t)?;
    if t == 0 {
        return Err(Error::Domain(
            "noise estimate is undefined at t = 0 (alpha_bar = 1)".into(),
        ));
    }
    let ab = sch.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x_t.zip_map(x0_hat, |x, x0| (x - a * x0) / b)
}

/// Both `(x0_hat, eps_hat)` from a raw prediction.
pub fn split_prediction(
    x_t: &Tensor,
    u: &Tensor,
    t: usize,
    sch: &Schedule,
    mode: PredictionMode,
) -> Result<(Tensor, Tensor)> {
    match mode {
        PredictionMode::Epsilon => Ok((pred_to_x0(x_t, u, t, sch)?, u.clone())),
        PredictionMode::X0 => Ok((u.clone(), pred_to_eps(x_t, u, t, sch)?)),
    }
}

/// Moves `x_t` along the flow implied by prediction `u` to time `t_prime <= t`.
pub fn move_sample(
    x_t: &Tensor,
    u: &Tensor,
    t: usize,
    t_prime: usize,
    sch: &Schedule,
    mode: PredictionMode,
) -> Result<Tensor> {
    sch.check_time(t)?;
    if t_prime > t {
        return Err(Error::Domain(format!("cannot move backwards from {t} to {t_prime}")));
    }
    x_t.expect_same_shape(u)?;
    if t_prime == t {
        return Ok(x_t.clone());
    }
    let (x0_hat, eps_hat) = split_prediction(x_t, u, t, sch, mode)?;
    forward_diffuse(&x0_hat, &eps_hat, t_prime, sch)
}

/// Coefficients `(a, b)` such that `move(x, u, t, t') = a x + b u`.
///
/// The move operator is linear in `(x_t, u)`; this closed form is what the
/// differentiable code paths use.
pub fn move_coefficients(t: usize, t_prime: usize, sch: &Schedule, mode: PredictionMode) -> Result<(f64, f64)> {
    sch.check_time(t)?;
    if t_prime > t {
        return Err(Error::Domain(format!("cannot move backwards from {t} to {t_prime}")));
    }
    if t_prime == t {
        return Ok((1.0, 0.0));
    }
    let ab = sch.alpha_bar(t);
    let abp = sch.alpha_bar(t_prime);
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let (spa, spb) = (abp.sqrt(), (1.0 - abp).sqrt());
    Ok(match mode {
        PredictionMode::Epsilon => (spa / sa, spb - spa * sb / sa),
        PredictionMode::X0 => (spb / sb, spa - spb * sa / sb),
    })
}

/// Time reached after `k` steps of size `spacing` from `t`, clamped at 0.
///
/// When `t` sits on the uniform grid of that spacing the result is the grid
/// point `k` positions later, so rounded grids (e.g. 128 steps over 1000) are
/// walked exactly.
pub fn step_back(t: usize, k: usize, spacing: f64) -> usize {
    let idx = (t as f64 / spacing).round();
    let aligned = (idx * spacing).round() as usize == t;
    let target = if aligned {
        ((idx - k as f64) * spacing).round()
    } else {
        t as f64 - (k as f64 * spacing).round()
    };
    if target <= 0.0 {
        0
    } else {
        target as usize
    }
}
