//! Closed-form optimal denoiser for isotropic Gaussian data `N(mu, sigma^2 I)`.
//!
//! Useful as a perfect "network" in tests: its probability-flow ODE has an
//! analytic endpoint, and with `sigma = 0` the move operator is exact for any
//! step size.

use super::ops::PredictionMode;
use super::sampler::Denoiser;
use super::schedule::Schedule;
use crate::autodiff::Tensor;
use crate::error::Result;
use crate::nets::Condition;

#[derive(Clone, Debug)]
pub struct GaussianDenoiser {
    pub mean: Vec<f64>,
    pub std: f64,
    pub schedule: Schedule,
}

impl GaussianDenoiser {
    pub fn new(mean: Vec<f64>, std: f64, schedule: Schedule) -> Self {
        Self { mean, std, schedule }
    }

    fn marginal_var(&self, t: usize) -> f64 {
        let ab = self.schedule.alpha_bar(t);
        ab * self.std * self.std + 1.0 - ab
    }

    /// Exact ODE endpoint for a start point `x_T` at `t = T`.
    pub fn ode_endpoint(&self, x_t: &Tensor, t: usize) -> Tensor {
        let ab = self.schedule.alpha_bar(t);
        let s = self.marginal_var(t).sqrt();
        let mut out = x_t.clone();
        let d = self.mean.len();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let mu = self.mean[i % d];
            *v = mu + self.std * (*v - ab.sqrt() * mu) / s;
        }
        out
    }
}

impl Denoiser for GaussianDenoiser {
    fn prediction_mode(&self) -> PredictionMode {
        PredictionMode::Epsilon
    }

    fn predict(&self, x: &Tensor, t: &[usize], _c: &[Condition]) -> Result<Tensor> {
        let d = self.mean.len();
        let mut out = x.clone();
        for (r, &tr) in t.iter().enumerate() {
            let ab = self.schedule.alpha_bar(tr);
            let var = self.marginal_var(tr);
            for (j, v) in out.row_mut(r).iter_mut().enumerate() {
                let mu = self.mean[j % d];
                *v = (1.0 - ab).sqrt() * (*v - ab.sqrt() * mu) / var;
            }
        }
        Ok(out)
    }
}
