use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TIMESTEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 0.00085;
pub const DEFAULT_BETA_END: f64 = 0.012;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleParams {
    #[serde(default = "default_timesteps")]
    pub timesteps: usize,
    #[serde(default = "default_beta_start")]
    pub beta_start: f64,
    #[serde(default = "default_beta_end")]
    pub beta_end: f64,
}

fn default_timesteps() -> usize {
    DEFAULT_TIMESTEPS
}
fn default_beta_start() -> f64 {
    DEFAULT_BETA_START
}
fn default_beta_end() -> f64 {
    DEFAULT_BETA_END
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            timesteps: DEFAULT_TIMESTEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
        }
    }
}

/// Discrete scaled-linear schedule holding cumulative signal levels `alpha_bar[t]`.
///
/// `alpha_bar[0] == 1` and the sequence is strictly decreasing, but the
/// terminal value stays above zero: inputs at `t = T` still carry signal.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    params: ScheduleParams,
    alpha_bar: Vec<f64>,
}

impl Schedule {
    pub fn new(params: ScheduleParams) -> Result<Self> {
        let ScheduleParams {
            timesteps,
            beta_start,
            beta_end,
        } = params;
        if timesteps < 2 {
            return Err(Error::config("schedule.timesteps", "must be at least 2"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::config(
                "schedule.beta_start",
                format!("need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"),
            ));
        }
        let (lo, hi) = (beta_start.sqrt(), beta_end.sqrt());
        let mut alpha_bar = Vec::with_capacity(timesteps + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for i in 1..=timesteps {
            let frac = (i - 1) as f64 / (timesteps - 1) as f64;
            let beta = (lo + frac * (hi - lo)).powi(2);
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }
        Ok(Self { params, alpha_bar })
    }

    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    /// Number of diffusion steps `T`.
    pub fn timesteps(&self) -> usize {
        self.params.timesteps
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub(crate) fn check_time(&self, t: usize) -> Result<()> {
        if t > self.timesteps() {
            return Err(Error::Domain(format!("timestep {t} outside [0, {}]", self.timesteps())));
        }
        Ok(())
    }
}

impl Default for Schedule {
    fn default() -> Self {
        Self::new(ScheduleParams::default()).expect("default schedule is valid")
    }
}

/// Uniform sampling grid `T = t_N > ... > t_0 = 0` with `t_i = round(T i / N)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TimeGrid {
    times: Vec<usize>,
}

impl TimeGrid {
    pub fn new(steps: usize, timesteps: usize) -> Result<Self> {
        if steps == 0 || steps > timesteps {
            return Err(Error::config(
                "steps",
                format!("step count {steps} must be in [1, {timesteps}]"),
            ));
        }
        let times = (0..=steps)
            .rev()
            .map(|i| ((timesteps * i) as f64 / steps as f64).round() as usize)
            .collect();
        Ok(Self { times })
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    /// Times in decreasing order, starting at `T` and ending at 0.
    pub fn times(&self) -> &[usize] {
        &self.times
    }

    /// Nominal spacing `T / N`.
    pub fn spacing(&self) -> f64 {
        self.times[0] as f64 / self.steps() as f64
    }

    pub fn contains(&self, t: usize) -> bool {
        self.times.contains(&t)
    }

    /// `t` followed by the grid points strictly below it, for starts that
    /// were trained off the grid.
    pub fn starting_at(&self, t: usize) -> Result<TimeGrid> {
        if t > self.times[0] {
            return Err(Error::Domain(format!("start {t} beyond {}", self.times[0])));
        }
        let mut times = vec![t];
        times.extend(self.times.iter().copied().filter(|&v| v < t));
        Ok(TimeGrid { times })
    }

    /// The tail of the grid starting at `t` (which must be a grid point).
    pub fn below(&self, t: usize) -> Result<TimeGrid> {
        let pos = self
            .times
            .iter()
            .position(|&v| v == t)
            .ok_or_else(|| Error::Domain(format!("timestep {t} is not on the grid")))?;
        Ok(TimeGrid {
            times: self.times[pos..].to_vec(),
        })
    }
}
