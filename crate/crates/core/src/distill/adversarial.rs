use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::Distribution;

use super::batch::{gaussian, jump_node, student_jump, DistillBatch};
use crate::autodiff::{adam_step, AdamState, Graph, NodeId, OptimizerConfig, Tensor, PROB_CLAMP};
use crate::diffusion::Schedule;
use crate::error::{Error, Result};
use crate::nets::{BoundDiscriminator, DenoiserNet, Discriminator, DiscriminatorForm};

/// Per-row re-noising of discriminator inputs: `t_star[i] = None` leaves row `i` alone.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscNoise {
    pub t_star: Vec<Option<usize>>,
    pub eps: Tensor,
}

impl DiscNoise {
    fn coefficients(&self, i: usize, sch: &Schedule) -> Option<(f64, f64)> {
        match self.t_star[i] {
            None | Some(0) => None,
            Some(t) => {
                let ab = sch.alpha_bar(t);
                Some((ab.sqrt(), (1.0 - ab).sqrt()))
            }
        }
    }

    /// `forward_diffuse(x, eps*, t*)` on the selected rows.
    pub fn apply(&self, x: &Tensor, sch: &Schedule) -> Result<Tensor> {
        x.expect_same_shape(&self.eps)?;
        let mut out = x.clone();
        for i in 0..x.rows() {
            if let Some((a, b)) = self.coefficients(i, sch) {
                for (o, &e) in out.row_mut(i).iter_mut().zip(self.eps.row(i)) {
                    *o = a * *o + b * e;
                }
            }
        }
        Ok(out)
    }

    /// Differentiable version of [`DiscNoise::apply`].
    pub(crate) fn apply_node(&self, g: &mut Graph, x: NodeId, sch: &Schedule) -> Result<NodeId> {
        if self.t_star.iter().all(|t| matches!(t, None | Some(0))) {
            return Ok(x);
        }
        let (rows, cols) = (g.value(x).rows(), g.value(x).cols());
        let mut a = vec![1.0; rows * cols];
        let mut shift = vec![0.0; rows * cols];
        for i in 0..rows {
            if let Some((ca, cb)) = self.coefficients(i, sch) {
                for j in 0..cols {
                    a[i * cols + j] = ca;
                    shift[i * cols + j] = cb * self.eps.row(i)[j];
                }
            }
        }
        let a = g.constant(Tensor::new(vec![rows, cols], a)?);
        let shift = g.constant(Tensor::new(vec![rows, cols], shift)?);
        let ax = g.mul(a, x)?;
        g.add(ax, shift)
    }

    /// Time label the discriminator sees for each row.
    pub fn times(&self, jump_to: &[usize]) -> Vec<usize> {
        self.t_star.iter().zip(jump_to).map(|(s, &j)| s.unwrap_or(j)).collect()
    }
}

/// Draws `t*` from the weighted set for rows whose jump lands on `t = 0`.
///
/// With `caps`, row `i` only draws levels `<= caps[i]` (weights renormalized
/// over those); a row with no eligible level is left as is.
pub fn draw_disc_noise(
    jump_to: &[usize],
    timesteps: &[usize],
    weights: &[u32],
    caps: Option<&[usize]>,
    dim: usize,
    rng: &mut impl Rng,
) -> Result<DiscNoise> {
    if weights.len() != timesteps.len() {
        return Err(Error::config("disc_noise.weights", "one weight per timestep"));
    }
    let full = WeightedIndex::new(weights).map_err(|e| Error::config("disc_noise.weights", e.to_string()))?;
    if caps.is_some_and(|c| c.len() != jump_to.len()) {
        return Err(Error::Shape("one noise cap per row".into()));
    }
    let mut capped: BTreeMap<usize, Option<WeightedIndex<u32>>> = BTreeMap::new();
    let mut t_star = Vec::with_capacity(jump_to.len());
    for (i, &j) in jump_to.iter().enumerate() {
        if j != 0 {
            t_star.push(None);
            continue;
        }
        let pick = match caps.map(|c| c[i]) {
            Some(cap) if timesteps.iter().any(|&t| t > cap) => {
                let dist = capped.entry(cap).or_insert_with(|| {
                    let w: Vec<u32> = timesteps
                        .iter()
                        .zip(weights)
                        .map(|(&t, &w)| if t <= cap { w } else { 0 })
                        .collect();
                    WeightedIndex::new(w).ok()
                });
                dist.as_ref().map(|d| timesteps[d.sample(rng)])
            }
            _ => Some(timesteps[full.sample(rng)]),
        };
        t_star.push(pick);
    }
    let eps = gaussian(jump_to.len(), dim, rng);
    Ok(DiscNoise { t_star, eps })
}

/// Noises every row of `x` at a weighted random `t*`; returns the result and the draws.
pub fn noise_disc_inputs(
    x: &Tensor,
    timesteps: &[usize],
    weights: &[u32],
    rng: &mut impl Rng,
    sch: &Schedule,
) -> Result<(Tensor, Vec<usize>)> {
    let zeros = vec![0; x.rows()];
    let noise = draw_disc_noise(&zeros, timesteps, weights, None, x.cols(), rng)?;
    let t_star = noise.t_star.iter().map(|t| t.expect("every row drawn")).collect();
    Ok((noise.apply(x, sch)?, t_star))
}

fn clamp(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Discriminator loss `-log p - log(1 - p̂)` for single probabilities.
pub fn d_loss_value(p_real: f64, p_fake: f64) -> f64 {
    -clamp(p_real).ln() - (1.0 - clamp(p_fake)).ln()
}

/// Non-saturating generator loss `-log p̂`.
pub fn g_loss_value(p_fake: f64) -> f64 {
    -clamp(p_fake).ln()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdversarialLosses {
    pub d_loss: f64,
    pub g_loss: f64,
    /// Mean discriminator output on teacher samples during the D update.
    pub p_real: f64,
    /// Mean discriminator output on student samples during the D update.
    pub p_fake: f64,
}

#[allow(clippy::too_many_arguments)]
fn disc_prob(
    g: &mut Graph,
    disc: &Discriminator,
    bd: &BoundDiscriminator,
    batch: &DistillBatch,
    x_t: NodeId,
    x_jump: NodeId,
    d_times: &[usize],
) -> Result<NodeId> {
    match disc.form() {
        DiscriminatorForm::Conditional => disc.forward_conditional(g, bd, x_t, x_jump, &batch.t, d_times, &batch.c),
        DiscriminatorForm::Unconditional => disc.forward_unconditional(g, bd, x_jump, d_times, &batch.c),
    }
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("{what} is {v}")))
    }
}

/// One alternating iteration: a discriminator update on (teacher, student)
/// pairs with the student output held fixed, then a student update through
/// the frozen, just-updated discriminator.
///
/// The discriminator form decides whether the start point `x_t` is shown.
#[allow(clippy::too_many_arguments)]
pub fn adversarial_step(
    student: &mut DenoiserNet,
    student_adam: &mut AdamState,
    student_opt: &OptimizerConfig,
    disc: &mut Discriminator,
    disc_adam: &mut AdamState,
    disc_opt: &OptimizerConfig,
    batch: &DistillBatch,
    noise: Option<&DiscNoise>,
    sch: &Schedule,
) -> Result<AdversarialLosses> {
    let d_times = match noise {
        Some(n) => n.times(&batch.jump_to),
        None => batch.jump_to.clone(),
    };
    let noised = |x: &Tensor| -> Result<Tensor> {
        match noise {
            Some(n) => n.apply(x, sch),
            None => Ok(x.clone()),
        }
    };

    let (d_loss, p_real, p_fake) = {
        let fake = student_jump(&*student, &batch.x_t, &batch.t, &batch.c, &batch.jump_to, sch)?;
        let mut g = Graph::new();
        let bd = disc.bind(&mut g, true);
        let x_t = g.constant(batch.x_t.clone());
        let real = g.constant(noised(&batch.target)?);
        let fake = g.constant(noised(&fake)?);
        let p = disc_prob(&mut g, disc, &bd, batch, x_t, real, &d_times)?;
        let p_hat = disc_prob(&mut g, disc, &bd, batch, x_t, fake, &d_times)?;
        let l_real = g.log_loss(p, 1.0)?;
        let l_fake = g.log_loss(p_hat, 0.0)?;
        let loss = g.add(l_real, l_fake)?;
        let value = finite(g.value(loss).data()[0], "discriminator loss")?;
        let grads = bd.grads(&g, &g.backward(loss)?);
        let (pr, pf) = (g.value(p).mean(), g.value(p_hat).mean());
        adam_step(&mut disc.params_mut(), &grads, disc_adam, disc_opt)?;
        (value, pr, pf)
    };

    let g_loss = {
        let mut g = Graph::new();
        let bs = student.bind(&mut g, true);
        let bd = disc.bind(&mut g, false);
        let x_t = g.constant(batch.x_t.clone());
        let u = student.forward(&mut g, &bs, x_t, &batch.t, &batch.c)?;
        let jump = jump_node(&mut g, x_t, u, &batch.t, &batch.jump_to, sch, student.mode())?;
        let jump = match noise {
            Some(n) => n.apply_node(&mut g, jump, sch)?,
            None => jump,
        };
        let p_hat = disc_prob(&mut g, disc, &bd, batch, x_t, jump, &d_times)?;
        let loss = g.log_loss(p_hat, 1.0)?;
        let value = finite(g.value(loss).data()[0], "generator loss")?;
        let grads = bs.grads(&g, &g.backward(loss)?);
        adam_step(&mut student.trainable_params_mut(), &grads, student_adam, student_opt)?;
        value
    };

    Ok(AdversarialLosses {
        d_loss,
        g_loss,
        p_real,
        p_fake,
    })
}
