use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::StageConfig;
use crate::autodiff::{Graph, NodeId, Tensor};
use crate::diffusion::{guided_prediction_rows, move_coefficients, step_back, Denoiser, PredictionMode, Schedule};
use crate::error::{Error, Result};
use crate::eval::ToyDataset;
use crate::nets::{Condition, GuidanceConfig};

/// Probability of replacing a class label with the unconditional token.
pub const COND_DROPOUT: f64 = 0.1;

/// Forward process with one timestep per row; rows at `t = T` become pure noise.
pub fn forward_fixed_rows(x0: &Tensor, eps: &Tensor, ts: &[usize], sch: &Schedule) -> Result<Tensor> {
    x0.expect_same_shape(eps)?;
    if ts.len() != x0.rows() {
        return Err(Error::Shape(format!("{} timesteps for {} rows", ts.len(), x0.rows())));
    }
    let mut out = eps.clone();
    for (i, &t) in ts.iter().enumerate() {
        if t > sch.timesteps() {
            return Err(Error::Domain(format!("timestep {t} outside [0, {}]", sch.timesteps())));
        }
        if t == sch.timesteps() {
            continue;
        }
        let ab = sch.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        for (o, &x) in out.row_mut(i).iter_mut().zip(x0.row(i)) {
            *o = a * x + b * *o;
        }
    }
    Ok(out)
}

/// Walks every row from `t[i]` down to `target[i]` in steps of `spacing`,
/// re-evaluating `net` at each intermediate time. The last step of a row is
/// shortened so it lands exactly on its target.
#[allow(clippy::too_many_arguments)]
pub fn walk_to<D: Denoiser + ?Sized>(
    net: &D,
    x_t: &Tensor,
    t: &[usize],
    target: &[usize],
    spacing: f64,
    c: &[Condition],
    guidance: Option<&GuidanceConfig>,
    sch: &Schedule,
) -> Result<Tensor> {
    let rows = x_t.rows();
    if t.len() != rows || target.len() != rows || c.len() != rows {
        return Err(Error::Shape(format!(
            "walk over {rows} rows with {} times, {} targets, {} conditions",
            t.len(),
            target.len(),
            c.len()
        )));
    }
    if !(spacing >= 1.0) {
        return Err(Error::Domain(format!("step spacing {spacing} below one timestep")));
    }
    if let Some(i) = (0..rows).find(|&i| target[i] > t[i]) {
        return Err(Error::Domain(format!(
            "row {i}: target {} after start {}",
            target[i], t[i]
        )));
    }
    let mode = net.prediction_mode();
    let mut x = x_t.clone();
    let mut cur = t.to_vec();
    for k in 1.. {
        let active: Vec<usize> = (0..rows).filter(|&i| cur[i] > target[i]).collect();
        if active.is_empty() {
            break;
        }
        let xa = x.select_rows(&active)?;
        let ta: Vec<usize> = active.iter().map(|&i| cur[i]).collect();
        let ca: Vec<Condition> = active.iter().map(|&i| c[i]).collect();
        let u = guided_prediction_rows(net, &xa, &ta, &ca, guidance)?;
        for (j, &i) in active.iter().enumerate() {
            let next = step_back(t[i], k, spacing).max(target[i]);
            let (a, b) = move_coefficients(cur[i], next, sch, mode)?;
            for ((o, &xv), &uv) in x.row_mut(i).iter_mut().zip(xa.row(j)).zip(u.row(j)) {
                *o = a * xv + b * uv;
            }
            cur[i] = next;
        }
    }
    Ok(x)
}

/// Where `n` teacher steps of size `spacing` lead from each `t`, clamped at 0.
pub fn jump_targets(t: &[usize], n: usize, spacing: f64) -> Vec<usize> {
    t.iter().map(|&ti| step_back(ti, n, spacing)).collect()
}

/// The point the frozen teacher reaches after `n` steps of size `spacing`.
#[allow(clippy::too_many_arguments)]
pub fn teacher_multistep_target<D: Denoiser + ?Sized>(
    teacher: &D,
    x_t: &Tensor,
    t: &[usize],
    c: &[Condition],
    n: usize,
    spacing: f64,
    guidance: Option<&GuidanceConfig>,
    sch: &Schedule,
) -> Result<Tensor> {
    if n == 0 {
        return Err(Error::Usage("teacher target needs at least one step".into()));
    }
    let target = jump_targets(t, n, spacing);
    walk_to(teacher, x_t, t, &target, spacing, c, guidance, sch)
}

/// Per-row move coefficients broadcast to `[B, cols]` tensors.
pub(crate) fn move_coefficient_tensors(
    t: &[usize],
    jump_to: &[usize],
    cols: usize,
    sch: &Schedule,
    mode: PredictionMode,
) -> Result<(Tensor, Tensor)> {
    let mut a = Vec::with_capacity(t.len() * cols);
    let mut b = Vec::with_capacity(t.len() * cols);
    for (&ti, &tj) in t.iter().zip(jump_to) {
        let (ca, cb) = move_coefficients(ti, tj, sch, mode)?;
        a.extend(std::iter::repeat_n(ca, cols));
        b.extend(std::iter::repeat_n(cb, cols));
    }
    let shape = vec![t.len(), cols];
    Ok((Tensor::new(shape.clone(), a)?, Tensor::new(shape, b)?))
}

/// `a ⊙ x + b ⊙ u` as graph nodes, where `(a, b)` are the move coefficients.
pub(crate) fn jump_node(
    g: &mut Graph,
    x_t: NodeId,
    u: NodeId,
    t: &[usize],
    jump_to: &[usize],
    sch: &Schedule,
    mode: PredictionMode,
) -> Result<NodeId> {
    let cols = g.value(x_t).cols();
    let (a, b) = move_coefficient_tensors(t, jump_to, cols, sch, mode)?;
    let (a, b) = (g.constant(a), g.constant(b));
    let ax = g.mul(a, x_t)?;
    let bu = g.mul(b, u)?;
    g.add(ax, bu)
}

/// The student's one-evaluation estimate of where the teacher lands.
pub fn student_jump<D: Denoiser + ?Sized>(
    student: &D,
    x_t: &Tensor,
    t: &[usize],
    c: &[Condition],
    jump_to: &[usize],
    sch: &Schedule,
) -> Result<Tensor> {
    let u = student.predict(x_t, t, c)?;
    let (a, b) = move_coefficient_tensors(t, jump_to, x_t.cols(), sch, student.prediction_mode())?;
    let ax = a.zip_map(x_t, |p, q| p * q)?;
    let bu = b.zip_map(&u, |p, q| p * q)?;
    ax.add(&bu)
}

/// Inputs and targets for one distillation iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillBatch {
    pub x0: Tensor,
    pub c: Vec<Condition>,
    pub eps: Tensor,
    pub t: Vec<usize>,
    pub x_t: Tensor,
    pub jump_to: Vec<usize>,
    /// Where the reference network lands from `x_t` at `jump_to`.
    pub target: Tensor,
}

/// Fresh labels for `n` rows, with unconditional dropout.
pub(crate) fn draw_conditions(labels: &[usize], rng: &mut impl Rng) -> Vec<Condition> {
    labels
        .iter()
        .map(|&l| {
            if rng.random::<f64>() < COND_DROPOUT {
                Condition::Null
            } else {
                Condition::Class(l)
            }
        })
        .collect()
}

pub(crate) fn gaussian(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(vec![rows, cols], data).expect("noise shape")
}

/// Draws data, noise and start times, then walks `reference` (a network with
/// `reference_steps` grid steps) to each row's jump target.
pub fn make_batch(
    dataset: &ToyDataset,
    stage: &StageConfig,
    reference: &dyn Denoiser,
    reference_steps: usize,
    rng: &mut impl Rng,
    sch: &Schedule,
) -> Result<DistillBatch> {
    let n = stage.batch_size;
    let pts = dataset.sample(n, rng);
    let c = draw_conditions(&pts.labels, rng);
    let t: Vec<usize> = (0..n)
        .map(|_| stage.student_timesteps[rng.random_range(0..stage.student_timesteps.len())])
        .collect();
    let eps = gaussian(n, pts.points.cols(), rng);
    let x_t = forward_fixed_rows(&pts.points, &eps, &t, sch)?;
    let jump_to = jump_targets(&t, stage.substeps(), stage.teacher_spacing(sch.timesteps()));
    let spacing = sch.timesteps() as f64 / reference_steps as f64;
    let target = walk_to(reference, &x_t, &t, &jump_to, spacing, &c, stage.guidance.as_ref(), sch)?;
    Ok(DistillBatch {
        x0: pts.points,
        c,
        eps,
        t,
        x_t,
        jump_to,
        target,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{forward_fixed, move_sample};

    #[test]
    fn rowwise_forward_matches_scalar_version() {
        let sch = Schedule::default();
        let x0 = Tensor::from_rows(&[vec![1.0, 2.0], vec![-0.5, 0.3]]).unwrap();
        let eps = Tensor::from_rows(&[vec![0.1, -0.2], vec![0.7, 0.9]]).unwrap();
        let out = forward_fixed_rows(&x0, &eps, &[1000, 400], &sch).unwrap();
        assert_eq!(out.row(0), eps.row(0));
        let one = |i: usize| Tensor::new(vec![1, 2], x0.row(i).to_vec()).unwrap();
        let e1 = Tensor::new(vec![1, 2], eps.row(1).to_vec()).unwrap();
        assert_eq!(out.row(1), forward_fixed(&one(1), &e1, 400, &sch).unwrap().data());
    }

    struct Constant(PredictionMode);

    impl Denoiser for Constant {
        fn prediction_mode(&self) -> PredictionMode {
            self.0
        }
        fn predict(&self, x: &Tensor, _t: &[usize], _c: &[Condition]) -> Result<Tensor> {
            Ok(x.map(|v| 0.5 * v + 0.1))
        }
    }

    #[test]
    fn single_step_target_is_one_move() {
        let sch = Schedule::default();
        let net = Constant(PredictionMode::Epsilon);
        let x = Tensor::from_rows(&[vec![0.3, -1.0]]).unwrap();
        let c = [Condition::Class(0)];
        let got = teacher_multistep_target(&net, &x, &[750], &c, 1, 250.0, None, &sch).unwrap();
        let u = net.predict(&x, &[750], &c).unwrap();
        let want = move_sample(&x, &u, 750, 500, &sch, PredictionMode::Epsilon).unwrap();
        assert!(got.max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn overshooting_target_clamps_to_x0() {
        let sch = Schedule::default();
        let net = Constant(PredictionMode::Epsilon);
        let x = Tensor::from_rows(&[vec![0.3, -1.0]]).unwrap();
        let c = [Condition::Null];
        let got = teacher_multistep_target(&net, &x, &[300], &c, 2, 250.0, None, &sch).unwrap();
        let u = net.predict(&x, &[300], &c).unwrap();
        let mid = move_sample(&x, &u, 300, 50, &sch, PredictionMode::Epsilon).unwrap();
        let u2 = net.predict(&mid, &[50], &c).unwrap();
        let want = move_sample(&mid, &u2, 50, 0, &sch, PredictionMode::Epsilon).unwrap();
        assert!(got.max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn jump_to_start_is_identity() {
        let sch = Schedule::default();
        let net = Constant(PredictionMode::X0);
        let x = Tensor::from_rows(&[vec![0.3, -1.0], vec![2.0, 0.0]]).unwrap();
        let c = [Condition::Null; 2];
        let same = student_jump(&net, &x, &[500, 20], &c, &[500, 20], &sch).unwrap();
        assert_eq!(same, x);
        let to_zero = student_jump(&net, &x, &[500, 20], &c, &[0, 0], &sch).unwrap();
        assert!(to_zero.max_abs_diff(&net.predict(&x, &[0, 0], &c).unwrap()).unwrap() < 1e-15);
    }

    #[test]
    fn walk_rejects_targets_after_start() {
        let sch = Schedule::default();
        let net = Constant(PredictionMode::Epsilon);
        let x = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let r = walk_to(&net, &x, &[100], &[200], 10.0, &[Condition::Null], None, &sch);
        assert!(matches!(r, Err(Error::Domain(_))));
    }
}
