use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::diffusion::{sample_ode, Denoiser, Schedule, TimeGrid};
use crate::error::{Error, Result};
use crate::nets::{Condition, GuidanceConfig};

pub const DEFAULT_PROJECTIONS: usize = 128;
pub const DEFAULT_COVERAGE_THRESHOLD: f64 = 0.02;
/// Assignment radius in units of the per-mode standard deviation.
pub const DEFAULT_RADIUS_STDS: f64 = 3.0;

fn check_points(name: &str, a: &Tensor, min: usize) -> Result<()> {
    if a.rows() < min {
        return Err(Error::Usage(format!(
            "{name} needs at least {min} points, got {}",
            a.rows()
        )));
    }
    Ok(())
}

/// Mean over `k` random unit directions of the 1-D Wasserstein-1 distance
/// between the projected sets. The larger set is subsampled to the smaller.
pub fn sliced_wasserstein(a: &Tensor, b: &Tensor, k: usize, seed: u64) -> Result<f64> {
    check_points("sliced_wasserstein", a, 2)?;
    check_points("sliced_wasserstein", b, 2)?;
    if a.cols() != b.cols() {
        return Err(Error::Shape(format!(
            "point dimensions differ: {} vs {}",
            a.cols(),
            b.cols()
        )));
    }
    if k == 0 {
        return Err(Error::Usage("sliced_wasserstein needs at least one projection".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = a.rows().min(b.rows());
    let subsample = |x: &Tensor, rng: &mut ChaCha8Rng| -> Result<Tensor> {
        if x.rows() == n {
            return Ok(x.clone());
        }
        let mut idx = sample_indices(rng, x.rows(), n).into_vec();
        idx.sort_unstable();
        x.select_rows(&idx)
    };
    let (a, b) = (subsample(a, &mut rng)?, subsample(b, &mut rng)?);
    let d = a.cols();
    let mut total = 0.0;
    let mut pa = vec![0.0; n];
    let mut pb = vec![0.0; n];
    for _ in 0..k {
        let mut dir: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|v| *v /= norm);
        let project = |x: &Tensor, out: &mut [f64]| {
            for (i, o) in out.iter_mut().enumerate() {
                *o = x.row(i).iter().zip(&dir).map(|(p, q)| p * q).sum();
            }
            out.sort_unstable_by(f64::total_cmp);
        };
        project(&a, &mut pa);
        project(&b, &mut pb);
        total += pa.iter().zip(&pb).map(|(u, v)| (u - v).abs()).sum::<f64>() / n as f64;
    }
    Ok(total / k as f64)
}

fn sq_dist(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(u, v)| (u - v) * (u - v)).sum()
}

/// Median of all pairwise Euclidean distances within `a ∪ b`.
pub fn median_pairwise_distance(a: &Tensor, b: &Tensor) -> f64 {
    let rows: Vec<&[f64]> = (0..a.rows())
        .map(|i| a.row(i))
        .chain((0..b.rows()).map(|i| b.row(i)))
        .collect();
    let mut d = Vec::with_capacity(rows.len() * (rows.len() - 1) / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            d.push(sq_dist(rows[i], rows[j]).sqrt());
        }
    }
    d.sort_unstable_by(f64::total_cmp);
    let m = d.len();
    if m % 2 == 1 {
        d[m / 2]
    } else {
        0.5 * (d[m / 2 - 1] + d[m / 2])
    }
}

/// Unbiased MMD² with kernel `exp(-|x - y|² / (2 h²))`.
///
/// `bandwidth = None` uses the median pairwise distance of the pooled sets.
pub fn mmd_rbf(a: &Tensor, b: &Tensor, bandwidth: Option<f64>) -> Result<f64> {
    check_points("mmd_rbf", a, 2)?;
    check_points("mmd_rbf", b, 2)?;
    let h = match bandwidth {
        Some(h) => h,
        None => median_pairwise_distance(a, b),
    };
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Domain(format!("kernel bandwidth must be positive, got {h}")));
    }
    let gamma = 1.0 / (2.0 * h * h);
    let k = |p: &[f64], q: &[f64]| (-gamma * sq_dist(p, q)).exp();
    let within = |x: &Tensor| {
        let m = x.rows();
        let mut s = 0.0;
        for i in 0..m {
            for j in i + 1..m {
                s += k(x.row(i), x.row(j));
            }
        }
        2.0 * s / (m * (m - 1)) as f64
    };
    let mut cross = 0.0;
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            cross += k(a.row(i), b.row(j));
        }
    }
    cross /= (a.rows() * b.rows()) as f64;
    Ok(within(a) + within(b) - 2.0 * cross)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeCoverage {
    pub fraction: f64,
    /// Samples assigned to each center.
    pub histogram: Vec<usize>,
    /// Samples farther than the radius from every center.
    pub unassigned: usize,
}

/// Nearest-center assignment within `radius`; `None` for outliers.
pub fn assign_modes(samples: &Tensor, centers: &[[f64; 2]], radius: f64) -> Vec<Option<usize>> {
    (0..samples.rows())
        .map(|i| {
            let p = samples.row(i);
            let (best, d2) = centers
                .iter()
                .enumerate()
                .map(|(k, c)| (k, sq_dist(p, c)))
                .min_by(|x, y| x.1.total_cmp(&y.1))
                .expect("centers nonempty");
            (d2 <= radius * radius).then_some(best)
        })
        .collect()
}

fn check_centers(centers: &[[f64; 2]], radius: f64, samples: &Tensor) -> Result<()> {
    if centers.is_empty() {
        return Err(Error::Usage("at least one mode center is required".into()));
    }
    if !(radius > 0.0) {
        return Err(Error::Usage(format!(
            "assignment radius must be positive, got {radius}"
        )));
    }
    if samples.cols() != 2 {
        return Err(Error::Shape(format!("expected 2-D points, got {}", samples.cols())));
    }
    Ok(())
}

/// Fraction of centers holding at least `threshold` of the assigned samples.
pub fn mode_coverage(samples: &Tensor, centers: &[[f64; 2]], radius: f64, threshold: f64) -> Result<ModeCoverage> {
    check_centers(centers, radius, samples)?;
    let mut histogram = vec![0usize; centers.len()];
    let mut unassigned = 0;
    for a in assign_modes(samples, centers, radius) {
        match a {
            Some(k) => histogram[k] += 1,
            None => unassigned += 1,
        }
    }
    let assigned: usize = histogram.iter().sum();
    let covered = if assigned == 0 {
        0
    } else {
        histogram
            .iter()
            .filter(|&&h| h as f64 >= threshold * assigned as f64)
            .count()
    };
    Ok(ModeCoverage {
        fraction: covered as f64 / centers.len() as f64,
        histogram,
        unassigned,
    })
}

/// Mean over occupied modes of the within-mode standard deviation over `data_std`.
///
/// The within-mode deviation is the root mean squared per-coordinate spread
/// around the mode's sample mean; modes with fewer than two assigned samples
/// are skipped.
pub fn per_mode_variance_ratio(samples: &Tensor, centers: &[[f64; 2]], radius: f64, data_std: f64) -> Result<f64> {
    check_centers(centers, radius, samples)?;
    let mut groups: Vec<Vec<[f64; 2]>> = vec![Vec::new(); centers.len()];
    for (i, a) in assign_modes(samples, centers, radius).into_iter().enumerate() {
        if let Some(k) = a {
            let p = samples.row(i);
            groups[k].push([p[0], p[1]]);
        }
    }
    let mut ratios = Vec::new();
    for g in groups.iter().filter(|g| g.len() >= 2) {
        let n = g.len() as f64;
        let mean = [
            g.iter().map(|p| p[0]).sum::<f64>() / n,
            g.iter().map(|p| p[1]).sum::<f64>() / n,
        ];
        let ss: f64 = g.iter().map(|p| sq_dist(p, &mean)).sum();
        let std = (ss / (2.0 * (n - 1.0))).sqrt();
        ratios.push(std / data_std);
    }
    if ratios.is_empty() {
        return Err(Error::Diagnostic("no mode holds two or more samples".into()));
    }
    Ok(ratios.iter().sum::<f64>() / ratios.len() as f64)
}

/// One side of a flow comparison.
pub struct FlowSampler<'a> {
    pub net: &'a dyn Denoiser,
    pub grid: &'a TimeGrid,
    pub guidance: Option<&'a GuidanceConfig>,
}

/// Mean L2 distance between student and teacher trajectory states at the
/// grid times they share, excluding the common starting point `T`.
pub fn flow_preservation_error(
    student: &FlowSampler<'_>,
    teacher: &FlowSampler<'_>,
    noises: &Tensor,
    conditions: &[Condition],
    sch: &Schedule,
) -> Result<f64> {
    let shared: Vec<usize> = student.grid.times()[1..]
        .iter()
        .copied()
        .filter(|&t| teacher.grid.contains(t))
        .collect();
    if shared.is_empty() {
        return Err(Error::Usage("student and teacher grids share no timesteps".into()));
    }
    let s = sample_ode(student.net, student.grid, noises, conditions, student.guidance, sch)?;
    let t = sample_ode(teacher.net, teacher.grid, noises, conditions, teacher.guidance, sch)?;
    let state = |traj: &[crate::diffusion::TrajectoryState], time: usize| {
        traj.iter()
            .find(|st| st.t == time)
            .map(|st| st.x.clone())
            .expect("shared time is on both grids")
    };
    let mut total = 0.0;
    for &time in &shared {
        let (xs, xt) = (state(&s, time), state(&t, time));
        for i in 0..xs.rows() {
            total += sq_dist(xs.row(i), xt.row(i)).sqrt();
        }
    }
    Ok(total / (shared.len() * noises.rows()) as f64)
}

/// Everything `eval` reports about one sample set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricReport {
    pub sliced_wasserstein: f64,
    pub mmd: f64,
    /// Mode metrics are `None` for datasets without discrete modes.
    pub mode_coverage: Option<f64>,
    pub mode_histogram: Vec<usize>,
    pub unassigned: usize,
    pub per_mode_variance_ratio: Option<f64>,
    pub flow_preservation_error: f64,
    pub sample_count: usize,
    pub seed: u64,
    pub step_count: usize,
}

impl MetricReport {
    /// Checks finiteness and that the histogram accounts for every sample.
    pub fn validate(&self) -> Result<()> {
        let reals = [
            Some(self.sliced_wasserstein),
            Some(self.mmd),
            self.mode_coverage,
            self.per_mode_variance_ratio,
            Some(self.flow_preservation_error),
        ];
        if reals.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Diagnostic(format!("non-finite metric in {self:?}")));
        }
        let counted: usize = self.mode_histogram.iter().sum::<usize>() + self.unassigned;
        if counted != self.sample_count {
            return Err(Error::Diagnostic(format!(
                "histogram accounts for {counted} of {} samples",
                self.sample_count
            )));
        }
        Ok(())
    }
}
