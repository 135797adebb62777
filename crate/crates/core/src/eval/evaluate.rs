use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::datasets::{generate_dataset, ToyDataset};
use super::export::{sample_points, SamplePoint};
use super::metrics::{
    flow_preservation_error, mmd_rbf, mode_coverage, per_mode_variance_ratio, sliced_wasserstein, FlowSampler,
    MetricReport, DEFAULT_COVERAGE_THRESHOLD, DEFAULT_PROJECTIONS, DEFAULT_RADIUS_STDS,
};
use crate::autodiff::Tensor;
use crate::diffusion::{sample_ode, Denoiser, Schedule, TimeGrid};
use crate::error::{Error, Result};
use crate::nets::{Condition, GuidanceConfig};

/// Noise and class labels for `n` samples, labels distributed as in the data.
pub fn sampling_inputs(dataset: &ToyDataset, n: usize, seed: u64) -> (Tensor, Vec<Condition>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = dataset.sample(n, &mut rng).labels;
    let noise: Vec<f64> = (0..2 * n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let noise = Tensor::new(vec![n, 2], noise).expect("shape matches data");
    (noise, labels.into_iter().map(Condition::Class).collect())
}

/// Samples `n` points with a `steps`-step deterministic sampler.
pub fn generate_samples(
    net: &dyn Denoiser,
    steps: usize,
    dataset: &ToyDataset,
    n: usize,
    seed: u64,
    guidance: Option<&GuidanceConfig>,
    sch: &Schedule,
) -> Result<(Tensor, Vec<Condition>)> {
    let grid = TimeGrid::new(steps, sch.timesteps())?;
    let (noise, c) = sampling_inputs(dataset, n, seed);
    let traj = sample_ode(net, &grid, &noise, &c, guidance, sch)?;
    Ok((traj.last().expect("trajectory is never empty").x.clone(), c))
}

/// Coverage fraction, per-mode histogram, unassigned count and variance ratio.
pub type ModeSummary = (f64, Vec<usize>, usize, Option<f64>);

/// Distribution and mode metrics of `samples` against a reference set.
///
/// The variance ratio is `None` when no mode holds two samples.
pub fn distribution_metrics(
    samples: &Tensor,
    reference: &Tensor,
    dataset: &ToyDataset,
    seed: u64,
) -> Result<(f64, f64, Option<ModeSummary>)> {
    let sw = sliced_wasserstein(samples, reference, DEFAULT_PROJECTIONS, seed)?;
    let mmd = mmd_rbf(samples, reference, None)?;
    let modes = match (dataset.mode_centers(), dataset.mode_std()) {
        (Some(centers), Some(std)) => {
            let radius = DEFAULT_RADIUS_STDS * std;
            let cov = mode_coverage(samples, &centers, radius, DEFAULT_COVERAGE_THRESHOLD)?;
            // No occupied mode means nothing to measure, not a failed evaluation.
            let ratio = match per_mode_variance_ratio(samples, &centers, radius, std) {
                Ok(r) => Some(r),
                Err(Error::Diagnostic(_)) => None,
                Err(e) => return Err(e),
            };
            Some((cov.fraction, cov.histogram, cov.unassigned, ratio))
        }
        _ => None,
    };
    Ok((sw, mmd, modes))
}

/// Everything needed to score one network.
pub struct EvalRequest<'a> {
    pub net: &'a dyn Denoiser,
    pub steps: usize,
    pub dataset: &'a ToyDataset,
    /// Generated and reference sample count.
    pub size: usize,
    /// Seed of the reference data set.
    pub data_seed: u64,
    pub seed: u64,
    /// Trajectory reference for the flow error.
    pub flow_reference: FlowSampler<'a>,
    /// Number of trajectories compared for the flow error.
    pub flow_probes: usize,
}

/// Samples the network, scores it and returns the report with the samples.
pub fn evaluate(req: &EvalRequest<'_>, sch: &Schedule) -> Result<(MetricReport, Vec<SamplePoint>)> {
    let (samples, c) = generate_samples(req.net, req.steps, req.dataset, req.size, req.seed, None, sch)?;
    let reference = generate_dataset(req.dataset.kind(), req.size, req.data_seed)?.points;
    let (sw, mmd, modes) = distribution_metrics(&samples, &reference, req.dataset, req.seed)?;
    let grid = TimeGrid::new(req.steps, sch.timesteps())?;
    let (noise, fc) = sampling_inputs(req.dataset, req.flow_probes, req.seed ^ 0xF10E);
    let flow = flow_preservation_error(
        &FlowSampler {
            net: req.net,
            grid: &grid,
            guidance: None,
        },
        &req.flow_reference,
        &noise,
        &fc,
        sch,
    )?;
    let (coverage, histogram, unassigned, ratio) = match modes {
        Some((f, h, u, r)) => (Some(f), h, u, r),
        None => (None, Vec::new(), req.size, None),
    };
    let report = MetricReport {
        sliced_wasserstein: sw,
        mmd,
        mode_coverage: coverage,
        mode_histogram: histogram,
        unassigned,
        per_mode_variance_ratio: ratio,
        flow_preservation_error: flow,
        sample_count: req.size,
        seed: req.seed,
        step_count: req.steps,
    };
    report.validate()?;
    Ok((report, sample_points(&samples, &c)?))
}
