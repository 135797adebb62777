//! Toy datasets, distribution distances, mode diagnostics and report export.

mod datasets;
mod evaluate;
mod export;
mod metrics;

pub use datasets::{
    generate_dataset, DatasetKind, LabeledPoints, ToyDataset, EIGHT_GAUSSIANS_RADIUS, EIGHT_GAUSSIANS_STD,
};
pub use evaluate::{distribution_metrics, evaluate, generate_samples, sampling_inputs, EvalRequest, ModeSummary};
pub use export::{
    export_report, parse_samples_csv, sample_points, samples_csv, scatter_svg, ReportFiles, SamplePoint, PALETTE,
};
pub use metrics::{
    assign_modes, flow_preservation_error, median_pairwise_distance, mmd_rbf, mode_coverage, per_mode_variance_ratio,
    sliced_wasserstein, FlowSampler, MetricReport, ModeCoverage, DEFAULT_COVERAGE_THRESHOLD, DEFAULT_PROJECTIONS,
    DEFAULT_RADIUS_STDS,
};
