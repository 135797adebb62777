//! Command-line entry point: training, distillation, sampling and evaluation.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use padd::autodiff::Tensor;
use padd::checkpoint::{load_checkpoint, CheckpointMeta};
use padd::config::{parse_config, PipelineConfig, DEFAULT_TEACHER_STEPS};
use padd::diffusion::{sdedit, Schedule, TimeGrid};
use padd::distill::{run_levels_from, run_pipeline, JsonLinesSink};
use padd::eval::{
    evaluate, export_report, generate_dataset, generate_samples, parse_samples_csv, sample_points, samples_csv,
    scatter_svg, DatasetKind, EvalRequest, FlowSampler, ToyDataset,
};
use padd::nets::{Condition, DenoiserNet, GuidanceConfig};
use padd::{Error, Result};

const LOG_FILE: &str = "train.jsonl";
const DEFAULT_COUNT: usize = 2000;
const FLOW_PROBES: usize = 256;

#[derive(Parser)]
#[command(
    name = "padd",
    version,
    about = "Progressive adversarial diffusion distillation on 2-D toy data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the teacher only.
    TrainTeacher(TrainArgs),
    /// Train the teacher (or load one) and run every distillation stage.
    Distill(DistillArgs),
    /// Draw samples from a checkpoint.
    Sample(SampleArgs),
    /// Noise dataset points to an intermediate time and denoise them.
    Sdedit(SdeditArgs),
    /// Sample a checkpoint and score it against fresh dataset samples.
    Eval(EvalArgs),
    /// Render a samples CSV as a scatter plot.
    Plot(PlotArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the config's `out_dir`, then `.`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DistillArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Start from this teacher instead of training one.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Sampling steps; defaults to the steps the checkpoint was trained for.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_COUNT)]
    count: usize,
    /// Classifier-free guidance scale.
    #[arg(long)]
    guidance: Option<f64>,
}

#[derive(Args)]
struct SdeditArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    t_start: usize,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_COUNT)]
    count: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    /// Trajectory reference for the flow error; defaults to the checkpoint
    /// itself on the 128-step grid.
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Supplies the reference set size and seed.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct PlotArgs {
    /// Samples CSV to render.
    #[arg(long)]
    samples: PathBuf,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("padd: {e}");
            match e {
                Error::Usage(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::TrainTeacher(a) => train(&a, None, true),
        Command::Distill(a) => train(&a.train, a.checkpoint.as_deref(), false),
        Command::Sample(a) => sample(&a),
        Command::Sdedit(a) => run_sdedit(&a),
        Command::Eval(a) => run_eval(&a),
        Command::Plot(a) => plot(&a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn load_config(args: &TrainArgs) -> Result<(PipelineConfig, PathBuf)> {
    let mut cfg = parse_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let out = args
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    create_dir(&out)?;
    Ok((cfg, out))
}

fn train(args: &TrainArgs, teacher: Option<&Path>, teacher_only: bool) -> Result<()> {
    let (mut cfg, out) = load_config(args)?;
    if teacher_only {
        cfg.stages.clear();
    }
    let dataset = cfg.dataset();
    let log_path = out.join(LOG_FILE);
    let file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut sink = JsonLinesSink::new(BufWriter::new(file), &log_path);
    let result = match teacher {
        None => run_pipeline(&dataset, &cfg, &mut sink, Some(&out)),
        Some(path) => {
            let (net, meta) = load_checkpoint(path)?;
            check_compatible(&cfg, &meta, path)?;
            let stages = cfg.stages.clone();
            run_levels_from(&dataset, &cfg, net, cfg.teacher_steps(), &stages, &mut sink, Some(&out))
        }
    };
    let flushed = sink
        .into_inner()
        .into_inner()
        .map_err(|e| Error::io(&log_path, e.into_error()));
    let output = result?;
    flushed?;
    for a in &output.artifacts {
        if let Some(p) = &a.checkpoint {
            println!("{}: {}", a.tag, p.display());
        }
    }
    Ok(())
}

fn check_compatible(cfg: &PipelineConfig, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    if meta.schedule != cfg.schedule {
        return Err(Error::Usage(format!(
            "{} was trained with a different noise schedule",
            path.display()
        )));
    }
    if meta.dataset != cfg.dataset.kind.as_str() {
        return Err(Error::Usage(format!(
            "{} was trained on {}, config names {}",
            path.display(),
            meta.dataset,
            cfg.dataset.kind
        )));
    }
    Ok(())
}

struct Loaded {
    net: DenoiserNet,
    meta: CheckpointMeta,
    dataset: ToyDataset,
    sch: Schedule,
}

fn load(path: &Path) -> Result<Loaded> {
    let (net, meta) = load_checkpoint(path)?;
    let kind: DatasetKind = meta.dataset.parse()?;
    let sch = Schedule::new(meta.schedule)?;
    Ok(Loaded {
        net,
        dataset: ToyDataset::new(kind),
        sch,
        meta,
    })
}

/// Steps a checkpoint was distilled for: its stage tag, or 128 for the teacher.
fn native_steps(meta: &CheckpointMeta) -> usize {
    meta.stage.parse().unwrap_or(DEFAULT_TEACHER_STEPS)
}

fn sample(a: &SampleArgs) -> Result<()> {
    let l = load(&a.checkpoint)?;
    let steps = a.steps.unwrap_or_else(|| native_steps(&l.meta));
    let guidance = a.guidance.map(|scale| GuidanceConfig { scale });
    let (x, c) = generate_samples(&l.net, steps, &l.dataset, a.count, a.seed, guidance.as_ref(), &l.sch)?;
    create_dir(&a.out)?;
    write(
        &a.out.join("samples.csv"),
        samples_csv(&sample_points(&x, &c)?).as_bytes(),
    )
}

fn run_sdedit(a: &SdeditArgs) -> Result<()> {
    let l = load(&a.checkpoint)?;
    let steps = a.steps.unwrap_or_else(|| native_steps(&l.meta));
    let full = TimeGrid::new(steps, l.sch.timesteps())?;
    let trained = &l.meta.trained_timesteps;
    let grid = if trained.is_empty() || trained.contains(&a.t_start) {
        full.starting_at(a.t_start)?
    } else if full.contains(a.t_start) {
        full
    } else {
        return Err(Error::Domain(format!(
            "t-start {} is neither on the {steps}-step grid nor a trained start time",
            a.t_start
        )));
    };
    let data = generate_dataset(l.dataset.kind(), a.count, a.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed ^ 0x5DED);
    let eps: Vec<f64> = (0..2 * a.count).map(|_| StandardNormal.sample(&mut rng)).collect();
    let eps = Tensor::new(vec![a.count, 2], eps)?;
    let c: Vec<Condition> = data.labels.iter().map(|&k| Condition::Class(k)).collect();
    let x = sdedit(&l.net, &data.points, &eps, a.t_start, &grid, &c, &l.sch)?;
    create_dir(&a.out)?;
    write(
        &a.out.join("samples.csv"),
        samples_csv(&sample_points(&x, &c)?).as_bytes(),
    )
}

fn run_eval(a: &EvalArgs) -> Result<()> {
    let l = load(&a.checkpoint)?;
    let steps = a.steps.unwrap_or_else(|| native_steps(&l.meta));
    let (size, data_seed) = match &a.config {
        Some(p) => {
            let cfg = parse_config(p)?;
            (cfg.dataset.size, cfg.dataset.seed)
        }
        None => (DEFAULT_COUNT, 0),
    };
    let reference = match &a.teacher {
        Some(p) => load(p)?.net,
        None => l.net.clone(),
    };
    let ref_grid = TimeGrid::new(DEFAULT_TEACHER_STEPS, l.sch.timesteps())?;
    let req = EvalRequest {
        net: &l.net,
        steps,
        dataset: &l.dataset,
        size,
        data_seed,
        seed: a.seed,
        flow_reference: FlowSampler {
            net: &reference,
            grid: &ref_grid,
            guidance: None,
        },
        flow_probes: FLOW_PROBES,
    };
    let (report, points) = evaluate(&req, &l.sch)?;
    create_dir(&a.out)?;
    export_report(&report, &points, &a.out)?;
    Ok(())
}

fn plot(a: &PlotArgs) -> Result<()> {
    let text = fs::read_to_string(&a.samples).map_err(|e| Error::io(&a.samples, e))?;
    let points = parse_samples_csv(&text)?;
    create_dir(&a.out)?;
    write(&a.out.join("scatter.svg"), scatter_svg(&points).as_bytes())
}
