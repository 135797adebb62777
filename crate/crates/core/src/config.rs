//! TOML pipeline configuration.
//!
//! A minimal file names the dataset and lists the stages; everything else
//! falls back to the defaults below.
//!
//! ```toml
//! [dataset]
//! kind = "eight-gaussians"
//!
//! [[stages]]
//! teacher_steps = 128
//! student_steps = 32
//! objective = "mse"
//!
//! [[stages]]
//! teacher_steps = 32
//! student_steps = 8
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::ScheduleParams;
use crate::distill::{ConversionConfig, LevelConfig, LevelObjective, ProbeConfig, TeacherConfig};
use crate::error::{Error, Result};
use crate::eval::{DatasetKind, ToyDataset};
use crate::nets::DenoiserConfig;

/// Sampling steps of the teacher when no stage says otherwise.
pub const DEFAULT_TEACHER_STEPS: usize = 128;

fn default_dataset_size() -> usize {
    2000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Reference sample count used by `eval`.
    #[serde(default = "default_dataset_size")]
    pub size: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_widths() -> Vec<usize> {
    vec![128, 128, 128]
}
fn default_time_dim() -> usize {
    crate::nets::DEFAULT_TIME_DIM
}
fn default_cond_dim() -> usize {
    crate::nets::DEFAULT_COND_DIM
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    #[serde(default = "default_widths")]
    pub widths: Vec<usize>,
    #[serde(default = "default_time_dim")]
    pub time_dim: usize,
    #[serde(default = "default_cond_dim")]
    pub cond_dim: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            widths: default_widths(),
            time_dim: default_time_dim(),
            cond_dim: default_cond_dim(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub schedule: ScheduleParams,
    #[serde(default)]
    pub net: NetConfig,
    #[serde(default)]
    pub teacher: TeacherConfig,
    /// Distillation levels in execution order.
    pub stages: Vec<LevelConfig>,
    #[serde(default)]
    pub conversion: ConversionConfig,
    #[serde(default)]
    pub probes: ProbeConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl PipelineConfig {
    /// The full schedule: 128 -> 32 by guided MSE, then 32 -> 8 -> 4 -> 2 -> 1
    /// adversarially.
    pub fn standard(kind: DatasetKind) -> Self {
        let mut stages = vec![LevelConfig::new(128, 32, LevelObjective::Mse)];
        for (t, s) in [(32, 8), (8, 4), (4, 2), (2, 1)] {
            stages.push(LevelConfig::new(t, s, LevelObjective::Adversarial));
        }
        Self {
            dataset: DatasetConfig {
                kind,
                size: default_dataset_size(),
                seed: 0,
            },
            schedule: ScheduleParams::default(),
            net: NetConfig::default(),
            teacher: TeacherConfig::default(),
            stages,
            conversion: ConversionConfig::default(),
            probes: ProbeConfig::default(),
            seed: 0,
            out_dir: None,
        }
    }

    pub fn dataset(&self) -> ToyDataset {
        ToyDataset::new(self.dataset.kind)
    }

    pub fn teacher_steps(&self) -> usize {
        self.stages.first().map_or(DEFAULT_TEACHER_STEPS, |l| l.teacher_steps)
    }

    pub fn denoiser_config(&self, dataset: &ToyDataset) -> DenoiserConfig {
        DenoiserConfig {
            data_dim: 2,
            widths: self.net.widths.clone(),
            classes: dataset.classes(),
            time_dim: self.net.time_dim,
            cond_dim: self.net.cond_dim,
            max_time: self.schedule.timesteps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        crate::diffusion::Schedule::new(self.schedule)?;
        self.denoiser_config(&self.dataset())
            .validate()
            .map_err(|e| Error::config("net", e.to_string()))?;
        if self.dataset.size == 0 {
            return Err(Error::config("dataset.size", "must be positive"));
        }
        if self.teacher.batch_size == 0 || self.teacher.heldout_size == 0 {
            return Err(Error::config("teacher", "batch sizes must be positive"));
        }
        if !(self.teacher.learning_rate > 0.0) {
            return Err(Error::config("teacher.learning_rate", "must be positive"));
        }
        if self.conversion.batch_size == 0 {
            return Err(Error::config("conversion.batch_size", "must be positive"));
        }
        if !(self.conversion.learning_rate > 0.0) {
            return Err(Error::config("conversion.learning_rate", "must be positive"));
        }
        let t_max = self.schedule.timesteps;
        if let Some(&t) = self.conversion.timesteps.iter().find(|&&t| t > t_max) {
            return Err(Error::config(
                "conversion.timesteps",
                format!("time {t} outside [0, {t_max}]"),
            ));
        }
        if self.probes.size == 0 {
            return Err(Error::config("probes.size", "must be positive"));
        }
        if self.teacher_steps() == 0 || self.teacher_steps() > t_max {
            return Err(Error::config(
                "stages[0].teacher_steps",
                format!("must lie in [1, {t_max}]"),
            ));
        }
        validate_levels(&self.stages, self.teacher_steps(), t_max)
    }
}

/// Checks that `levels` chain from a `start_steps` network: each level's
/// teacher is the previous student, step counts strictly decrease, and
/// every skip-level reference exists by the time it is needed.
pub fn validate_levels(levels: &[LevelConfig], start_steps: usize, timesteps: usize) -> Result<()> {
    let mut available = vec![start_steps];
    let mut converted = false;
    for (i, level) in levels.iter().enumerate() {
        let key = format!("stages[{i}]");
        let expected = *available.last().expect("start is present");
        if level.teacher_steps != expected {
            return Err(Error::config(
                format!("{key}.teacher_steps"),
                format!(
                    "stage {}->{} must start from the previous {expected}-step student",
                    level.teacher_steps, level.student_steps
                ),
            ));
        }
        level.validate(&key, timesteps)?;
        if level.objective == LevelObjective::Adversarial {
            let skip = level.resolved_skip_level(&available);
            if !available.contains(&skip) {
                return Err(Error::config(
                    format!("{key}.skip_level_steps"),
                    format!("no {skip}-step network precedes this stage"),
                ));
            }
        }
        if level.resolved_convert() {
            if converted {
                return Err(Error::config(
                    format!("{key}.convert_to_x0"),
                    "the network is already in x0-prediction",
                ));
            }
            converted = true;
        }
        available.push(level.student_steps);
    }
    Ok(())
}

fn parse_error(e: serde_path_to_error::Error<toml::de::Error>) -> Error {
    let path = e.path().to_string();
    let key = if path == "." { "<root>".to_string() } else { path };
    Error::config(key, e.into_inner().message().to_string())
}

/// Parses and validates a config from TOML text.
pub fn parse_config_str(text: &str) -> Result<PipelineConfig> {
    let de = toml::de::Deserializer::parse(text).map_err(|e| Error::config("<root>", e.message().to_string()))?;
    let cfg: PipelineConfig = serde_path_to_error::deserialize(de).map_err(parse_error)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<PipelineConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[dataset]
kind = "eight-gaussians"

[[stages]]
teacher_steps = 128
student_steps = 32
objective = "mse"

[[stages]]
teacher_steps = 32
student_steps = 8
"#;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = parse_config_str(MINIMAL).unwrap();
        assert_eq!(cfg.schedule, ScheduleParams::default());
        assert_eq!(cfg.net.widths, vec![128, 128, 128]);
        assert_eq!(cfg.teacher.iterations, 20_000);
        assert_eq!(cfg.stages[1].objective, LevelObjective::Adversarial);
        assert_eq!(cfg.stages[1].conditional_iterations, 3000);
        assert_eq!(cfg.teacher_steps(), 128);
    }

    #[test]
    fn standard_config_is_valid() {
        let cfg = PipelineConfig::standard(DatasetKind::EightGaussians);
        cfg.validate().unwrap();
        let round = toml::to_string(&cfg).unwrap();
        assert_eq!(parse_config_str(&round).unwrap(), cfg);
    }

    #[test]
    fn shipped_config_is_the_standard_schedule() {
        let text = include_str!("../../../configs/eight-gaussians.toml");
        let parsed = parse_config_str(text).unwrap();
        let standard = PipelineConfig::standard(DatasetKind::EightGaussians);
        let sched = |c: &PipelineConfig| {
            c.stages
                .iter()
                .map(|l| (l.teacher_steps, l.student_steps, l.objective))
                .collect::<Vec<_>>()
        };
        assert_eq!(sched(&parsed), sched(&standard));
        assert_eq!(parsed.teacher, standard.teacher);
        assert_eq!(parsed.net, standard.net);
        assert_eq!(parsed.dataset, standard.dataset);
    }

    #[test]
    fn indivisible_stage_is_named() {
        let text = MINIMAL.replace("student_steps = 8", "student_steps = 5");
        let err = parse_config_str(&text).unwrap_err().to_string();
        assert!(err.contains("stages[1]") && err.contains("32->5"), "{err}");
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = parse_config_str(&format!("foo = 1\n{MINIMAL}"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("foo"), "{err}");
        let nested = MINIMAL.replace("student_steps = 8", "student_steps = 8\nbar = 2");
        let err = parse_config_str(&nested).unwrap_err().to_string();
        assert!(err.contains("bar") && err.contains("stages[1]"), "{err}");
    }

    #[test]
    fn type_errors_carry_the_key_path() {
        let text = MINIMAL.replace("student_steps = 8", "student_steps = \"eight\"");
        let err = parse_config_str(&text).unwrap_err().to_string();
        assert!(err.contains("stages[1].student_steps"), "{err}");
    }

    #[test]
    fn missing_required_keys_are_reported() {
        let err = parse_config_str("[dataset]\nkind = \"spiral\"\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("stages"), "{err}");
    }

    #[test]
    fn broken_chains_are_rejected() {
        let text = MINIMAL.replace("teacher_steps = 32", "teacher_steps = 64");
        let err = parse_config_str(&text).unwrap_err().to_string();
        assert!(err.contains("stages[1].teacher_steps"), "{err}");
    }
}
