use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::DiscriminatorForm;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Teacher,
    Mse,
    Conditional,
    Unconditional,
    /// Unconditional training of the whole network after the adapter merge.
    Full,
    Conversion,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogRecord {
    StageStart {
        stage: String,
        teacher_steps: usize,
        student_steps: usize,
    },
    PhaseStart {
        stage: String,
        phase: Phase,
        iterations: usize,
    },
    Iteration {
        stage: String,
        phase: Phase,
        iteration: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        loss: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        d_loss: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        g_loss: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        p_real: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        p_fake: Option<f64>,
    },
    /// Mean jump error on the fixed probe set.
    Probe {
        stage: String,
        phase: Phase,
        iteration: usize,
        jump_error: f64,
    },
    /// Trajectory-level flow preservation error against the stage teacher.
    FlowProbe {
        stage: String,
        phase: Phase,
        iteration: usize,
        error: f64,
    },
    DiscriminatorInit {
        stage: String,
        phase: Phase,
        form: DiscriminatorForm,
    },
    LoraAttach {
        stage: String,
        rank: usize,
    },
    LoraMerge {
        stage: String,
    },
    X0Conversion {
        stage: String,
        iterations: usize,
        final_loss: f64,
    },
    Checkpoint {
        stage: String,
        path: String,
    },
    StageEnd {
        stage: String,
    },
}

pub trait LogSink {
    fn record(&mut self, rec: LogRecord) -> Result<()>;
}

impl LogSink for Vec<LogRecord> {
    fn record(&mut self, rec: LogRecord) -> Result<()> {
        self.push(rec);
        Ok(())
    }
}

/// Discards records.
impl LogSink for () {
    fn record(&mut self, _rec: LogRecord) -> Result<()> {
        Ok(())
    }
}

/// Writes one JSON object per line.
pub struct JsonLinesSink<W: Write> {
    out: W,
    path: std::path::PathBuf,
}

impl<W: Write> JsonLinesSink<W> {
    pub fn new(out: W, path: impl Into<std::path::PathBuf>) -> Self {
        Self { out, path: path.into() }
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write> LogSink for JsonLinesSink<W> {
    fn record(&mut self, rec: LogRecord) -> Result<()> {
        let line = serde_json::to_string(&rec).expect("log records serialize");
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))
    }
}
