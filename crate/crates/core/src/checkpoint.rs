//! Binary network checkpoints.
//!
//! Layout: magic `SLTN`, format version (u32 LE), header length (u32 LE), a
//! JSON header, then every weight as an f32 LE in declared layer order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::diffusion::{PredictionMode, ScheduleParams};
use crate::error::{Error, Result};
use crate::nets::{DenoiserConfig, DenoiserNet};

pub const MAGIC: &[u8; 4] = b"SLTN";
pub const FORMAT_VERSION: u32 = 1;

/// Provenance stored alongside the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    /// Pipeline stage that produced the network (`teacher`, `32`, ... `1`).
    pub stage: String,
    pub seed: u64,
    pub schedule: ScheduleParams,
    pub dataset: String,
    /// Start times the network was trained to jump from; empty means all.
    pub trained_timesteps: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    architecture: DenoiserConfig,
    prediction_mode: PredictionMode,
    schedule: ScheduleParams,
    stage: String,
    seed: u64,
    dataset: String,
    trained_timesteps: Vec<usize>,
    created_by: String,
    weight_count: usize,
}

fn created_by() -> String {
    format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))
}

/// Serializes a network without adapters.
pub fn encode(net: &DenoiserNet, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    if net.lora().is_some() {
        return Err(Error::Usage("merge adapters before saving a checkpoint".into()));
    }
    let header = Header {
        architecture: net.config().clone(),
        prediction_mode: net.mode(),
        schedule: meta.schedule,
        stage: meta.stage.clone(),
        seed: meta.seed,
        dataset: meta.dataset.clone(),
        trained_timesteps: meta.trained_timesteps.clone(),
        created_by: created_by(),
        weight_count: net.num_params(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + header.len() + 4 * net.num_params());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for p in net.params() {
        for &v in p.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("four bytes")))
        .ok_or_else(|| corrupt("file truncated inside the preamble"))
}

pub fn decode(bytes: &[u8]) -> Result<(DenoiserNet, CheckpointMeta)> {
    if bytes.get(..4) != Some(MAGIC.as_slice()) {
        return Err(corrupt("bad magic bytes"));
    }
    let version = read_u32(bytes, 4)?;
    if version != FORMAT_VERSION {
        return Err(corrupt(format!("unsupported format version {version}")));
    }
    let header_len = read_u32(bytes, 8)? as usize;
    let header_bytes = bytes
        .get(12..12 + header_len)
        .ok_or_else(|| corrupt("file truncated inside the header"))?;
    let header: Header =
        serde_json::from_slice(header_bytes).map_err(|e| corrupt(format!("unreadable header: {e}")))?;
    header
        .architecture
        .validate()
        .map_err(|e| corrupt(format!("invalid architecture: {e}")))?;
    let shapes = header.architecture.param_shapes();
    let expected: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    if header.weight_count != expected {
        return Err(corrupt(format!(
            "header declares {} weights, architecture needs {expected}",
            header.weight_count
        )));
    }
    let body = &bytes[12 + header_len..];
    if body.len() != 4 * expected {
        return Err(corrupt(format!(
            "expected {} weight bytes, found {}",
            4 * expected,
            body.len()
        )));
    }
    let mut values = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("four bytes")) as f64);
    let params = shapes
        .into_iter()
        .map(|shape| {
            let n = shape.iter().product();
            Tensor::new(shape, values.by_ref().take(n).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    let net = DenoiserNet::from_parts(header.architecture, header.prediction_mode, params)?;
    let meta = CheckpointMeta {
        stage: header.stage,
        seed: header.seed,
        schedule: header.schedule,
        dataset: header.dataset,
        trained_timesteps: header.trained_timesteps,
    };
    Ok((net, meta))
}

pub fn save_checkpoint(net: &DenoiserNet, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let bytes = encode(net, meta)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(DenoiserNet, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::Condition;

    fn net(mode: PredictionMode) -> DenoiserNet {
        let cfg = DenoiserConfig::new(2, vec![8, 8], 3, 1000);
        DenoiserNet::init(cfg, mode, 4).unwrap()
    }

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            stage: "teacher".into(),
            seed: 4,
            schedule: ScheduleParams::default(),
            dataset: "eight-gaussians".into(),
            trained_timesteps: vec![],
        }
    }

    #[test]
    fn reencoding_is_byte_identical() {
        let bytes = encode(&net(PredictionMode::Epsilon), &meta()).unwrap();
        assert_eq!(&bytes[..4], b"SLTN");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        let (loaded, m) = decode(&bytes).unwrap();
        assert_eq!(m, meta());
        assert_eq!(encode(&loaded, &m).unwrap(), bytes);
    }

    #[test]
    fn outputs_survive_f32_storage() {
        let n = net(PredictionMode::X0);
        let (loaded, _) = decode(&encode(&n, &meta()).unwrap()).unwrap();
        assert_eq!(loaded.mode(), PredictionMode::X0);
        let x = Tensor::from_rows(&[vec![0.3, -1.2], vec![2.0, 0.5]]).unwrap();
        let c = [Condition::Class(2), Condition::Null];
        let a = n.denoise(&x, &[10, 900], &c).unwrap();
        let b = loaded.denoise(&x, &[10, 900], &c).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-6);
    }

    #[test]
    fn damaged_files_are_rejected() {
        let bytes = encode(&net(PredictionMode::Epsilon), &meta()).unwrap();
        for cut in [0, 3, 10, 20, bytes.len() - 1] {
            assert!(
                matches!(decode(&bytes[..cut]), Err(Error::CorruptCheckpoint(_))),
                "{cut}"
            );
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode(&extra), Err(Error::CorruptCheckpoint(_))));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(decode(&magic), Err(Error::CorruptCheckpoint(_))));
        let mut version = bytes;
        version[4] = 2;
        assert!(matches!(decode(&version), Err(Error::CorruptCheckpoint(_))));
    }

    #[test]
    fn adapters_must_be_merged_first() {
        let mut n = net(PredictionMode::Epsilon);
        n.attach_lora(2, 0).unwrap();
        assert!(matches!(encode(&n, &meta()), Err(Error::Usage(_))));
    }
}
