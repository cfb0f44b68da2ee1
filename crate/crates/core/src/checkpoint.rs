//! Versioned binary checkpoints.
//!
//! Layout: 8-byte magic, u32 format version, u32 metadata length, JSON
//! metadata block, little-endian f64 payload (theta, velocity, batch-norm
//! buffers), and a trailing SHA-256 over everything before it. Loads are
//! all-or-nothing: any mismatch fails before a single field is used.

use crate::error::{Error, Result};
use crate::model::{build_model, EncoderSpec, PredictorSpec};
use crate::trainer::TrainState;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::{Path, PathBuf};

const MAGIC: &[u8; 8] = b"SIAMCKP\x01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct CheckpointHandle {
    pub path: PathBuf,
    pub format_version: u32,
    pub config_digest: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    config_digest: String,
    encoder: EncoderSpec,
    predictor: PredictorSpec,
    global_step: u64,
    epoch: u64,
    steps_per_epoch: u64,
    seed: u64,
    theta_len: u64,
    /// (buffer name, channel count) in model order.
    buffers: Vec<(String, u64)>,
}

fn push_f64s(out: &mut Vec<u8>, vals: &[f64]) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Integrity(format!(
                "checkpoint truncated: wanted {} bytes at offset {}, file has {}",
                n,
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn save_checkpoint(state: &TrainState, config_digest: &str, path: &Path) -> Result<CheckpointHandle> {
    let meta = Meta {
        config_digest: config_digest.to_string(),
        encoder: state.params.encoder_spec().clone(),
        predictor: state.params.predictor_spec().clone(),
        global_step: state.global_step as u64,
        epoch: state.epoch as u64,
        steps_per_epoch: state.steps_per_epoch as u64,
        seed: state.seed,
        theta_len: state.params.total_dim() as u64,
        buffers: state
            .params
            .buffers()
            .iter()
            .map(|b| (b.name.clone(), b.mean.len() as u64))
            .collect(),
    };
    let meta_json = serde_json::to_vec(&meta).expect("meta serialize");

    let mut out = Vec::with_capacity(16 + meta_json.len() + state.params.total_dim() * 16);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta_json);
    push_f64s(&mut out, state.params.theta());
    push_f64s(&mut out, &state.velocity);
    for b in state.params.buffers() {
        push_f64s(&mut out, &b.mean);
        push_f64s(&mut out, &b.var);
    }
    let digest: [u8; 32] = Sha256::digest(&out).into();
    out.extend_from_slice(&digest);
    fs::write(path, &out)?;
    Ok(CheckpointHandle {
        path: path.to_path_buf(),
        format_version: FORMAT_VERSION,
        config_digest: config_digest.to_string(),
    })
}

/// Load and validate a checkpoint. When `expected_digest` is given, the
/// stored config digest must match it; pass None to accept any (e.g. for
/// inspection tools).
pub fn load_checkpoint(path: &Path, expected_digest: Option<&str>) -> Result<(TrainState, CheckpointHandle)> {
    let buf = fs::read(path)?;
    if buf.len() < MAGIC.len() + 4 + 4 + 32 {
        return Err(Error::Integrity(format!(
            "checkpoint file too short ({} bytes): truncated or not a checkpoint",
            buf.len()
        )));
    }
    let (body, stored_hash) = buf.split_at(buf.len() - 32);
    let hash: [u8; 32] = Sha256::digest(body).into();
    if hash != stored_hash {
        return Err(Error::Integrity("checkpoint hash mismatch: file corrupted".into()));
    }

    let mut r = Reader { buf: body, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Integrity("bad magic: not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Incompatible(format!(
            "checkpoint format version {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    let meta_len = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
    let meta: Meta = serde_json::from_slice(r.take(meta_len)?)
        .map_err(|e| Error::Integrity(format!("checkpoint metadata unreadable: {e}")))?;
    if let Some(expect) = expected_digest {
        if meta.config_digest != expect {
            return Err(Error::Incompatible(format!(
                "checkpoint was produced under config digest {} but {} was requested",
                meta.config_digest, expect
            )));
        }
    }

    let mut params = build_model(&meta.encoder, &meta.predictor, meta.seed)?;
    if params.total_dim() as u64 != meta.theta_len {
        return Err(Error::Integrity(format!(
            "metadata says {} parameters, rebuilt model has {}",
            meta.theta_len,
            params.total_dim()
        )));
    }
    let theta = r.f64s(params.total_dim())?;
    let velocity = r.f64s(params.total_dim())?;
    params.set_theta(&theta)?;

    let declared: Vec<(String, u64)> = params
        .buffers()
        .iter()
        .map(|b| (b.name.clone(), b.mean.len() as u64))
        .collect();
    if declared != meta.buffers {
        return Err(Error::Integrity("batch-norm buffer layout differs from metadata".into()));
    }
    for i in 0..params.buffers().len() {
        let c = params.buffers()[i].mean.len();
        let mean = r.f64s(c)?;
        let var = r.f64s(c)?;
        let b = &mut params.buffers_mut()[i];
        b.mean = mean;
        b.var = var;
    }
    if r.pos != body.len() {
        return Err(Error::Integrity(format!(
            "{} trailing bytes after checkpoint payload",
            body.len() - r.pos
        )));
    }

    let state = TrainState {
        params,
        velocity,
        global_step: meta.global_step as usize,
        epoch: meta.epoch as usize,
        steps_per_epoch: meta.steps_per_epoch as usize,
        seed: meta.seed,
    };
    let handle = CheckpointHandle {
        path: path.to_path_buf(),
        format_version: version,
        config_digest: meta.config_digest,
    };
    Ok((state, handle))
}
