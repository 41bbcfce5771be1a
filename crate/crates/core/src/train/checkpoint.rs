//! Single-file training checkpoints.
//!
//! ```text
//! magic     8 bytes  "BMLPCKPT"
//! length    u64 LE   manifest byte length
//! manifest  TOML     schema, model spec, training scalars, parameter names
//! records   tensor records: parameters, then first moments, then second moments
//! digest    32 bytes SHA-256 of everything above
//! ```

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::data::Normalization;
use super::engine::{EpochLog, Init, Stage, TrainConfig, TrainState};
use super::optim::AdamW;
use crate::arch::{BiMlp, ModelSpec};
use crate::error::{Error, Result};
use crate::layers::Parameterized;
use crate::tensor::{read_record, FloatTensor, Real, Record};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"BMLPCKPT";
pub const CHECKPOINT_SCHEMA: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema: u32,
    /// `Some("final")` on the last checkpoint of a run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
    pub stage: Stage,
    pub init: Init,
    pub epoch: u64,
    pub step: u64,
    pub moments: usize,
    pub config: TrainConfig,
    pub history: Vec<EpochLog>,
    pub params: Vec<ParamEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<Normalization>,
    pub model: ModelSpec,
}

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let write = || -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

fn push_record<T: Real>(out: &mut Vec<u8>, t: &FloatTensor<T>) {
    // Stored at the model's own precision.
    match T::DTYPE {
        crate::tensor::DType::F64 => Record::F64(t.cast()).write_to(out),
        _ => Record::F32(t.cast()).write_to(out),
    }
}

/// Serialises a training state.
pub fn encode<T: Real>(state: &mut TrainState<T>, tag: Option<&str>) -> Result<Vec<u8>> {
    let mut params = Vec::new();
    let mut values = Vec::new();
    state.model.visit_params("", &mut |n, p| {
        params.push(ParamEntry {
            name: n.to_string(),
            shape: p.value.shape().to_vec(),
        });
        values.push(p.value.clone());
    });
    let manifest = Manifest {
        schema: CHECKPOINT_SCHEMA,
        tag: tag.map(str::to_string),
        stage: state.stage,
        init: state.init,
        epoch: state.epoch,
        step: state.optimizer.step,
        moments: state.optimizer.m.len(),
        config: state.config,
        history: state.history.clone(),
        params,
        normalization: state.normalization.clone(),
        model: state.model.spec().clone(),
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    for t in values.iter().chain(&state.optimizer.m).chain(&state.optimizer.v) {
        push_record(&mut out, t);
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn save<T: Real>(state: &mut TrainState<T>, path: &Path, tag: Option<&str>) -> Result<()> {
    write_atomic(path, &encode(state, tag)?)
}

/// Parses and validates a checkpoint; every structural problem is an error.
pub fn decode<T: Real>(bytes: &[u8]) -> Result<(Manifest, TrainState<T>)> {
    if bytes.len() < CHECKPOINT_MAGIC.len() + 8 + DIGEST_LEN {
        return Err(Error::Checkpoint(format!("file is too short ({} bytes)", bytes.len())));
    }
    if bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("checksum mismatch: file is corrupt or truncated".into()));
    }
    let len = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes")) as usize;
    let text = body
        .get(16..16usize.saturating_add(len))
        .ok_or_else(|| Error::Checkpoint("manifest length exceeds file".into()))?;
    let text = std::str::from_utf8(text).map_err(|_| Error::Checkpoint("manifest is not UTF-8".into()))?;
    let probe: toml::Table = toml::from_str(text).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
    match probe.get("schema").and_then(|v| v.as_integer()) {
        Some(s) if s == CHECKPOINT_SCHEMA as i64 => {}
        Some(s) => {
            return Err(Error::Checkpoint(format!(
                "schema version {s} is not supported (expected {CHECKPOINT_SCHEMA})"
            )))
        }
        None => return Err(Error::Checkpoint("manifest has no schema version".into())),
    }
    let manifest: Manifest = toml::from_str(text).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
    manifest.model.validate()?;

    let mut offset = (16 + len) as u64;
    let mut reader = &body[16 + len..];
    let mut next = |what: &str, shape: &[usize]| -> Result<FloatTensor<T>> {
        let t = read_record(&mut reader, &mut offset)?.into_float::<T>()?;
        if t.shape() != shape {
            return Err(Error::Checkpoint(format!("{what} has shape {:?}, manifest says {shape:?}", t.shape())));
        }
        Ok(t)
    };
    let mut values = Vec::with_capacity(manifest.params.len());
    for p in &manifest.params {
        values.push((p.name.clone(), next(&p.name, &p.shape)?));
    }
    let mut model = BiMlp::<T>::new(&manifest.model, 0)?;
    model.load_values(values)?;

    let mut trainable_shapes = Vec::new();
    model.visit_params("", &mut |_, p| {
        if p.trainable() {
            trainable_shapes.push(p.value.shape().to_vec());
        }
    });
    if manifest.moments != 0 && manifest.moments != trainable_shapes.len() {
        return Err(Error::Checkpoint(format!(
            "{} optimizer moments for {} trainable tensors",
            manifest.moments,
            trainable_shapes.len()
        )));
    }
    let mut opt = AdamW::new(manifest.config.optimizer);
    opt.step = manifest.step;
    for s in trainable_shapes.iter().take(manifest.moments) {
        opt.m.push(next("first moment", s)?);
    }
    for s in trainable_shapes.iter().take(manifest.moments) {
        opt.v.push(next("second moment", s)?);
    }
    if !reader.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes after the last record", reader.len())));
    }
    let state = TrainState {
        model,
        optimizer: opt,
        stage: manifest.stage,
        init: manifest.init,
        config: manifest.config,
        epoch: manifest.epoch,
        history: manifest.history.clone(),
        normalization: manifest.normalization.clone(),
    };
    Ok((manifest, state))
}

pub fn load<T: Real>(path: &Path) -> Result<(Manifest, TrainState<T>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}
