//! Checkpoints: a JSON manifest plus a raw little-endian `f32` blob.
//!
//! `model.json` names its blob (`model.bin`, same directory) and lists every
//! parameter with its byte offset and shape, in store order. Parameters are
//! narrowed to `f32` on save; saving a loaded checkpoint reproduces both files
//! byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SessionRecord;
use crate::error::{DatError, Result};
use crate::metrics::{LabelOracle, SessionPredictor};
use crate::model::{DatModel, ModelConfig};
use crate::params::ParamStore;

pub const FORMAT: &str = "dat-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Model,
    /// Replays session labels; used to validate evaluation plumbing.
    LabelOracle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub offset: u64,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub kind: CheckpointKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<ModelConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blob: Option<String>,
    #[serde(default)]
    pub params: Vec<ParamEntry>,
}

#[derive(Debug)]
pub enum Checkpoint {
    Model(Box<DatModel>),
    LabelOracle,
}

impl SessionPredictor for Checkpoint {
    fn predict_session(&self, session: &SessionRecord) -> Result<Vec<f64>> {
        match self {
            Checkpoint::Model(m) => m.predict_session(session),
            Checkpoint::LabelOracle => LabelOracle.predict_session(session),
        }
    }
}

fn blob_path(manifest_path: &Path) -> PathBuf {
    manifest_path.with_extension("bin")
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| DatError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| DatError::io(path, e))
}

/// Encodes `params` as an `f32` blob and its parameter table.
pub fn encode_params(params: &ParamStore) -> (Vec<u8>, Vec<ParamEntry>) {
    let mut blob = Vec::with_capacity(params.num_scalars() * 4);
    let mut entries = Vec::with_capacity(params.len());
    for (_, name, t) in params.iter() {
        entries.push(ParamEntry {
            name: name.to_string(),
            offset: blob.len() as u64,
            shape: t.shape().to_vec(),
        });
        for v in t.data() {
            blob.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    (blob, entries)
}

pub fn save_checkpoint(path: &Path, model: &DatModel) -> Result<()> {
    save_params_checkpoint(path, model.config(), model.params())
}

/// Saves `params` under `config`; `params` must match the layout
/// [`DatModel::new`] builds for `config`.
pub fn save_params_checkpoint(path: &Path, config: &ModelConfig, params: &ParamStore) -> Result<()> {
    let (blob, entries) = encode_params(params);
    let bpath = blob_path(path);
    let manifest = CheckpointManifest {
        format: FORMAT.into(),
        version: VERSION,
        kind: CheckpointKind::Model,
        config: Some(config.clone()),
        blob: bpath.file_name().map(|n| n.to_string_lossy().into_owned()),
        params: entries,
    };
    write(&bpath, &blob)?;
    write(path, (serde_json::to_string_pretty(&manifest)? + "\n").as_bytes())
}

pub fn save_oracle_checkpoint(path: &Path) -> Result<()> {
    let manifest = CheckpointManifest {
        format: FORMAT.into(),
        version: VERSION,
        kind: CheckpointKind::LabelOracle,
        config: None,
        blob: None,
        params: Vec::new(),
    };
    write(path, (serde_json::to_string_pretty(&manifest)? + "\n").as_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(|e| DatError::io(path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    let fmt_err = |offset: u64, msg: String| DatError::Format {
        path: path.to_path_buf(),
        offset,
        msg,
    };
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(fmt_err(0, format!("unsupported checkpoint {} v{}", manifest.format, manifest.version)));
    }
    match manifest.kind {
        CheckpointKind::LabelOracle => Ok(Checkpoint::LabelOracle),
        CheckpointKind::Model => {
            let config = manifest
                .config
                .clone()
                .ok_or_else(|| fmt_err(0, "model checkpoint without config".into()))?;
            let blob_name = manifest
                .blob
                .as_deref()
                .ok_or_else(|| fmt_err(0, "model checkpoint without blob".into()))?;
            let bpath = path.parent().unwrap_or(Path::new(".")).join(blob_name);
            let blob = fs::read(&bpath).map_err(|e| DatError::io(&bpath, e))?;
            let mut model = DatModel::new(config)?;
            decode_params_into(&blob, &manifest.params, model.params_mut(), &bpath)?;
            Ok(Checkpoint::Model(Box::new(model)))
        }
    }
}

/// Overwrites `params` from a blob, checking names, shapes and offsets.
pub fn decode_params_into(blob: &[u8], entries: &[ParamEntry], params: &mut ParamStore, path: &Path) -> Result<()> {
    let err = |offset: u64, msg: String| DatError::Format {
        path: path.to_path_buf(),
        offset,
        msg,
    };
    if entries.len() != params.len() {
        return Err(err(0, format!("{} parameters in checkpoint, model has {}", entries.len(), params.len())));
    }
    let mut expected_offset = 0u64;
    let ids: Vec<_> = params.ids().collect();
    for (entry, id) in entries.iter().zip(ids) {
        if entry.name != params.name(id) || entry.shape != params.get(id).shape() {
            return Err(err(
                entry.offset,
                format!(
                    "parameter {} {:?} does not match model parameter {} {:?}",
                    entry.name,
                    entry.shape,
                    params.name(id),
                    params.get(id).shape()
                ),
            ));
        }
        if entry.offset != expected_offset {
            return Err(err(entry.offset, format!("parameter {} at unexpected offset", entry.name)));
        }
        let n = params.get(id).numel();
        let start = entry.offset as usize;
        let end = start + 4 * n;
        if end > blob.len() {
            return Err(err(blob.len() as u64, format!("blob truncated inside {}", entry.name)));
        }
        for (dst, c) in params.get_mut(id).data_mut().iter_mut().zip(blob[start..end].chunks_exact(4)) {
            *dst = f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64;
        }
        expected_offset = end as u64;
    }
    if expected_offset as usize != blob.len() {
        return Err(err(expected_offset, "trailing bytes in parameter blob".into()));
    }
    Ok(())
}
