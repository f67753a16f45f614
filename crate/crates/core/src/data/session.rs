//! Session records and their on-disk directory layout.
//!
//! ```text
//! <session>/manifest.json
//! <session>/target/{opensmile,w2vbert,clip,openface,openpose,labels}.datf
//! <session>/partner/{same}
//! ```
//!
//! Label files are `T × 1`. Partner labels are optional; target labels may
//! be absent for prediction-only sessions.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::datf::{read_matrix, write_matrix};
use crate::error::{DatError, Result};
use crate::features::{FeatureBundle, FeatureDims, Stream};
use crate::tensor::Tensor;

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Target,
    Partner,
}

impl Role {
    pub fn dir_name(self) -> &'static str {
        match self {
            Role::Target => "target",
            Role::Partner => "partner",
        }
    }

    fn parse(s: &str) -> Option<Role> {
        match s {
            "target" => Some(Role::Target),
            "partner" => Some(Role::Partner),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoleData {
    pub features: FeatureBundle,
    pub labels: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SessionRecord {
    pub session_id: String,
    pub frame_rate_hz: f64,
    pub feature_dims: FeatureDims,
    pub target: RoleData,
    pub partner: Option<RoleData>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionManifest {
    pub schema_version: u32,
    pub session_id: String,
    pub frame_rate_hz: f64,
    pub num_frames: usize,
    pub feature_dims: FeatureDims,
    pub roles: Vec<String>,
}

impl SessionRecord {
    pub fn num_frames(&self) -> usize {
        self.target.features.len()
    }

    pub fn role(&self, role: Role) -> Result<&RoleData> {
        match role {
            Role::Target => Ok(&self.target),
            Role::Partner => self.partner.as_ref().ok_or_else(|| {
                DatError::Data(format!("session {} has no partner role", self.session_id))
            }),
        }
    }

    pub fn labels(&self) -> Option<&[f64]> {
        self.target.labels.as_deref()
    }

    /// Checks the row-count, dimension and label-range invariants.
    pub fn validate(&self) -> Result<()> {
        let t = self.num_frames();
        let roles = std::iter::once((Role::Target, &self.target))
            .chain(self.partner.as_ref().map(|p| (Role::Partner, p)));
        for (role, data) in roles {
            for s in Stream::ALL {
                let m = data.features.get(s);
                if m.shape()[0] != t {
                    return Err(DatError::Data(format!(
                        "{}/{}: {} rows, expected {t}",
                        role.dir_name(),
                        s.file_stem(),
                        m.shape()[0]
                    )));
                }
                if m.shape()[1] != self.feature_dims.get(s) {
                    return Err(DatError::Data(format!(
                        "{}/{}: dim {} but manifest says {}",
                        role.dir_name(),
                        s.file_stem(),
                        m.shape()[1],
                        self.feature_dims.get(s)
                    )));
                }
            }
            if let Some(labels) = &data.labels {
                if labels.len() != t {
                    return Err(DatError::Data(format!(
                        "{}/labels: {} rows, expected {t}",
                        role.dir_name(),
                        labels.len()
                    )));
                }
                if let Some(i) = labels.iter().position(|v| !(0.0..=1.0).contains(v)) {
                    return Err(DatError::Data(format!(
                        "{}/labels: frame {i} has value {} outside [0, 1]",
                        role.dir_name(),
                        labels[i]
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn manifest(&self) -> SessionManifest {
        let mut roles = vec![Role::Target.dir_name().to_string()];
        if self.partner.is_some() {
            roles.push(Role::Partner.dir_name().to_string());
        }
        SessionManifest {
            schema_version: SCHEMA_VERSION,
            session_id: self.session_id.clone(),
            frame_rate_hz: self.frame_rate_hz,
            num_frames: self.num_frames(),
            feature_dims: self.feature_dims,
            roles,
        }
    }
}

fn labels_matrix(labels: &[f64]) -> Tensor {
    Tensor::new(vec![labels.len(), 1], labels.to_vec()).expect("label shape")
}

pub fn save_session(dir: &Path, session: &SessionRecord) -> Result<()> {
    session.validate()?;
    fs::create_dir_all(dir).map_err(|e| DatError::io(dir, e))?;
    let manifest = serde_json::to_string_pretty(&session.manifest())?;
    let mpath = dir.join(MANIFEST);
    fs::write(&mpath, manifest + "\n").map_err(|e| DatError::io(&mpath, e))?;
    let roles = std::iter::once((Role::Target, &session.target))
        .chain(session.partner.as_ref().map(|p| (Role::Partner, p)));
    for (role, data) in roles {
        let rdir = dir.join(role.dir_name());
        fs::create_dir_all(&rdir).map_err(|e| DatError::io(&rdir, e))?;
        for s in Stream::ALL {
            write_matrix(&rdir.join(format!("{}.datf", s.file_stem())), data.features.get(s))?;
        }
        if let Some(labels) = &data.labels {
            write_matrix(&rdir.join("labels.datf"), &labels_matrix(labels))?;
        }
    }
    Ok(())
}

fn load_role(dir: &Path, role: Role, manifest: &SessionManifest) -> Result<RoleData> {
    let rdir = dir.join(role.dir_name());
    let mut streams = Vec::with_capacity(5);
    for s in Stream::ALL {
        let path = rdir.join(format!("{}.datf", s.file_stem()));
        if !path.exists() {
            return Err(DatError::Data(format!("missing stream {}", path.display())));
        }
        let m = read_matrix(&path)?;
        if m.shape()[0] != manifest.num_frames {
            return Err(DatError::Data(format!(
                "{}/{}: {} rows, manifest says {}",
                role.dir_name(),
                s.file_stem(),
                m.shape()[0],
                manifest.num_frames
            )));
        }
        if m.shape()[1] != manifest.feature_dims.get(s) {
            return Err(DatError::Data(format!(
                "{}/{}: dim {} but manifest says {}",
                role.dir_name(),
                s.file_stem(),
                m.shape()[1],
                manifest.feature_dims.get(s)
            )));
        }
        streams.push(m);
    }
    let streams: [Tensor; 5] = streams.try_into().expect("five streams");
    let lpath = rdir.join("labels.datf");
    let labels = if lpath.exists() {
        let m = read_matrix(&lpath)?;
        if m.shape()[1] != 1 {
            return Err(DatError::Data(format!("{}: labels must have one column", lpath.display())));
        }
        Some(m.into_data())
    } else {
        None
    };
    Ok(RoleData {
        features: FeatureBundle::new(streams)?,
        labels,
    })
}

pub fn load_session(dir: &Path) -> Result<SessionRecord> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| DatError::io(&mpath, e))?;
    let manifest: SessionManifest = serde_json::from_str(&text)?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(DatError::Data(format!(
            "{}: unsupported schema_version {}",
            mpath.display(),
            manifest.schema_version
        )));
    }
    let mut roles = Vec::new();
    for r in &manifest.roles {
        roles.push(Role::parse(r).ok_or_else(|| DatError::Data(format!("unknown role {r:?}")))?);
    }
    if !roles.contains(&Role::Target) {
        return Err(DatError::Data(format!("{}: no target role", mpath.display())));
    }
    let target = load_role(dir, Role::Target, &manifest)?;
    let partner = if roles.contains(&Role::Partner) {
        Some(load_role(dir, Role::Partner, &manifest)?)
    } else {
        None
    };
    let session = SessionRecord {
        session_id: manifest.session_id,
        frame_rate_hz: manifest.frame_rate_hz,
        feature_dims: manifest.feature_dims,
        target,
        partner,
    };
    session.validate()?;
    Ok(session)
}

/// Session directories under `root` (those holding a manifest), sorted by name.
pub fn session_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    if root.join(MANIFEST).exists() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| DatError::io(root, e))? {
        let path = entry.map_err(|e| DatError::io(root, e))?.path();
        if path.join(MANIFEST).exists() {
            dirs.push(path);
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(DatError::Data(format!("no sessions found under {}", root.display())));
    }
    Ok(dirs)
}

/// Loads either a single session directory or every session beneath `root`.
pub fn load_sessions(root: &Path) -> Result<Vec<SessionRecord>> {
    session_dirs(root)?.iter().map(|d| load_session(d)).collect()
}

/// Frame-wise mean of several partners' streams.
pub fn partner_aggregate(partners: &[FeatureBundle]) -> Result<FeatureBundle> {
    let first = partners
        .first()
        .ok_or_else(|| DatError::InvalidArgument("partner_aggregate needs at least one partner".into()))?;
    if partners.len() == 1 {
        return Ok(first.clone());
    }
    let dims = first.dims();
    for p in &partners[1..] {
        if p.len() != first.len() || p.dims() != dims {
            return Err(DatError::Data(format!(
                "partner streams disagree: {} frames {:?} vs {} frames {:?}",
                first.len(),
                dims,
                p.len(),
                p.dims()
            )));
        }
    }
    let n = partners.len() as f64;
    let mut out = first.clone();
    for s in Stream::ALL {
        let acc = out.get_mut(s).data_mut();
        for p in &partners[1..] {
            for (a, b) in acc.iter_mut().zip(p.get(s).data()) {
                *a += b;
            }
        }
        acc.iter_mut().for_each(|v| *v /= n);
    }
    Ok(out)
}
