//! Atomic checkpoints: one directory per parameter holding consolidated f32
//! weight and Adam moments, with no rank or partition information.
//!
//! ```text
//! <root>/
//!   model.json
//!   ucp_meta.json
//!   <param_name>/weight.ucpt
//!   <param_name>/adam_m.ucpt
//!   <param_name>/adam_v.ucpt
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, UcpError};
use crate::io;
use crate::model::{Metadata, ModelSpec, ModelState, ParamState, StateKind};
use crate::partition::MODEL_FILE;
use crate::tensor::{read_tensor, write_tensor, DType, Tensor};

pub const ATOMIC_FORMAT_VERSION: u32 = 1;
pub const META_FILE: &str = "ucp_meta.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomicMeta {
    pub format_version: u32,
    pub step: u64,
    pub metadata: Metadata,
    /// SHA-256 of the source checkpoint's `config.json`.
    pub source_fingerprint: String,
}

#[derive(Debug, Clone)]
pub struct AtomicCheckpoint {
    pub root: PathBuf,
    pub spec: ModelSpec,
    pub meta: AtomicMeta,
}

pub fn atomic_path(root: &Path, param: &str, kind: StateKind) -> PathBuf {
    root.join(param).join(kind.atomic_file())
}

/// Writes one consolidated tensor, creating the parameter directory.
pub fn save_atomic_tensor(root: &Path, param: &str, kind: StateKind, t: &Tensor) -> Result<u64> {
    io::create_dir(&root.join(param))?;
    write_tensor(atomic_path(root, param, kind), t)
}

pub fn write_atomic_meta(root: &Path, spec: &ModelSpec, meta: &AtomicMeta) -> Result<()> {
    spec.save(&root.join(MODEL_FILE))?;
    io::write_json(&root.join(META_FILE), meta)
}

impl AtomicCheckpoint {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let spec = ModelSpec::load(&root.join(MODEL_FILE))?;
        let meta: AtomicMeta = io::read_json(&root.join(META_FILE))?;
        if meta.format_version != ATOMIC_FORMAT_VERSION {
            return Err(UcpError::Manifest {
                path: root.join(META_FILE),
                reason: format!("unsupported format_version {}", meta.format_version),
            });
        }
        let expected: BTreeSet<&str> = spec.params.iter().map(|p| p.name.as_str()).collect();
        let found: BTreeSet<String> = std::fs::read_dir(&root)
            .map_err(|e| UcpError::io(&root, e))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        let found_refs: BTreeSet<&str> = found.iter().map(String::as_str).collect();
        if expected != found_refs {
            let missing: Vec<_> = expected.difference(&found_refs).collect();
            let extra: Vec<_> = found_refs.difference(&expected).collect();
            return Err(UcpError::Manifest {
                path: root,
                reason: format!("parameter directories differ from model.json: missing {missing:?}, extra {extra:?}"),
            });
        }
        Ok(AtomicCheckpoint { root, spec, meta })
    }

    pub fn path(&self, param: &str, kind: StateKind) -> PathBuf {
        atomic_path(&self.root, param, kind)
    }

    pub fn file_len(&self, param: &str, kind: StateKind) -> Result<u64> {
        let path = self.path(param, kind);
        std::fs::metadata(&path).map(|m| m.len()).map_err(|e| UcpError::io(&path, e))
    }

    /// Reads one tensor and checks it against the model schema.
    pub fn read(&self, param: &str, kind: StateKind) -> Result<Tensor> {
        let p = self
            .spec
            .param(param)
            .ok_or_else(|| UcpError::InvalidSpec(format!("unknown param `{param}`")))?;
        let t = read_tensor(self.path(param, kind)).map_err(|e| e.in_param(param))?;
        if t.dtype() != DType::F32 || t.shape() != p.shape.as_slice() {
            return Err(UcpError::ShapeMismatch(format!(
                "atomic `{param}`/{kind} is {:?} {:?}, model.json says f32 {:?}",
                t.dtype(),
                t.shape(),
                p.shape
            )));
        }
        Ok(t)
    }

    pub fn read_state(&self) -> Result<ModelState> {
        let mut params = BTreeMap::new();
        for p in &self.spec.params {
            let st = ParamState {
                weight: self.read(&p.name, StateKind::Weight)?,
                adam_m: self.read(&p.name, StateKind::AdamM)?,
                adam_v: self.read(&p.name, StateKind::AdamV)?,
            };
            params.insert(p.name.clone(), st);
        }
        Ok(ModelState {
            params,
            step: self.meta.step,
            metadata: self.meta.metadata.clone(),
        })
    }

    /// Writes a consolidated state directly as an atomic checkpoint.
    pub fn save_state(spec: &ModelSpec, state: &ModelState, out_dir: &Path, source_fingerprint: &str) -> Result<Self> {
        state.validate(spec)?;
        io::prepare_empty_dir(out_dir)?;
        for p in &spec.params {
            for kind in StateKind::ALL {
                save_atomic_tensor(out_dir, &p.name, kind, state.params[&p.name].get(kind))?;
            }
        }
        let meta = AtomicMeta {
            format_version: ATOMIC_FORMAT_VERSION,
            step: state.step,
            metadata: state.metadata.clone(),
            source_fingerprint: source_fingerprint.to_string(),
        };
        write_atomic_meta(out_dir, spec, &meta)?;
        Ok(AtomicCheckpoint {
            root: out_dir.to_path_buf(),
            spec: spec.clone(),
            meta,
        })
    }
}
