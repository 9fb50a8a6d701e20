//! Parameter schemas for the model families and their concrete state.

mod trainer;
mod zoo;

pub use trainer::{train_fragment, train_steps, AdamStep, TrainerConfig};
pub use zoo::{init_state, make_model, ModelFamily, ModelScale, MAX_TP_DEGREE};

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, UcpError};
use crate::tensor::{DType, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamKind {
    Matmul2D,
    FusedExpert3DLike,
    FusedQKV,
    LayerNormWeight,
    LayerNormBias,
    Embedding,
    TiedEmbedding,
    AsyncPartial,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub layer_index: u32,
    pub kind: ParamKind,
    pub tp_axis_hint: Option<u32>,
    /// `(offset, length)` row segments on axis 0 of a fused parameter.
    pub nc_segments: Option<Vec<(usize, usize)>>,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Position in the layer-ordered load sequence: pre-layer params first,
    /// then blocks, then the output head.
    pub fn load_slot(&self, n_layers: u32) -> u32 {
        match self.kind {
            ParamKind::Embedding | ParamKind::AsyncPartial => 0,
            ParamKind::TiedEmbedding => n_layers + 1,
            _ => self.layer_index + 1,
        }
    }

    fn validate(&self, n_layers: u32) -> Result<()> {
        let bad = |msg: String| Err(UcpError::InvalidSpec(format!("{}: {msg}", self.name)));
        if self.layer_index >= n_layers.max(1) {
            return bad(format!("layer_index {} >= n_layers {n_layers}", self.layer_index));
        }
        if let Some(axis) = self.tp_axis_hint {
            if axis as usize >= self.shape.len() {
                return bad(format!("tp_axis_hint {axis} on rank-{} param", self.shape.len()));
            }
        }
        let segments = self.nc_segments.as_deref();
        if let Some(segs) = segments {
            if self.shape.is_empty() {
                return bad("nc_segments on a scalar".into());
            }
            let mut cursor = 0;
            for &(off, len) in segs {
                if off != cursor || len == 0 {
                    return bad(format!("segments {segs:?} must be sorted, non-empty and contiguous"));
                }
                cursor += len;
            }
            if segs.is_empty() || cursor != self.shape[0] {
                return bad(format!("segments {segs:?} do not cover axis 0 of {:?}", self.shape));
            }
        }
        match self.kind {
            ParamKind::FusedQKV => match segments {
                Some(segs) if segs.len() == 3 => {
                    if segs[1].1 != segs[2].1 {
                        return bad("k and v segments must have equal length".into());
                    }
                }
                _ => return bad("FusedQKV needs exactly 3 segments".into()),
            },
            ParamKind::FusedExpert3DLike => match segments {
                Some(segs) => {
                    let n_experts = segs.len();
                    if self.shape[0] % n_experts != 0 || segs.iter().any(|s| s.1 != self.shape[0] / n_experts) {
                        return bad(format!("{n_experts} experts do not evenly divide {:?}", self.shape));
                    }
                }
                None => return bad("FusedExpert3DLike needs per-expert segments".into()),
            },
            _ => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub n_layers: u32,
    pub tied_pairs: Vec<(String, String)>,
    pub params: Vec<ParamSpec>,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for p in &self.params {
            if !seen.insert(p.name.as_str()) {
                return Err(UcpError::InvalidSpec(format!("duplicate param `{}`", p.name)));
            }
            p.validate(self.n_layers)?;
        }
        for (a, b) in &self.tied_pairs {
            let (pa, pb) = match (self.param(a), self.param(b)) {
                (Some(pa), Some(pb)) => (pa, pb),
                _ => return Err(UcpError::InvalidSpec(format!("tied pair ({a}, {b}) names a missing param"))),
            };
            if pa.shape != pb.shape {
                return Err(UcpError::InvalidSpec(format!("tied pair ({a}, {b}) has unequal shapes")));
            }
        }
        Ok(())
    }

    pub fn param(&self, name: &str) -> Option<&ParamSpec> {
        self.params.iter().find(|p| p.name == name)
    }

    /// The first member of the tie group `name` belongs to, or `name` itself.
    pub fn tied_root<'a>(&'a self, name: &'a str) -> &'a str {
        self.tied_pairs
            .iter()
            .find(|(_, b)| b == name)
            .map(|(a, _)| a.as_str())
            .unwrap_or(name)
    }

    pub fn total_numel(&self) -> usize {
        self.params.iter().map(ParamSpec::numel).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model spec serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let spec: ModelSpec = crate::io::read_json(path)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// The three checkpointed tensors of a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StateKind {
    #[serde(rename = "weight")]
    Weight,
    #[serde(rename = "m")]
    AdamM,
    #[serde(rename = "v")]
    AdamV,
}

impl StateKind {
    pub const ALL: [StateKind; 3] = [StateKind::Weight, StateKind::AdamM, StateKind::AdamV];

    pub fn label(self) -> &'static str {
        match self {
            StateKind::Weight => "weight",
            StateKind::AdamM => "m",
            StateKind::AdamV => "v",
        }
    }

    /// File name inside an atomic parameter directory.
    pub fn atomic_file(self) -> &'static str {
        match self {
            StateKind::Weight => "weight.ucpt",
            StateKind::AdamM => "adam_m.ucpt",
            StateKind::AdamV => "adam_v.ucpt",
        }
    }
}

impl std::fmt::Display for StateKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamState {
    pub weight: Tensor,
    pub adam_m: Tensor,
    pub adam_v: Tensor,
}

impl ParamState {
    pub fn get(&self, kind: StateKind) -> &Tensor {
        match kind {
            StateKind::Weight => &self.weight,
            StateKind::AdamM => &self.adam_m,
            StateKind::AdamV => &self.adam_v,
        }
    }

    pub fn get_mut(&mut self, kind: StateKind) -> &mut Tensor {
        match kind {
            StateKind::Weight => &mut self.weight,
            StateKind::AdamM => &mut self.adam_m,
            StateKind::AdamV => &mut self.adam_v,
        }
    }
}

pub type Metadata = BTreeMap<String, f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub params: BTreeMap<String, ParamState>,
    pub step: u64,
    pub metadata: Metadata,
}

impl ModelState {
    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        if self.params.len() != spec.params.len() {
            return Err(UcpError::ShapeMismatch(format!(
                "state has {} params, spec has {}",
                self.params.len(),
                spec.params.len()
            )));
        }
        for p in &spec.params {
            let st = self
                .params
                .get(&p.name)
                .ok_or_else(|| UcpError::ShapeMismatch(format!("state lacks `{}`", p.name)))?;
            for kind in StateKind::ALL {
                let t = st.get(kind);
                if t.shape() != p.shape.as_slice() || t.dtype() != DType::F32 {
                    return Err(UcpError::ShapeMismatch(format!(
                        "`{}`/{kind}: {:?} {:?}, expected f32 {:?}",
                        p.name,
                        t.dtype(),
                        t.shape(),
                        p.shape
                    )));
                }
            }
        }
        for (a, b) in &spec.tied_pairs {
            if self.params[a] != self.params[b] {
                return Err(UcpError::ReplicaMismatch {
                    param: b.clone(),
                    kind: "tied".into(),
                    detail: format!("differs from `{a}`"),
                });
            }
        }
        Ok(())
    }

    /// First bitwise difference against `other`, as `(param, kind, flat index)`.
    pub fn first_difference(&self, other: &ModelState) -> Option<(String, StateKind, usize)> {
        for (name, st) in &self.params {
            let Some(ot) = other.params.get(name) else {
                return Some((name.clone(), StateKind::Weight, 0));
            };
            for kind in StateKind::ALL {
                if let Some(i) = st.get(kind).first_difference(ot.get(kind)) {
                    return Some((name.clone(), kind, i));
                }
            }
        }
        other
            .params
            .keys()
            .find(|k| !self.params.contains_key(*k))
            .map(|k| (k.clone(), StateKind::Weight, 0))
    }
}
