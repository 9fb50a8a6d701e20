//! Reference consolidation by index scattering.
//!
//! Every stored element is mapped to its coordinate in the full parameter and
//! written there. This never assembles tensors from pieces, so it shares no
//! code path with the conversion engine; the two agreeing is evidence.

use std::collections::BTreeMap;

use ucp_core::model::{ModelSpec, ModelState, ParamState, StateKind};
use ucp_core::parallel::{Pattern, TpSlice};
use ucp_core::partition::{DistributedCheckpoint, RankShards, ShardEntry};
use ucp_core::{Result, Tensor, UcpError};

/// Row-major strides of `shape`.
fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

/// Maps positions of one fragment to flat indices of the full parameter.
pub struct IndexMap {
    local_strides: Vec<usize>,
    global_strides: Vec<usize>,
    local_numel: usize,
    flat_start: usize,
    slice: TpSlice,
}

impl IndexMap {
    pub fn new(entry: &ShardEntry, full_shape: &[usize]) -> Self {
        IndexMap {
            local_strides: strides(&entry.local_shape),
            global_strides: strides(full_shape),
            local_numel: entry.local_shape.iter().product(),
            flat_start: entry.flat_range.map_or(0, |r| r.0),
            slice: entry.tp_slice.clone(),
        }
    }

    /// Position in the tensor-parallel slice of fragment element `j`, or
    /// `None` for ZeRO padding.
    pub fn local(&self, j: usize) -> Option<usize> {
        let l = self.flat_start + j;
        (l < self.local_numel).then_some(l)
    }

    /// Flat index into the full parameter of slice position `l`.
    pub fn global(&self, l: usize) -> usize {
        let mut rem = l;
        let mut out = 0;
        for (d, &ls) in self.local_strides.iter().enumerate() {
            let mut c = rem / ls;
            rem %= ls;
            match &self.slice {
                TpSlice::Full => {}
                TpSlice::Axis { axis, start, .. } => {
                    if d == *axis {
                        c += start;
                    }
                }
                TpSlice::Block { rows, cols } => {
                    if d == 0 {
                        c += rows.0;
                    } else if d == 1 {
                        c += cols.0;
                    }
                }
                TpSlice::Rows(rows) => {
                    if d == 0 {
                        let mut acc = 0;
                        for &(off, len) in rows {
                            if c < acc + len {
                                c = off + (c - acc);
                                break;
                            }
                            acc += len;
                        }
                    }
                }
            }
            out += c * self.global_strides[d];
        }
        out
    }
}

struct Slot {
    bits: Vec<u32>,
    written: Vec<bool>,
    sum: Vec<f64>,
    count: Vec<u32>,
}

fn bad(param: &str, kind: StateKind, detail: String) -> UcpError {
    UcpError::ReplicaMismatch {
        param: param.into(),
        kind: kind.label().into(),
        detail,
    }
}

/// Consolidates in-memory rank shard sets into a full model state.
pub fn consolidate_world(spec: &ModelSpec, ranks: &[RankShards], step: u64, metadata: &ucp_core::model::Metadata) -> Result<ModelState> {
    let mut slots: BTreeMap<(String, StateKind), Slot> = BTreeMap::new();
    for p in &spec.params {
        for kind in StateKind::ALL {
            let n = p.numel();
            slots.insert(
                (p.name.clone(), kind),
                Slot {
                    bits: vec![0; n],
                    written: vec![false; n],
                    sum: Vec::new(),
                    count: Vec::new(),
                },
            );
        }
    }
    for r in ranks {
        for s in &r.shards {
            let e = &s.entry;
            let p = spec
                .param(&e.param)
                .ok_or_else(|| UcpError::InvalidSpec(format!("rank {} holds unknown param `{}`", r.rank, e.param)))?;
            let data = s
                .tensor
                .as_f32()
                .ok_or_else(|| UcpError::DTypeMismatch(format!("`{}` on rank {} is not f32", e.param, r.rank)))?;
            let slot = slots.get_mut(&(e.param.clone(), e.kind)).unwrap();
            let map = IndexMap::new(e, &p.shape);
            let partial = e.pattern == Pattern::Partial;
            if partial && slot.sum.is_empty() {
                slot.sum = vec![-0.0; p.numel()];
                slot.count = vec![0; p.numel()];
            }
            for (j, &x) in data.iter().enumerate() {
                let Some(l) = map.local(j) else {
                    if x.to_bits() != 0 {
                        return Err(UcpError::NonzeroPadding(format!(
                            "`{}`/{} rank {} element {j}",
                            e.param, e.kind, r.rank
                        )));
                    }
                    continue;
                };
                let g = map.global(l);
                if partial {
                    slot.sum[g] += x as f64;
                    slot.count[g] += 1;
                } else if slot.written[g] {
                    if slot.bits[g] != x.to_bits() {
                        return Err(bad(&e.param, e.kind, format!("rank {} disagrees at flat index {g}", r.rank)));
                    }
                } else {
                    slot.bits[g] = x.to_bits();
                    slot.written[g] = true;
                }
            }
        }
    }

    let mut params = BTreeMap::new();
    for p in &spec.params {
        let mut kinds = Vec::with_capacity(3);
        for kind in StateKind::ALL {
            let mut slot = slots.remove(&(p.name.clone(), kind)).unwrap();
            if !slot.count.is_empty() {
                // Members are visited in rank order; ascending tp_rank within a dp group.
                for g in 0..slot.bits.len() {
                    if slot.count[g] > 0 {
                        slot.bits[g] = ((slot.sum[g] / slot.count[g] as f64) as f32).to_bits();
                        slot.written[g] = true;
                    }
                }
            }
            if let Some(g) = slot.written.iter().position(|w| !w) {
                return Err(UcpError::MissingFragment {
                    param: p.name.clone(),
                    kind: kind.label().into(),
                    detail: format!("no fragment covers flat index {g}"),
                });
            }
            let data = slot.bits.into_iter().map(f32::from_bits).collect();
            kinds.push(Tensor::from_f32(p.shape.clone(), data)?);
        }
        let mut it = kinds.into_iter();
        params.insert(
            p.name.clone(),
            ParamState {
                weight: it.next().unwrap(),
                adam_m: it.next().unwrap(),
                adam_v: it.next().unwrap(),
            },
        );
    }
    Ok(ModelState {
        params,
        step,
        metadata: metadata.clone(),
    })
}

/// Consolidates a distributed checkpoint on disk.
pub fn consolidate_oracle(ckpt: &DistributedCheckpoint) -> Result<ModelState> {
    let ranks = ckpt.read_world()?;
    consolidate_world(&ckpt.spec, &ranks, ckpt.config.step, &ckpt.config.metadata)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strides_row_major() {
        assert_eq!(strides(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(strides(&[]), Vec::<usize>::new());
    }
}
