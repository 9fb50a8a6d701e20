//! Pattern rules and fragment geometry.
//!
//! These functions are the single source of truth for where every element of
//! every parameter lives under a [`ParallelConfig`]. The partitioner uses them
//! to cut state into shards and the loader uses them to cut atomic tensors
//! into target shards.
//!
//! A fragment is produced in three nested steps:
//!
//! 1. tensor-parallel slice of the full tensor ([`TpSlice`]),
//! 2. optional ZeRO flat shard of that slice, padded per tensor to a multiple of `dp`,
//! 3. pipeline placement: only ranks on the owning stage hold the parameter.

use serde::{Deserialize, Serialize};

use super::config::{ParallelConfig, Placement, PpSchedule, ZeroStage};
use crate::error::{Result, UcpError};
use crate::model::{ModelSpec, ParamKind, ParamSpec, StateKind};
use crate::tensor::{element_bits, numel_of, stream_key, Storage, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Pattern {
    Unique,
    Replicate,
    Partial,
    ShardV,
    ShardH,
    ShardHy,
    /// Non-consecutive shard of a fused tensor; carries the `(offset, length)`
    /// row segments of axis 0, each split evenly over the TP group.
    ShardNC(Vec<(usize, usize)>),
}

/// Which part of the full tensor a tensor-parallel rank holds.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TpSlice {
    Full,
    Axis { axis: usize, start: usize, end: usize },
    Block { rows: (usize, usize), cols: (usize, usize) },
    /// Axis-0 row ranges `(offset, length)`, concatenated in order.
    Rows(Vec<(usize, usize)>),
}

/// Combination rule across the tensor-parallel group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TpRole {
    Whole,
    Replicate,
    Partial,
    Shard,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FragmentLayout {
    pub pattern: Pattern,
    pub tp_slice: TpSlice,
    /// Shape after the tensor-parallel slice.
    pub local_shape: Vec<usize>,
    /// `[start, end)` into the padded flat view of the local slice.
    pub flat_range: Option<(usize, usize)>,
    /// Padding elements inside this fragment's flat range.
    pub pad_elems: usize,
    /// `(member, group_size)` when the fragment diverges per TP rank.
    pub partial: Option<(u32, u32)>,
}

impl FragmentLayout {
    pub fn fragment_shape(&self) -> Vec<usize> {
        match self.flat_range {
            Some((s, e)) => vec![e - s],
            None => self.local_shape.clone(),
        }
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.fragment_shape())
    }
}

/// Result of ZeRO flattening a tensor for `dp` ranks.
#[derive(Debug, Clone)]
pub struct ZeroFlat {
    pub padded: Tensor,
    pub pad_elems: usize,
    pub ranges: Vec<(usize, usize)>,
}

/// Padded length and per-rank ranges for a flat tensor of `numel` elements.
pub fn zero_ranges(numel: usize, dp: u32) -> (usize, Vec<(usize, usize)>) {
    let dp = dp.max(1) as usize;
    let chunk = numel.div_ceil(dp);
    let ranges = (0..dp).map(|r| (r * chunk, (r + 1) * chunk)).collect();
    (chunk * dp, ranges)
}

pub fn zero_flatten(t: &Tensor, dp: u32) -> Result<ZeroFlat> {
    let n = t.numel();
    let (padded_len, ranges) = zero_ranges(n, dp);
    let mut padded = Tensor::zeros(t.dtype(), vec![padded_len]);
    padded.write_flat(0, t)?;
    Ok(ZeroFlat {
        padded,
        pad_elems: padded_len - n,
        ranges,
    })
}

/// Layers owned by each pipeline stage.
///
/// Sequential: contiguous blocks, remainder to the earliest stages.
/// Interleaved(v): layers split into `pp * v` contiguous chunks, chunk `j` on stage `j % pp`.
pub fn pp_layer_map(n_layers: u32, pp: u32, schedule: PpSchedule) -> Result<Vec<Vec<u32>>> {
    if pp == 0 {
        return Err(UcpError::IncompatibleConfig("pp must be >= 1".into()));
    }
    let mut stages = vec![Vec::new(); pp as usize];
    match schedule {
        PpSchedule::Sequential1F1B => {
            let (base, rem) = (n_layers / pp, n_layers % pp);
            let mut layer = 0;
            for (s, stage) in stages.iter_mut().enumerate() {
                let count = base + u32::from((s as u32) < rem);
                stage.extend(layer..layer + count);
                layer += count;
            }
        }
        PpSchedule::Interleaved(v) => {
            let chunks = pp * v;
            if v == 0 || n_layers % chunks != 0 {
                return Err(UcpError::IncompatibleConfig(format!(
                    "{n_layers} layers not divisible into pp*v = {pp}*{v} chunks"
                )));
            }
            let chunk_len = n_layers / chunks;
            for j in 0..chunks {
                stages[(j % pp) as usize].extend(j * chunk_len..(j + 1) * chunk_len);
            }
        }
    }
    Ok(stages)
}

/// Pipeline stage owning a parameter.
pub fn param_stage(p: &ParamSpec, n_layers: u32, cfg: &ParallelConfig) -> Result<u32> {
    match p.kind {
        ParamKind::Embedding | ParamKind::AsyncPartial => Ok(0),
        ParamKind::TiedEmbedding => Ok(cfg.pp - 1),
        _ => {
            let map = pp_layer_map(n_layers, cfg.pp, cfg.pp_schedule)?;
            map.iter()
                .position(|layers| layers.contains(&p.layer_index))
                .map(|s| s as u32)
                .ok_or_else(|| UcpError::InvalidSpec(format!("layer {} of `{}` has no stage", p.layer_index, p.name)))
        }
    }
}

fn unsupported(p: &ParamSpec, reason: impl Into<String>) -> UcpError {
    UcpError::UnsupportedPattern {
        param: p.name.clone(),
        reason: reason.into(),
    }
}

/// Tensor-parallel role and slice of `p` on `tp_rank`.
fn tp_rule(p: &ParamSpec, cfg: &ParallelConfig, tp_rank: u32) -> Result<(TpRole, Pattern, TpSlice)> {
    let tp = cfg.tp as usize;
    let r = tp_rank as usize;
    if tp == 1 {
        return Ok((TpRole::Whole, Pattern::Unique, TpSlice::Full));
    }
    let split_axis = |axis: usize, pattern: Pattern| -> Result<(TpRole, Pattern, TpSlice)> {
        let extent = *p
            .shape
            .get(axis)
            .ok_or_else(|| unsupported(p, format!("no axis {axis} to shard")))?;
        if extent % tp != 0 {
            return Err(unsupported(p, format!("axis {axis} extent {extent} not divisible by tp={tp}")));
        }
        let part = extent / tp;
        Ok((
            TpRole::Shard,
            pattern,
            TpSlice::Axis {
                axis,
                start: r * part,
                end: (r + 1) * part,
            },
        ))
    };
    match p.kind {
        ParamKind::LayerNormWeight | ParamKind::LayerNormBias => Ok((TpRole::Replicate, Pattern::Replicate, TpSlice::Full)),
        ParamKind::AsyncPartial => Ok((TpRole::Partial, Pattern::Partial, TpSlice::Full)),
        ParamKind::Embedding | ParamKind::TiedEmbedding => split_axis(0, Pattern::ShardV),
        ParamKind::Matmul2D => {
            if p.shape.len() != 2 {
                return Err(unsupported(p, "Matmul2D must be rank 2"));
            }
            if let Some(grid) = cfg.tp_grid {
                let (rows, cols) = (grid.rows as usize, grid.cols as usize);
                if p.shape[0] % rows != 0 || p.shape[1] % cols != 0 {
                    return Err(unsupported(p, format!("{:?} not divisible by tp grid {rows}x{cols}", p.shape)));
                }
                let (rr, cr) = (r / cols, r % cols);
                let (rh, cw) = (p.shape[0] / rows, p.shape[1] / cols);
                return Ok((
                    TpRole::Shard,
                    Pattern::ShardHy,
                    TpSlice::Block {
                        rows: (rr * rh, (rr + 1) * rh),
                        cols: (cr * cw, (cr + 1) * cw),
                    },
                ));
            }
            match p.tp_axis_hint {
                Some(0) => split_axis(0, Pattern::ShardV),
                Some(1) => split_axis(1, Pattern::ShardH),
                other => Err(unsupported(p, format!("Matmul2D with tp_axis_hint {other:?}"))),
            }
        }
        ParamKind::FusedQKV | ParamKind::FusedExpert3DLike => {
            let segs = p
                .nc_segments
                .clone()
                .ok_or_else(|| unsupported(p, "fused parameter without segments"))?;
            let mut rows = Vec::with_capacity(segs.len());
            for &(off, len) in &segs {
                if len % tp != 0 {
                    return Err(unsupported(p, format!("segment length {len} not divisible by tp={tp}")));
                }
                let part = len / tp;
                rows.push((off + r * part, part));
            }
            Ok((TpRole::Shard, Pattern::ShardNC(segs), TpSlice::Rows(rows)))
        }
    }
}

pub fn slice_shape(full: &[usize], slice: &TpSlice) -> Vec<usize> {
    let mut shape = full.to_vec();
    match slice {
        TpSlice::Full => {}
        TpSlice::Axis { axis, start, end } => shape[*axis] = end - start,
        TpSlice::Block { rows, cols } => {
            shape[0] = rows.1 - rows.0;
            shape[1] = cols.1 - cols.0;
        }
        TpSlice::Rows(rows) => shape[0] = rows.iter().map(|r| r.1).sum(),
    }
    shape
}

/// Whether ZeRO shards this state kind flat over the data-parallel group.
pub fn zero_shards(kind: StateKind, stage: ZeroStage) -> bool {
    match stage {
        ZeroStage::Z0 => false,
        ZeroStage::Z1 => kind != StateKind::Weight,
        ZeroStage::Z3 => true,
    }
}

/// Fragment of `(p, kind)` held by `placement`, or `None` when the rank's
/// pipeline stage does not own the parameter.
pub fn fragment_layout(
    spec: &ModelSpec,
    p: &ParamSpec,
    kind: StateKind,
    cfg: &ParallelConfig,
    placement: Placement,
) -> Result<Option<FragmentLayout>> {
    if param_stage(p, spec.n_layers, cfg)? != placement.pp_rank {
        return Ok(None);
    }
    let (role, tp_pattern, tp_slice) = tp_rule(p, cfg, placement.tp_rank)?;
    let local_shape = slice_shape(&p.shape, &tp_slice);
    let (flat_range, pad_elems) = if zero_shards(kind, cfg.zero_stage) {
        let local_numel = numel_of(&local_shape);
        let (_, ranges) = zero_ranges(local_numel, cfg.dp);
        let (s, e) = ranges[placement.dp_rank as usize];
        let pad = e.saturating_sub(s.max(local_numel));
        (Some((s, e)), pad)
    } else {
        (None, 0)
    };
    let pattern = if cfg.tp > 1 {
        tp_pattern
    } else if flat_range.is_some() {
        Pattern::ShardV
    } else if cfg.dp > 1 {
        Pattern::Replicate
    } else {
        Pattern::Unique
    };
    let partial = (role == TpRole::Partial).then_some((placement.tp_rank, cfg.tp));
    Ok(Some(FragmentLayout {
        pattern,
        tp_slice,
        local_shape,
        flat_range,
        pad_elems,
        partial,
    }))
}

/// Patterns of `(weight, m, v)` for `p` under `cfg`, as seen from a rank on the owning stage.
pub fn assign_pattern(spec: &ModelSpec, p: &ParamSpec, cfg: &ParallelConfig) -> Result<[(StateKind, Pattern); 3]> {
    cfg.check()?;
    let stage = param_stage(p, spec.n_layers, cfg)?;
    let placement = Placement {
        tp_rank: 0,
        pp_rank: stage,
        dp_rank: 0,
    };
    let get = |kind| -> Result<(StateKind, Pattern)> {
        let layout = fragment_layout(spec, p, kind, cfg, placement)?.expect("owning stage holds the param");
        Ok((kind, layout.pattern))
    };
    Ok([get(StateKind::Weight)?, get(StateKind::AdamM)?, get(StateKind::AdamV)?])
}

/// Full compatibility check of `cfg` against a model: config rules, pipeline
/// divisibility and a pattern for every parameter.
pub fn check_compatible(spec: &ModelSpec, cfg: &ParallelConfig) -> Result<()> {
    cfg.check()?;
    pp_layer_map(spec.n_layers, cfg.pp, cfg.pp_schedule)?;
    for p in &spec.params {
        for tp_rank in 0..cfg.tp {
            tp_rule(p, cfg, tp_rank)?;
        }
    }
    Ok(())
}

fn noise_key() -> u64 {
    stream_key(0, "partial", "noise")
}

/// Symmetric zero-sum coefficient for member `r` of a group of `n`:
/// `+1, -1, +2, -2, ...`, with `0` for the last member of an odd group.
fn partial_coef(r: u32, n: u32) -> i64 {
    if n % 2 == 1 && r == n - 1 {
        return 0;
    }
    let k = (r / 2 + 1) as i64;
    if r % 2 == 0 {
        k
    } else {
        -k
    }
}

/// Value member `r` of an `n`-way partial group holds for consolidated value `x`.
///
/// The offset is a whole number of ulps of `x`, clamped so the result never
/// leaves `x`'s binade upward; every member's value is then exact in f32 and
/// the f64 mean of the group is exactly `x`.
pub fn partial_value(x: f32, global_index: u64, member: u32, group: u32) -> f32 {
    let coef = partial_coef(member, group);
    let bits = x.to_bits();
    let exp = (bits >> 23) & 0xFF;
    if coef == 0 || exp == 0xFF || x == 0.0 {
        return x;
    }
    let frac = bits & 0x7F_FFFF;
    let ulp = if exp == 0 {
        f64::powi(2.0, -149)
    } else {
        f64::powi(2.0, exp as i32 - 150)
    };
    let max_coef = (group / 2) as u64;
    let room_up = if exp == 0 { u64::MAX } else { (0x7F_FFFF - frac) as u64 };
    let k = (1 + element_bits(noise_key(), global_index) % 3).min(room_up / max_coef);
    let sign = if x.is_sign_negative() { -1.0 } else { 1.0 };
    (x as f64 + sign * (coef as f64) * (k as f64) * ulp) as f32
}

fn tp_cut(full: &Tensor, slice: &TpSlice) -> Result<Tensor> {
    match slice {
        TpSlice::Full => Ok(full.clone()),
        TpSlice::Axis { axis, start, end } => full.slice_axis(*axis, *start, *end),
        TpSlice::Block { rows, cols } => full.slice_axis(0, rows.0, rows.1)?.slice_axis(1, cols.0, cols.1),
        TpSlice::Rows(rows) => {
            let parts = rows
                .iter()
                .map(|&(off, len)| full.slice_axis(0, off, off + len))
                .collect::<Result<Vec<_>>>()?;
            Tensor::concat(&parts, 0)
        }
    }
}

/// Cuts the fragment described by `layout` out of the full tensor.
pub fn materialize(full: &Tensor, layout: &FragmentLayout) -> Result<Tensor> {
    let mut local = tp_cut(full, &layout.tp_slice)?;
    if let Some((member, group)) = layout.partial {
        if let Storage::F32(_) = local.storage() {
            let data = local.as_f32_mut().expect("f32");
            for (i, x) in data.iter_mut().enumerate() {
                *x = partial_value(*x, i as u64, member, group);
            }
        } else {
            return Err(UcpError::DTypeMismatch("partial fragments are built from f32 state".into()));
        }
    }
    match layout.flat_range {
        None => Ok(local),
        Some((start, end)) => {
            let n = local.numel();
            let flat = local.flatten();
            let mut out = Tensor::zeros(flat.dtype(), vec![end - start]);
            if start < n {
                out.write_flat(0, &flat.slice_flat(start, end.min(n))?)?;
            }
            Ok(out)
        }
    }
}
