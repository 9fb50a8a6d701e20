//! Pattern-aware consolidation of fragments into a full tensor.
//!
//! Stacked patterns are undone innermost first: ZeRO flat ranges are joined
//! and stripped of padding per tensor-parallel rank, then the tensor-parallel
//! pieces are combined, and pipeline ownership is checked last (all
//! fragments must come from one stage).

use std::collections::BTreeMap;

use super::extract::FragmentMsg;
use crate::error::{Result, UcpError};
use crate::model::{ParamSpec, StateKind};
use crate::parallel::{Pattern, TpSlice};
use crate::tensor::{numel_of, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct UnionOptions {
    /// Require every replica to be bit-identical instead of taking the first.
    pub strict_replicate: bool,
}

impl Default for UnionOptions {
    fn default() -> Self {
        UnionOptions { strict_replicate: true }
    }
}

/// Removes `pad_elems` trailing zeros from a flat tensor and reshapes it.
pub fn strip_pad(t: Tensor, pad_elems: usize, target_shape: &[usize]) -> Result<Tensor> {
    if t.shape().len() != 1 {
        return Err(UcpError::ShapeMismatch(format!("strip_pad expects rank 1, got {:?}", t.shape())));
    }
    let n = numel_of(target_shape);
    if t.numel() != n + pad_elems {
        return Err(UcpError::ShapeMismatch(format!(
            "{} elements cannot hold {target_shape:?} plus {pad_elems} pad",
            t.numel()
        )));
    }
    let bits = t.bits();
    if let Some(i) = bits[n..].iter().position(|&b| b != 0) {
        return Err(UcpError::NonzeroPadding(format!(
            "pad element {} holds bits {:#x}",
            n + i,
            bits[n + i]
        )));
    }
    if pad_elems == 0 {
        return t.reshape(target_shape.to_vec());
    }
    t.slice_flat(0, n)?.reshape(target_shape.to_vec())
}

struct Ctx<'a> {
    param: &'a str,
    kind: StateKind,
}

impl Ctx<'_> {
    fn missing(&self, detail: String) -> UcpError {
        UcpError::MissingFragment {
            param: self.param.into(),
            kind: self.kind.label().into(),
            detail,
        }
    }

    fn overlap(&self, detail: String) -> UcpError {
        UcpError::OverlappingFragment {
            param: self.param.into(),
            kind: self.kind.label().into(),
            detail,
        }
    }

    fn mismatch(&self, detail: String) -> UcpError {
        UcpError::ReplicaMismatch {
            param: self.param.into(),
            kind: self.kind.label().into(),
            detail,
        }
    }

    fn bad(&self, detail: String) -> UcpError {
        UcpError::Manifest {
            path: self.param.into(),
            reason: format!("{}: {detail}", self.kind),
        }
    }
}

/// Consolidates all fragments of `(param, kind)`.
pub fn union(param: &ParamSpec, kind: StateKind, msgs: &[FragmentMsg], opts: UnionOptions) -> Result<Tensor> {
    let cx = Ctx { param: &param.name, kind };
    let first = msgs.first().ok_or_else(|| cx.missing("no fragments".into()))?;
    let (pattern, tp_degree, dp_degree) = (&first.entry.pattern, first.entry.tp_degree, first.entry.dp_degree);
    let stage = first.entry.placement.pp_rank;
    for m in msgs {
        let e = &m.entry;
        if e.param != param.name || e.kind != kind {
            return Err(cx.bad(format!("stray fragment `{}`/{} in the group", e.param, e.kind)));
        }
        if &e.pattern != pattern || e.tp_degree != tp_degree || e.dp_degree != dp_degree {
            return Err(cx.bad("fragments disagree on pattern or group sizes".into()));
        }
        if e.placement.pp_rank != stage {
            return Err(cx.overlap(format!(
                "held by pipeline stages {stage} and {}",
                e.placement.pp_rank
            )));
        }
    }

    let mut by_tp: BTreeMap<u32, Vec<&FragmentMsg>> = BTreeMap::new();
    for m in msgs {
        by_tp.entry(m.entry.placement.tp_rank).or_default().push(m);
    }
    if by_tp.len() != tp_degree as usize || by_tp.keys().copied().ne(0..tp_degree) {
        return Err(cx.missing(format!(
            "tensor-parallel ranks {:?} of {tp_degree}",
            by_tp.keys().collect::<Vec<_>>()
        )));
    }

    let mut pieces = Vec::with_capacity(by_tp.len());
    for (tp_rank, group) in by_tp {
        let local = join_dp(&cx, group, dp_degree, opts)?;
        pieces.push((tp_rank, local));
    }

    let full = combine_tp(&cx, param, pattern, pieces, opts)?;
    if full.shape() != param.shape.as_slice() {
        return Err(cx.bad(format!("consolidated shape {:?} != {:?}", full.shape(), param.shape)));
    }
    Ok(full)
}

/// Collapses the data-parallel members of one tensor-parallel rank.
fn join_dp(cx: &Ctx<'_>, mut group: Vec<&FragmentMsg>, dp_degree: u32, opts: UnionOptions) -> Result<(TpSlice, Tensor)> {
    let head = &group[0].entry;
    let tp_slice = head.tp_slice.clone();
    let local_shape = head.local_shape.clone();
    if group.iter().any(|m| m.entry.tp_slice != tp_slice || m.entry.local_shape != local_shape) {
        return Err(cx.overlap("one tensor-parallel rank reports two different slices".into()));
    }
    let flat_count = group.iter().filter(|m| m.entry.flat_range.is_some()).count();
    if flat_count == 0 {
        group.sort_by_key(|m| m.entry.placement.dp_rank);
        let keep = group[0];
        if opts.strict_replicate {
            for other in &group[1..] {
                if let Some(i) = other.tensor.first_difference(&keep.tensor) {
                    return Err(cx.mismatch(format!(
                        "rank {} differs from rank {} at element {i}",
                        other.rank, keep.rank
                    )));
                }
            }
        }
        if keep.tensor.shape() != local_shape.as_slice() {
            return Err(cx.bad(format!("fragment {:?} != slice {:?}", keep.tensor.shape(), local_shape)));
        }
        return Ok((tp_slice, keep.tensor.clone()));
    }
    if flat_count != group.len() {
        return Err(cx.bad("mix of flat and unflattened fragments".into()));
    }

    group.sort_by_key(|m| m.entry.flat_range.unwrap());
    let mut cursor = 0;
    let mut pad = 0;
    for m in &group {
        let (s, e) = m.entry.flat_range.unwrap();
        if s < cursor {
            return Err(cx.overlap(format!("flat range {s}..{e} overlaps previous end {cursor}")));
        }
        if s > cursor {
            return Err(cx.missing(format!("flat gap {cursor}..{s}")));
        }
        if m.tensor.numel() != e - s {
            return Err(cx.bad(format!("flat range {s}..{e} holds {} elements", m.tensor.numel())));
        }
        cursor = e;
        pad += m.entry.pad_elems;
    }
    if group.len() != dp_degree as usize {
        return Err(cx.missing(format!("{} of {dp_degree} flat shards", group.len())));
    }
    let local_numel = numel_of(&local_shape);
    if cursor != local_numel + pad {
        return Err(cx.missing(format!("flat shards cover {cursor} of {} padded elements", local_numel + pad)));
    }
    let parts: Vec<Tensor> = group.iter().map(|m| m.tensor.clone()).collect();
    let joined = Tensor::concat(&parts, 0)?;
    let local = strip_pad(joined, pad, &local_shape).map_err(|e| e.in_param(cx.param))?;
    Ok((tp_slice, local))
}

fn combine_tp(
    cx: &Ctx<'_>,
    param: &ParamSpec,
    pattern: &Pattern,
    pieces: Vec<(u32, (TpSlice, Tensor))>,
    opts: UnionOptions,
) -> Result<Tensor> {
    if pieces.len() == 1 {
        return Ok(pieces.into_iter().next().unwrap().1 .1);
    }
    match pattern {
        Pattern::Unique => Err(cx.overlap(format!("unique parameter held by {} ranks", pieces.len()))),
        Pattern::Replicate => {
            let (r0, (_, keep)) = &pieces[0];
            if opts.strict_replicate {
                for (r, (_, t)) in &pieces[1..] {
                    if let Some(i) = t.first_difference(keep) {
                        return Err(cx.mismatch(format!("tp rank {r} differs from tp rank {r0} at element {i}")));
                    }
                }
            }
            Ok(keep.clone())
        }
        Pattern::Partial => partial_mean(cx, &pieces),
        Pattern::ShardV | Pattern::ShardH => {
            let mut axis_parts = Vec::with_capacity(pieces.len());
            for (_, (slice, t)) in pieces {
                match slice {
                    TpSlice::Axis { axis, start, end } => axis_parts.push((axis, start, end, t)),
                    other => return Err(cx.bad(format!("{pattern:?} fragment with slice {other:?}"))),
                }
            }
            let axis = axis_parts[0].0;
            if axis_parts.iter().any(|p| p.0 != axis) {
                return Err(cx.bad("shards split along different axes".into()));
            }
            axis_parts.sort_by_key(|p| p.1);
            let extent = *param.shape.get(axis).ok_or_else(|| cx.bad(format!("no axis {axis}")))?;
            check_cover(cx, axis_parts.iter().map(|p| (p.1, p.2)), 0, extent)?;
            let parts: Vec<Tensor> = axis_parts.into_iter().map(|p| p.3).collect();
            Tensor::concat(&parts, axis)
        }
        Pattern::ShardHy => {
            let mut blocks = Vec::with_capacity(pieces.len());
            for (_, (slice, t)) in pieces {
                match slice {
                    TpSlice::Block { rows, cols } => blocks.push((rows, cols, t)),
                    other => return Err(cx.bad(format!("ShardHy fragment with slice {other:?}"))),
                }
            }
            blocks.sort_by_key(|b| (b.0, b.1));
            let mut bands: Vec<((usize, usize), Vec<((usize, usize), Tensor)>)> = Vec::new();
            for (rows, cols, t) in blocks {
                match bands.last_mut() {
                    Some((r, band)) if *r == rows => band.push((cols, t)),
                    _ => bands.push((rows, vec![(cols, t)])),
                }
            }
            check_cover(cx, bands.iter().map(|b| b.0), 0, param.shape[0])?;
            let mut band_tensors = Vec::with_capacity(bands.len());
            for (_, band) in bands {
                check_cover(cx, band.iter().map(|b| b.0), 0, param.shape[1])?;
                let parts: Vec<Tensor> = band.into_iter().map(|b| b.1).collect();
                band_tensors.push(Tensor::concat(&parts, 1)?);
            }
            Tensor::concat(&band_tensors, 0)
        }
        Pattern::ShardNC(segments) => {
            // Every rank holds one row range per segment, concatenated in segment order.
            let mut per_segment: Vec<Vec<(usize, Tensor)>> = vec![Vec::new(); segments.len()];
            for (r, (slice, t)) in pieces {
                let TpSlice::Rows(rows) = slice else {
                    return Err(cx.bad(format!("ShardNC fragment with slice {slice:?}")));
                };
                if rows.len() != segments.len() {
                    return Err(cx.bad(format!("tp rank {r} holds {} segments, expected {}", rows.len(), segments.len())));
                }
                let mut local_row = 0;
                for (s, &(off, len)) in rows.iter().enumerate() {
                    per_segment[s].push((off, t.slice_axis(0, local_row, local_row + len)?));
                    local_row += len;
                }
            }
            let mut ordered = Vec::new();
            for (s, mut parts) in per_segment.into_iter().enumerate() {
                parts.sort_by_key(|p| p.0);
                let (seg_off, seg_len) = segments[s];
                let spans = parts.iter().map(|(off, t)| (*off, off + t.shape()[0]));
                check_cover(cx, spans, seg_off, seg_off + seg_len)?;
                ordered.extend(parts.into_iter().map(|p| p.1));
            }
            Tensor::concat(&ordered, 0)
        }
    }
}

fn check_cover(cx: &Ctx<'_>, spans: impl Iterator<Item = (usize, usize)>, from: usize, to: usize) -> Result<()> {
    let mut cursor = from;
    for (s, e) in spans {
        if s < cursor {
            return Err(cx.overlap(format!("span {s}..{e} overlaps previous end {cursor}")));
        }
        if s > cursor {
            return Err(cx.missing(format!("gap {cursor}..{s}")));
        }
        cursor = e;
    }
    if cursor != to {
        return Err(cx.missing(format!("coverage ends at {cursor}, expected {to}")));
    }
    Ok(())
}

/// Elementwise mean in f64, summed in ascending rank order.
fn partial_mean(cx: &Ctx<'_>, pieces: &[(u32, (TpSlice, Tensor))]) -> Result<Tensor> {
    let shape = pieces[0].1 .1.shape().to_vec();
    let n = pieces[0].1 .1.numel();
    // -0.0 is the additive identity that also preserves a sum of negative zeros.
    let mut acc = vec![-0.0f64; n];
    for (r, (_, t)) in pieces {
        if t.shape() != shape.as_slice() {
            return Err(cx.bad(format!("partial member {r} has shape {:?}", t.shape())));
        }
        let data = t
            .as_f32()
            .ok_or_else(|| cx.bad("partial fragments must be f32".into()))?;
        for (a, &x) in acc.iter_mut().zip(data) {
            *a += x as f64;
        }
    }
    let count = pieces.len() as f64;
    Tensor::from_f32(shape, acc.into_iter().map(|s| (s / count) as f32).collect())
}
