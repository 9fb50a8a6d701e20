//! Training a simulated world shard by shard.
//!
//! Each rank updates only what it owns, the way a real data-parallel job
//! would: ZeRO-1 ranks step the weight elements covered by their moment
//! slice and then all-gather the weight; replicas step independently; partial
//! tensor-parallel copies are averaged before the step and re-diverge after.

use std::collections::BTreeMap;

use ucp_core::loader::LoadedWorld;
use ucp_core::model::{train_fragment, ModelSpec, StateKind, TrainerConfig};
use ucp_core::parallel::{partial_value, Pattern};
use ucp_core::partition::RankShards;
use ucp_core::{Result, UcpError};

use crate::oracle::IndexMap;

fn find(rank: &RankShards, param: &str, kind: StateKind) -> Option<usize> {
    rank.shards.iter().position(|s| s.entry.param == param && s.entry.kind == kind)
}

fn f32_data(rank: &mut RankShards, i: usize) -> Result<&mut [f32]> {
    let s = &mut rank.shards[i];
    let name = s.entry.param.clone();
    s.tensor
        .as_f32_mut()
        .ok_or_else(|| UcpError::DTypeMismatch(format!("training needs f32 state, `{name}` is not")))
}

/// Runs `n` optimizer steps on every rank of `world`.
pub fn train_world(spec: &ModelSpec, world: &mut LoadedWorld, cfg: &TrainerConfig, n: u64) -> Result<()> {
    cfg.validate()?;
    let from = world.step;
    let ranks = &mut world.ranks;

    sync_partials(ranks)?;

    for rank in ranks.iter_mut() {
        for p in &spec.params {
            let (Some(wi), Some(mi), Some(vi)) = (
                find(rank, &p.name, StateKind::Weight),
                find(rank, &p.name, StateKind::AdamM),
                find(rank, &p.name, StateKind::AdamV),
            ) else {
                continue;
            };
            let w_entry = rank.shards[wi].entry.clone();
            let m_entry = rank.shards[mi].entry.clone();
            let map = IndexMap::new(&m_entry, &p.shape);
            let w_map = IndexMap::new(&w_entry, &p.shape);
            // Slice positions this rank steps, with their offsets in each fragment.
            let m_len = rank.shards[mi].tensor.numel();
            let owned: Vec<usize> = (0..m_len).filter_map(|j| map.local(j)).collect();
            let w_off = |l: usize| l - w_entry.flat_range.map_or(0, |r| r.0);
            let m_off = |l: usize| l - m_entry.flat_range.map_or(0, |r| r.0);

            let wd = f32_data(rank, wi)?;
            let mut w: Vec<f32> = owned.iter().map(|&l| wd[w_off(l)]).collect();
            let md = f32_data(rank, mi)?;
            let mut m: Vec<f32> = owned.iter().map(|&l| md[m_off(l)]).collect();
            let vd = f32_data(rank, vi)?;
            let mut v: Vec<f32> = owned.iter().map(|&l| vd[m_off(l)]).collect();

            let root = spec.tied_root(&p.name);
            train_fragment(cfg, root, from, n, |k| w_map.global(owned[k]) as u64, &mut w, &mut m, &mut v);

            let wd = f32_data(rank, wi)?;
            for (k, &l) in owned.iter().enumerate() {
                wd[w_off(l)] = w[k];
            }
            let md = f32_data(rank, mi)?;
            for (k, &l) in owned.iter().enumerate() {
                md[m_off(l)] = m[k];
            }
            let vd = f32_data(rank, vi)?;
            for (k, &l) in owned.iter().enumerate() {
                vd[m_off(l)] = v[k];
            }
        }
    }

    gather_weights(ranks)?;
    rediverge_partials(ranks)?;

    world.step = from + n;
    world.metadata.insert("iteration".into(), world.step as f64);
    Ok(())
}

/// Averages every partial fragment with its tensor-parallel peers.
fn sync_partials(ranks: &mut [RankShards]) -> Result<()> {
    // Peers share param, kind, stage, dp rank and fragment range; tp rank differs.
    let mut groups: BTreeMap<(String, StateKind, u32, u32), Vec<(usize, usize)>> = BTreeMap::new();
    for (ri, r) in ranks.iter().enumerate() {
        for (si, s) in r.shards.iter().enumerate() {
            if s.entry.pattern == Pattern::Partial {
                let pl = s.entry.placement;
                groups
                    .entry((s.entry.param.clone(), s.entry.kind, pl.pp_rank, pl.dp_rank))
                    .or_default()
                    .push((ri, si));
            }
        }
    }
    for members in groups.values() {
        let len = ranks[members[0].0].shards[members[0].1].tensor.numel();
        let mut acc = vec![-0.0f64; len];
        for &(ri, si) in members {
            for (a, &x) in acc.iter_mut().zip(f32_data(&mut ranks[ri], si)?.iter()) {
                *a += x as f64;
            }
        }
        let count = members.len() as f64;
        for &(ri, si) in members {
            for (x, a) in f32_data(&mut ranks[ri], si)?.iter_mut().zip(&acc) {
                *x = (a / count) as f32;
            }
        }
    }
    Ok(())
}

fn rediverge_partials(ranks: &mut [RankShards]) -> Result<()> {
    for r in ranks.iter_mut() {
        for si in 0..r.shards.len() {
            let e = r.shards[si].entry.clone();
            if e.pattern != Pattern::Partial {
                continue;
            }
            let start = e.flat_range.map_or(0, |f| f.0);
            let local_numel: usize = e.local_shape.iter().product();
            let (member, group) = (e.placement.tp_rank, e.tp_degree);
            for (j, x) in f32_data(r, si)?.iter_mut().enumerate() {
                let l = start + j;
                if l < local_numel {
                    *x = partial_value(*x, l as u64, member, group);
                }
            }
        }
    }
    Ok(())
}

/// ZeRO-1 all-gather: every replica of a weight takes each element from the
/// rank whose moment slice covers it.
fn gather_weights(ranks: &mut [RankShards]) -> Result<()> {
    let mut owners: BTreeMap<(String, u32, u32), Vec<(usize, (usize, usize))>> = BTreeMap::new();
    for (ri, r) in ranks.iter().enumerate() {
        for s in &r.shards {
            let e = &s.entry;
            if e.kind != StateKind::AdamM {
                continue;
            }
            let Some(range) = e.flat_range else { continue };
            let w = r
                .shards
                .iter()
                .find(|t| t.entry.param == e.param && t.entry.kind == StateKind::Weight)
                .expect("moments imply a weight");
            if w.entry.flat_range.is_none() {
                owners
                    .entry((e.param.clone(), e.placement.pp_rank, e.placement.tp_rank))
                    .or_default()
                    .push((ri, range));
            }
        }
    }
    for ((param, _, _), group) in owners {
        let wis: Vec<usize> = group
            .iter()
            .map(|&(ri, _)| find(&ranks[ri], &param, StateKind::Weight).unwrap())
            .collect();
        let len = ranks[group[0].0].shards[wis[0]].tensor.numel();
        let mut merged = vec![0.0f32; len];
        for (k, &(ri, (s, e))) in group.iter().enumerate() {
            let src = f32_data(&mut ranks[ri], wis[k])?;
            let end = e.min(len);
            if s < end {
                merged[s..end].copy_from_slice(&src[s..end]);
            }
        }
        for (k, &(ri, _)) in group.iter().enumerate() {
            f32_data(&mut ranks[ri], wis[k])?.copy_from_slice(&merged);
        }
    }
    Ok(())
}
