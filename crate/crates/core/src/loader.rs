//! Loading atomic checkpoints into a target rank set.
//!
//! Loading proceeds one load slot (embedding, each layer, head) at a time and
//! one data-parallel group at a time within a slot. With redundancy bypass,
//! each atomic file needed by a group is read by exactly one member and
//! handed to the others in memory; the counters below record what a real
//! cluster would see.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::atomic::AtomicCheckpoint;
use crate::error::{Result, UcpError};
use crate::model::{Metadata, ModelSpec, StateKind};
use crate::parallel::{check_compatible, fragment_layout, materialize, FragmentLayout, ParallelConfig, Placement};
use crate::partition::{DistributedCheckpoint, RankShards, Shard, ShardEntry};
use crate::reconfig::{convert, ConvertOptions};
use crate::tensor::{DType, Tensor};

pub const LOAD_STATS_FORMAT_VERSION: u32 = 1;

/// What one target rank holds of one `(param, kind)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceInfo {
    pub param: String,
    pub kind: StateKind,
    pub layout: FragmentLayout,
    /// Ranks with the same id hold bit-identical fragments.
    pub replication_group: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankInfo {
    pub rank: u32,
    pub placement: Placement,
    pub dp_group: u32,
    pub slices: Vec<SliceInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UcpInfo {
    pub config: ParallelConfig,
    pub ranks: Vec<RankInfo>,
}

impl UcpInfo {
    pub fn slice(&self, rank: u32, param: &str, kind: StateKind) -> Option<&SliceInfo> {
        self.ranks[rank as usize]
            .slices
            .iter()
            .find(|s| s.param == param && s.kind == kind)
    }
}

/// Maps every target rank to the slices it needs, using the same layout rules
/// that produced distributed checkpoints.
pub fn ucp_info(spec: &ModelSpec, tgt: &ParallelConfig) -> Result<UcpInfo> {
    check_compatible(spec, tgt)?;
    let mut groups: HashMap<(String, StateKind), Vec<String>> = HashMap::new();
    let mut ranks = Vec::with_capacity(tgt.world_size() as usize);
    for placement in tgt.placements() {
        let mut slices = Vec::new();
        for p in &spec.params {
            for kind in StateKind::ALL {
                let Some(layout) = fragment_layout(spec, p, kind, tgt, placement)? else {
                    continue;
                };
                let key = format!("{:?}|{:?}|{:?}", layout.tp_slice, layout.flat_range, layout.partial);
                let seen = groups.entry((p.name.clone(), kind)).or_default();
                let id = match seen.iter().position(|k| *k == key) {
                    Some(i) => i,
                    None => {
                        seen.push(key);
                        seen.len() - 1
                    }
                };
                slices.push(SliceInfo {
                    param: p.name.clone(),
                    kind,
                    layout,
                    replication_group: id as u32,
                });
            }
        }
        ranks.push(RankInfo {
            rank: tgt.rank_of(placement),
            placement,
            dp_group: tgt.dp_group(placement),
            slices,
        });
    }
    Ok(UcpInfo {
        config: tgt.clone(),
        ranks,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadOptions {
    pub dtype: DType,
    /// Read each file once per data-parallel group instead of once per rank.
    pub bypass: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            dtype: DType::F32,
            bypass: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankLoadStats {
    pub rank: u32,
    pub files_read: u64,
    pub bytes_read: u64,
    /// Consolidated tensors received from a peer instead of storage.
    pub transfers_in: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadStats {
    pub format_version: u32,
    pub files_read: u64,
    pub bytes_read: u64,
    pub transfers: u64,
    /// Largest number of consolidated elements resident across a data-parallel
    /// group at once, counting each member's gathered copy.
    pub peak_resident_elements: u64,
    /// Largest single-slot consolidated size times the data-parallel degree.
    pub resident_bound_elements: u64,
    /// Files read per data-parallel group, indexed by group id.
    pub group_files_read: Vec<u64>,
    pub per_rank: Vec<RankLoadStats>,
}

/// A simulated target world after loading.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedWorld {
    pub config: ParallelConfig,
    pub step: u64,
    pub metadata: Metadata,
    pub ranks: Vec<RankShards>,
    pub stats: LoadStats,
}

fn cast_weight(kind: StateKind, t: Tensor, dtype: DType) -> Result<Tensor> {
    if kind == StateKind::Weight && dtype != DType::F32 {
        t.cast(dtype)
    } else {
        Ok(t)
    }
}

/// Loads an atomic checkpoint under `tgt`.
pub fn load(atomic: &AtomicCheckpoint, tgt: &ParallelConfig, opts: LoadOptions) -> Result<LoadedWorld> {
    let spec = &atomic.spec;
    let info = ucp_info(spec, tgt)?;
    let dp = tgt.dp as usize;
    let n_groups = (tgt.tp * tgt.pp) as usize;

    let mut slots: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, p) in spec.params.iter().enumerate() {
        slots.entry(p.load_slot(spec.n_layers)).or_default().push(i);
    }
    let slot_numel = |idx: &[usize]| -> u64 { idx.iter().map(|&i| 3 * spec.params[i].numel() as u64).sum() };
    let bound = slots.values().map(|v| slot_numel(v)).max().unwrap_or(0) * dp as u64;

    // Rank members of each data-parallel group, ordered by dp_rank.
    let mut members: Vec<Vec<u32>> = vec![Vec::new(); n_groups];
    for r in &info.ranks {
        members[r.dp_group as usize].push(r.rank);
    }
    let param_index: HashMap<&str, usize> = spec.params.iter().enumerate().map(|(i, p)| (p.name.as_str(), i)).collect();

    let mut stats = LoadStats {
        format_version: LOAD_STATS_FORMAT_VERSION,
        resident_bound_elements: bound,
        group_files_read: vec![0; n_groups],
        per_rank: (0..tgt.world_size()).map(|rank| RankLoadStats { rank, ..Default::default() }).collect(),
        ..Default::default()
    };
    let mut out: Vec<BTreeMap<(usize, usize), Shard>> = vec![BTreeMap::new(); info.ranks.len()];

    for idx in slots.values() {
        for (g, group) in members.iter().enumerate() {
            let head = &info.ranks[group[0] as usize];
            // Files this group needs in this slot; every member needs the same set.
            let mut files: Vec<(usize, StateKind, u64)> = Vec::new();
            for &i in idx {
                let name = spec.params[i].name.as_str();
                for kind in StateKind::ALL {
                    if head.slices.iter().any(|s| s.param == name && s.kind == kind) {
                        files.push((i, kind, atomic.file_len(name, kind)?));
                    }
                }
            }
            if files.is_empty() {
                continue;
            }
            files.sort_by(|a, b| b.2.cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));

            // Reader of each file: round-robin over members, largest files first.
            let reads: Vec<(usize, u32)> = if opts.bypass {
                (0..files.len()).map(|f| (f, group[f % group.len()])).collect()
            } else {
                (0..files.len()).flat_map(|f| group.iter().map(move |&r| (f, r))).collect()
            };
            let loaded: Vec<(usize, u32, Arc<Tensor>)> = reads
                .par_iter()
                .map(|&(f, r)| {
                    let (i, kind, _) = files[f];
                    let t = atomic.read(&spec.params[i].name, kind)?;
                    Ok((f, r, Arc::new(t)))
                })
                .collect::<Result<_>>()?;

            let mut full: Vec<Option<Arc<Tensor>>> = vec![None; files.len()];
            for (f, r, t) in loaded {
                let rs = &mut stats.per_rank[r as usize];
                rs.files_read += 1;
                rs.bytes_read += files[f].2;
                stats.files_read += 1;
                stats.bytes_read += files[f].2;
                stats.group_files_read[g] += 1;
                full[f].get_or_insert(t);
            }
            if opts.bypass {
                for f in 0..files.len() {
                    let reader = group[f % group.len()];
                    for &r in group.iter().filter(|&&r| r != reader) {
                        stats.per_rank[r as usize].transfers_in += 1;
                        stats.transfers += 1;
                    }
                }
            }
            let resident: u64 = full.iter().flatten().map(|t| t.numel() as u64).sum::<u64>() * group.len() as u64;
            stats.peak_resident_elements = stats.peak_resident_elements.max(resident);
            if resident > bound {
                return Err(UcpError::ShapeMismatch(format!(
                    "loader holds {resident} elements, above its bound {bound}"
                )));
            }

            let by_key: HashMap<(usize, StateKind), &Tensor> =
                files.iter().zip(&full).map(|(&(i, k, _), t)| ((i, k), t.as_deref().unwrap())).collect();
            let built: Vec<(u32, Vec<((usize, usize), Shard)>)> = group
                .par_iter()
                .map(|&r| {
                    let ri = &info.ranks[r as usize];
                    let mut shards = Vec::new();
                    for s in &ri.slices {
                        let i = param_index[s.param.as_str()];
                        let Some(src) = by_key.get(&(i, s.kind)) else { continue };
                        let p = &spec.params[i];
                        let t = materialize(src, &s.layout).and_then(|t| cast_weight(s.kind, t, opts.dtype));
                        let t = t.map_err(|e| e.in_param(&p.name).in_rank(r.to_string()))?;
                        let entry = ShardEntry::new(p, s.kind, &s.layout, ri.placement, tgt);
                        shards.push(((i, s.kind as usize), Shard { entry, tensor: t }));
                    }
                    Ok((r, shards))
                })
                .collect::<Result<_>>()?;
            for (r, shards) in built {
                out[r as usize].extend(shards);
            }
        }
    }

    let ranks = info
        .ranks
        .iter()
        .zip(out)
        .map(|(ri, shards)| RankShards {
            rank: ri.rank,
            placement: ri.placement,
            shards: shards.into_values().collect(),
        })
        .collect();
    Ok(LoadedWorld {
        config: tgt.clone(),
        step: atomic.meta.step,
        metadata: atomic.meta.metadata.clone(),
        ranks,
        stats,
    })
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ResumeOptions {
    pub load: LoadOptions,
    pub convert: ConvertOptions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResumeOutcome {
    pub world: LoadedWorld,
    /// Number of conversions this resume ran: 0 on the lazy path, else 1.
    pub conversions: u32,
}

/// Resumes a distributed checkpoint under `tgt`. The checkpoint is only
/// converted when `tgt` differs from the configuration it was saved under.
pub fn resume(ckpt_dir: &Path, tgt: &ParallelConfig, scratch_dir: &Path, opts: ResumeOptions) -> Result<ResumeOutcome> {
    let ckpt = DistributedCheckpoint::open(ckpt_dir)?;
    check_compatible(&ckpt.spec, tgt)?;
    if ckpt.parallel() == tgt {
        return Ok(ResumeOutcome {
            world: load_direct(&ckpt, opts.load.dtype)?,
            conversions: 0,
        });
    }
    let (atomic, _) = convert(&ckpt, scratch_dir, opts.convert)?;
    Ok(ResumeOutcome {
        world: load(&atomic, tgt, opts.load)?,
        conversions: 1,
    })
}

/// Lazy path: every rank reads back its own shards.
pub fn load_direct(ckpt: &DistributedCheckpoint, dtype: DType) -> Result<LoadedWorld> {
    let mut ranks = ckpt.read_world()?;
    let cfg = ckpt.parallel();
    let mut stats = LoadStats {
        format_version: LOAD_STATS_FORMAT_VERSION,
        group_files_read: vec![0; (cfg.tp * cfg.pp) as usize],
        ..Default::default()
    };
    for r in &mut ranks {
        let mut rs = RankLoadStats {
            rank: r.rank,
            ..Default::default()
        };
        for s in &mut r.shards {
            let bytes = std::fs::metadata(ckpt.rank_dir(r.rank).join(&s.entry.file))
                .map(|m| m.len())
                .unwrap_or(0);
            rs.files_read += 1;
            rs.bytes_read += bytes;
            s.tensor = cast_weight(s.entry.kind, std::mem::replace(&mut s.tensor, Tensor::scalar(0.0)), dtype)?;
        }
        stats.files_read += rs.files_read;
        stats.bytes_read += rs.bytes_read;
        stats.group_files_read[cfg.dp_group(r.placement) as usize] += rs.files_read;
        stats.per_rank.push(rs);
    }
    Ok(LoadedWorld {
        config: cfg.clone(),
        step: ckpt.config.step,
        metadata: ckpt.config.metadata.clone(),
        ranks,
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_state, make_model, ModelFamily, ModelScale, ParamKind, ParamSpec};
    use crate::parallel::ZeroStage;
    use crate::partition::{partition, shard_world};

    fn flat_1024() -> ModelSpec {
        ModelSpec {
            name: "flat".into(),
            n_layers: 1,
            tied_pairs: vec![],
            params: vec![ParamSpec {
                name: "w".into(),
                shape: vec![1024],
                layer_index: 0,
                kind: ParamKind::LayerNormWeight,
                tp_axis_hint: None,
                nc_segments: None,
            }],
        }
    }

    #[test]
    fn zero3_slices_for_dp2_and_dp3() {
        let spec = flat_1024();
        let info = ucp_info(&spec, &ParallelConfig::new(2, 1, 1, ZeroStage::Z3)).unwrap();
        for r in &info.ranks {
            let s = &r.slices[0].layout;
            assert_eq!((s.numel(), s.pad_elems), (512, 0));
        }
        let info = ucp_info(&spec, &ParallelConfig::new(3, 1, 1, ZeroStage::Z3)).unwrap();
        let got: Vec<_> = info.ranks.iter().map(|r| (r.slices[0].layout.numel(), r.slices[0].layout.pad_elems)).collect();
        assert_eq!(got, vec![(342, 0), (342, 0), (342, 2)]);
        let ids: Vec<_> = info.ranks.iter().map(|r| r.slices[0].replication_group).collect();
        assert_eq!(ids, vec![0, 1, 2]);
    }

    #[test]
    fn all_ones_target_gets_full_tensors() {
        let spec = make_model(ModelFamily::DenseGPT, &ModelScale::new(2, 16)).unwrap();
        let info = ucp_info(&spec, &ParallelConfig::default()).unwrap();
        assert_eq!(info.ranks.len(), 1);
        for s in &info.ranks[0].slices {
            assert_eq!(s.layout.local_shape, spec.param(&s.param).unwrap().shape);
            assert_eq!(s.layout.flat_range, None);
        }
    }

    #[test]
    fn z0_replicas_share_a_replication_group() {
        let spec = make_model(ModelFamily::DenseGPT, &ModelScale::new(2, 16)).unwrap();
        let info = ucp_info(&spec, &ParallelConfig::new(2, 2, 1, ZeroStage::Z0)).unwrap();
        let id = |rank, p| info.slice(rank, p, StateKind::Weight).unwrap().replication_group;
        // ranks 0,1 are tp_rank 0; ranks 2,3 tp_rank 1.
        assert_eq!(id(0, "embed.weight"), id(1, "embed.weight"));
        assert_ne!(id(0, "embed.weight"), id(2, "embed.weight"));
        assert_eq!(id(0, "layers.0.ln1.weight"), id(3, "layers.0.ln1.weight"));
    }

    #[test]
    fn load_matches_direct_partition_and_counts_reads() {
        let spec = make_model(ModelFamily::MoE, &ModelScale { n_experts: Some(4), ..ModelScale::new(2, 32) }).unwrap();
        let st = init_state(&spec, 5);
        let dir = tempfile::tempdir().unwrap();
        let atomic = AtomicCheckpoint::save_state(&spec, &st, dir.path(), "test").unwrap();
        let n_files = spec.params.len() as u64 * 3;
        for cfg in [
            ParallelConfig::new(4, 1, 1, ZeroStage::Z1),
            ParallelConfig::new(2, 2, 2, ZeroStage::Z0),
            ParallelConfig::new(1, 2, 2, ZeroStage::Z1),
        ] {
            let world = load(&atomic, &cfg, LoadOptions::default()).unwrap();
            assert_eq!(world.ranks, shard_world(&spec, &st, &cfg).unwrap(), "{}", cfg.short());
            assert!(world.stats.peak_resident_elements <= world.stats.resident_bound_elements);
            // Each group reads the files of the params its stage owns, once.
            assert_eq!(world.stats.files_read, n_files * cfg.tp as u64);
            let no_bypass = load(&atomic, &cfg, LoadOptions { bypass: false, ..Default::default() }).unwrap();
            assert_eq!(no_bypass.ranks, world.ranks);
            assert_eq!(no_bypass.stats.files_read, world.stats.files_read * cfg.dp as u64);
        }
    }

    #[test]
    fn bf16_load_casts_weights_only() {
        let spec = make_model(ModelFamily::DenseGPT, &ModelScale::new(1, 16)).unwrap();
        let st = init_state(&spec, 6);
        let dir = tempfile::tempdir().unwrap();
        let atomic = AtomicCheckpoint::save_state(&spec, &st, dir.path(), "test").unwrap();
        let world = load(&atomic, &ParallelConfig::new(2, 1, 1, ZeroStage::Z1), LoadOptions { dtype: DType::BF16, bypass: true }).unwrap();
        for s in &world.ranks[1].shards {
            let want = if s.entry.kind == StateKind::Weight { DType::BF16 } else { DType::F32 };
            assert_eq!(s.tensor.dtype(), want);
        }
    }

    #[test]
    fn resume_same_config_is_lazy() {
        let spec = make_model(ModelFamily::GQA, &ModelScale { q_heads: Some(8), kv_heads: Some(2), ..ModelScale::new(2, 64) }).unwrap();
        let st = init_state(&spec, 9);
        let dir = tempfile::tempdir().unwrap();
        let cfg = ParallelConfig::new(2, 2, 1, ZeroStage::Z1);
        partition(&spec, &st, &cfg, &dir.path().join("src"), 1).unwrap();
        let scratch = dir.path().join("scratch");
        let lazy = resume(&dir.path().join("src"), &cfg, &scratch, ResumeOptions::default()).unwrap();
        assert_eq!(lazy.conversions, 0);
        assert!(!scratch.exists());
        let eager = load(
            &convert(&DistributedCheckpoint::open(dir.path().join("src")).unwrap(), &dir.path().join("a"), ConvertOptions::default())
                .unwrap()
                .0,
            &cfg,
            LoadOptions::default(),
        )
        .unwrap();
        assert_eq!(lazy.world.ranks, eager.ranks);

        let other = ParallelConfig::new(1, 1, 2, ZeroStage::Z0);
        let moved = resume(&dir.path().join("src"), &other, &scratch, ResumeOptions::default()).unwrap();
        assert_eq!(moved.conversions, 1);
        assert_eq!(moved.world.ranks, shard_world(&spec, &st, &other).unwrap());
    }
}
