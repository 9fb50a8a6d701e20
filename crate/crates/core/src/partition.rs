//! Distributed checkpoints: per-rank shard directories coupled to one
//! parallel configuration.
//!
//! ```text
//! <root>/
//!   model.json           model schema
//!   config.json          parallel config, step, metadata, rank layout
//!   rank_<g>/
//!     shards.json        manifest, written after the rank's tensor files
//!     <param>.<kind>.ucpt
//! ```

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, UcpError};
use crate::io;
use crate::model::{Metadata, ModelSpec, ModelState, ParamSpec, StateKind};
use crate::parallel::{check_compatible, fragment_layout, materialize, FragmentLayout, ParallelConfig, Pattern, Placement, TpSlice};
use crate::tensor::{read_tensor, write_tensor, Tensor};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "shards.json";
pub const CONFIG_FILE: &str = "config.json";
pub const MODEL_FILE: &str = "model.json";
pub const RANK_LAYOUT: &str = "rank = (pp_rank * tp + tp_rank) * dp + dp_rank";

/// One manifest row: a fragment of one state kind of one parameter on one rank.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardEntry {
    pub param: String,
    pub kind: StateKind,
    pub pattern: Pattern,
    pub placement: Placement,
    pub tp_degree: u32,
    pub dp_degree: u32,
    pub tp_slice: TpSlice,
    /// Shape of the tensor-parallel slice before any ZeRO flattening.
    pub local_shape: Vec<usize>,
    pub flat_range: Option<(usize, usize)>,
    pub pad_elems: usize,
    /// Shape of the stored fragment.
    pub shape: Vec<usize>,
    pub file: String,
}

impl ShardEntry {
    pub fn new(p: &ParamSpec, kind: StateKind, layout: &FragmentLayout, placement: Placement, cfg: &ParallelConfig) -> Self {
        ShardEntry {
            param: p.name.clone(),
            kind,
            pattern: layout.pattern.clone(),
            placement,
            tp_degree: cfg.tp,
            dp_degree: cfg.dp,
            tp_slice: layout.tp_slice.clone(),
            local_shape: layout.local_shape.clone(),
            flat_range: layout.flat_range,
            pad_elems: layout.pad_elems,
            shape: layout.fragment_shape(),
            file: shard_file_name(&p.name, kind),
        }
    }
}

pub fn shard_file_name(param: &str, kind: StateKind) -> String {
    format!("{param}.{}.ucpt", kind.label())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankManifest {
    pub format_version: u32,
    pub rank: u32,
    pub placement: Placement,
    pub shards: Vec<ShardEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub format_version: u32,
    pub parallel: ParallelConfig,
    pub step: u64,
    pub metadata: Metadata,
    pub rank_layout: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Shard {
    pub entry: ShardEntry,
    pub tensor: Tensor,
}

/// Everything one rank holds in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct RankShards {
    pub rank: u32,
    pub placement: Placement,
    pub shards: Vec<Shard>,
}

impl RankShards {
    pub fn manifest(&self) -> RankManifest {
        RankManifest {
            format_version: CHECKPOINT_FORMAT_VERSION,
            rank: self.rank,
            placement: self.placement,
            shards: self.shards.iter().map(|s| s.entry.clone()).collect(),
        }
    }

    pub fn find(&self, param: &str, kind: StateKind) -> Option<&Shard> {
        self.shards.iter().find(|s| s.entry.param == param && s.entry.kind == kind)
    }
}

pub fn rank_dir_name(rank: u32) -> String {
    format!("rank_{rank}")
}

/// Fragments held by one rank under `cfg`, in model order.
pub fn rank_shards(spec: &ModelSpec, state: &ModelState, cfg: &ParallelConfig, placement: Placement) -> Result<RankShards> {
    let mut shards = Vec::new();
    for p in &spec.params {
        let st = state
            .params
            .get(&p.name)
            .ok_or_else(|| UcpError::ShapeMismatch(format!("state lacks `{}`", p.name)))?;
        for kind in StateKind::ALL {
            let Some(layout) = fragment_layout(spec, p, kind, cfg, placement)? else {
                continue;
            };
            let tensor = materialize(st.get(kind), &layout).map_err(|e| e.in_param(&p.name))?;
            shards.push(Shard {
                entry: ShardEntry::new(p, kind, &layout, placement, cfg),
                tensor,
            });
        }
    }
    Ok(RankShards {
        rank: cfg.rank_of(placement),
        placement,
        shards,
    })
}

/// In-memory view of every rank's shards.
pub fn shard_world(spec: &ModelSpec, state: &ModelState, cfg: &ParallelConfig) -> Result<Vec<RankShards>> {
    check_compatible(spec, cfg)?;
    cfg.placements().map(|p| rank_shards(spec, state, cfg, p)).collect()
}

fn write_rank(root: &Path, rank: &RankShards) -> Result<()> {
    let dir = root.join(rank_dir_name(rank.rank));
    io::create_dir(&dir)?;
    for s in &rank.shards {
        write_tensor(dir.join(&s.entry.file), &s.tensor)?;
    }
    io::write_json(&dir.join(MANIFEST_FILE), &rank.manifest())
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| UcpError::io("<thread pool>", std::io::Error::other(e)))
}

/// Writes a list of rank shard sets as a distributed checkpoint.
pub fn write_world(
    spec: &ModelSpec,
    cfg: &ParallelConfig,
    step: u64,
    metadata: &Metadata,
    ranks: &[RankShards],
    out_dir: &Path,
    workers: usize,
) -> Result<DistributedCheckpoint> {
    io::prepare_empty_dir(out_dir)?;
    pool(workers)?.install(|| ranks.par_iter().try_for_each(|r| write_rank(out_dir, r)))?;
    finish_checkpoint(spec, cfg, step, metadata, out_dir)
}

fn finish_checkpoint(spec: &ModelSpec, cfg: &ParallelConfig, step: u64, metadata: &Metadata, out_dir: &Path) -> Result<DistributedCheckpoint> {
    spec.save(&out_dir.join(MODEL_FILE))?;
    let config = CheckpointConfig {
        format_version: CHECKPOINT_FORMAT_VERSION,
        parallel: cfg.clone(),
        step,
        metadata: metadata.clone(),
        rank_layout: RANK_LAYOUT.into(),
    };
    io::write_json(&out_dir.join(CONFIG_FILE), &config)?;
    Ok(DistributedCheckpoint {
        root: out_dir.to_path_buf(),
        spec: spec.clone(),
        config,
    })
}

/// Saves `state` as each rank of `cfg` would, using `workers` writer threads.
pub fn partition(spec: &ModelSpec, state: &ModelState, cfg: &ParallelConfig, out_dir: &Path, workers: usize) -> Result<DistributedCheckpoint> {
    check_compatible(spec, cfg)?;
    state.validate(spec)?;
    io::prepare_empty_dir(out_dir)?;
    let placements: Vec<Placement> = cfg.placements().collect();
    pool(workers)?.install(|| {
        placements.par_iter().try_for_each(|&pl| {
            let shards = rank_shards(spec, state, cfg, pl)?;
            write_rank(out_dir, &shards)
        })
    })?;
    finish_checkpoint(spec, cfg, state.step, &state.metadata, out_dir)
}

/// Handle on a distributed checkpoint directory.
#[derive(Debug, Clone)]
pub struct DistributedCheckpoint {
    pub root: PathBuf,
    pub spec: ModelSpec,
    pub config: CheckpointConfig,
}

impl DistributedCheckpoint {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let spec = ModelSpec::load(&root.join(MODEL_FILE))?;
        let config: CheckpointConfig = io::read_json(&root.join(CONFIG_FILE))?;
        if config.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(UcpError::Manifest {
                path: root.join(CONFIG_FILE),
                reason: format!("unsupported format_version {}", config.format_version),
            });
        }
        let ckpt = DistributedCheckpoint { root, spec, config };
        let expected: BTreeSet<String> = (0..ckpt.world_size()).map(rank_dir_name).collect();
        let found: BTreeSet<String> = std::fs::read_dir(&ckpt.root)
            .map_err(|e| UcpError::io(&ckpt.root, e))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n.starts_with("rank_"))
            .collect();
        if expected != found {
            return Err(UcpError::Manifest {
                path: ckpt.root.clone(),
                reason: format!("expected {} rank directories, found {:?}", expected.len(), found),
            });
        }
        Ok(ckpt)
    }

    pub fn parallel(&self) -> &ParallelConfig {
        &self.config.parallel
    }

    pub fn world_size(&self) -> u32 {
        self.config.parallel.world_size()
    }

    pub fn rank_dir(&self, rank: u32) -> PathBuf {
        self.root.join(rank_dir_name(rank))
    }

    pub fn rank_dirs(&self) -> Vec<PathBuf> {
        (0..self.world_size()).map(|r| self.rank_dir(r)).collect()
    }

    pub fn manifest(&self, rank: u32) -> Result<RankManifest> {
        read_manifest(&self.rank_dir(rank))
    }

    /// Reads every rank's shards back into memory.
    pub fn read_world(&self) -> Result<Vec<RankShards>> {
        (0..self.world_size())
            .map(|rank| {
                let dir = self.rank_dir(rank);
                let m = read_manifest(&dir)?;
                let shards = m
                    .shards
                    .into_iter()
                    .map(|entry| {
                        let tensor = read_tensor(dir.join(&entry.file))?;
                        Ok(Shard { entry, tensor })
                    })
                    .collect::<Result<Vec<_>>>()
                    .map_err(|e| e.in_rank(rank.to_string()))?;
                Ok(RankShards {
                    rank,
                    placement: m.placement,
                    shards,
                })
            })
            .collect()
    }
}

pub fn read_manifest(rank_dir: &Path) -> Result<RankManifest> {
    let path = rank_dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(UcpError::Manifest {
            path,
            reason: "missing shards.json".into(),
        });
    }
    let m: RankManifest = io::read_json(&path)?;
    if m.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(UcpError::Manifest {
            path,
            reason: format!("unsupported format_version {}", m.format_version),
        });
    }
    Ok(m)
}
