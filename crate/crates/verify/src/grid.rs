//! The round-trip grid and the resume-equivalence check.

use std::fmt;
use std::path::Path;

use ucp_core::atomic::AtomicCheckpoint;
use ucp_core::loader::{load, resume, LoadOptions, LoadStats, LoadedWorld, ResumeOptions};
use ucp_core::model::{init_state, make_model, train_steps, ModelFamily, ModelScale, ModelSpec, ModelState, TrainerConfig};
use ucp_core::parallel::{check_compatible, ParallelConfig, ZeroStage};
use ucp_core::partition::{partition, shard_world, write_world, DistributedCheckpoint};
use ucp_core::reconfig::{convert, ConvertOptions};
use ucp_core::Result;

use crate::oracle::{consolidate_oracle, consolidate_world};
use crate::train::train_world;

#[derive(Debug, Clone)]
pub struct ModelCase {
    pub label: String,
    pub family: ModelFamily,
    pub scale: ModelScale,
}

impl ModelCase {
    pub fn spec(&self) -> Result<ModelSpec> {
        make_model(self.family, &self.scale)
    }
}

/// The three acceptance models: dense, 4-expert MoE and 8q/2kv GQA, each with
/// 4 layers and hidden size 64.
pub fn default_models() -> Vec<ModelCase> {
    vec![
        ModelCase {
            label: "dense".into(),
            family: ModelFamily::DenseGPT,
            scale: ModelScale::new(4, 64),
        },
        ModelCase {
            label: "moe".into(),
            family: ModelFamily::MoE,
            scale: ModelScale {
                n_experts: Some(4),
                ..ModelScale::new(4, 64)
            },
        },
        ModelCase {
            label: "gqa".into(),
            family: ModelFamily::GQA,
            scale: ModelScale {
                q_heads: Some(8),
                kv_heads: Some(2),
                ..ModelScale::new(4, 64)
            },
        },
    ]
}

/// dp {1,2,4} x tp {1,2} x pp {1,2} x {Z0,Z1}, ZeRO-3 at tp = pp = 1, and the
/// interleaved schedule (v = 2) at pp = 2.
pub fn default_configs() -> Vec<ParallelConfig> {
    let mut out = Vec::new();
    for dp in [1, 2, 4] {
        for tp in [1, 2] {
            for pp in [1, 2] {
                for z in [ZeroStage::Z0, ZeroStage::Z1] {
                    out.push(ParallelConfig::new(dp, tp, pp, z));
                }
            }
        }
    }
    for dp in [1, 2, 4] {
        out.push(ParallelConfig::new(dp, 1, 1, ZeroStage::Z3));
    }
    for dp in [1, 2, 4] {
        for tp in [1, 2] {
            for z in [ZeroStage::Z0, ZeroStage::Z1] {
                out.push(ParallelConfig::new(dp, tp, 2, z).interleaved(2));
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct GridSpec {
    pub models: Vec<ModelCase>,
    pub configs: Vec<ParallelConfig>,
    pub seed: u64,
    pub convert: ConvertOptions,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            models: default_models(),
            configs: default_configs(),
            seed: 2024,
            convert: ConvertOptions {
                workers: 2,
                ..ConvertOptions::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub model: String,
    pub src: String,
    pub tgt: String,
    /// `None` on success, else what went wrong and where.
    pub failure: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GridReport {
    pub cells: Vec<CellResult>,
    /// Source configs checked directly against the oracle.
    pub oracle_checks: usize,
}

impl GridReport {
    pub fn failures(&self) -> impl Iterator<Item = &CellResult> {
        self.cells.iter().filter(|c| c.failure.is_some())
    }

    pub fn passed(&self) -> bool {
        self.failures().next().is_none()
    }
}

impl fmt::Display for GridReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let bad = self.failures().count();
        writeln!(f, "{} cells, {} passed, {} failed", self.cells.len(), self.cells.len() - bad, bad)?;
        for c in self.failures() {
            writeln!(f, "  FAIL {} {} -> {}: {}", c.model, c.src, c.tgt, c.failure.as_deref().unwrap_or(""))?;
        }
        Ok(())
    }
}

/// Names the first element where two states differ.
pub fn describe_difference(got: &ModelState, want: &ModelState) -> Option<String> {
    if let Some((param, kind, idx)) = got.first_difference(want) {
        let detail = match (got.params.get(&param), want.params.get(&param)) {
            (Some(g), Some(w)) => {
                let (g, w) = (g.get(kind), w.get(kind));
                if g.shape() != w.shape() {
                    format!("shape {:?} vs {:?}", g.shape(), w.shape())
                } else {
                    let coords = g.unravel(idx);
                    format!("at {coords:?}: {:#010x} vs {:#010x}", g.bits()[idx], w.bits()[idx])
                }
            }
            _ => "param missing".into(),
        };
        return Some(format!("`{param}`/{kind} {detail}"));
    }
    if got.step != want.step {
        return Some(format!("step {} vs {}", got.step, want.step));
    }
    if got.metadata != want.metadata {
        return Some(format!("metadata {:?} vs {:?}", got.metadata, want.metadata));
    }
    None
}

fn cell(model: &str, src: &ParallelConfig, tgt: &ParallelConfig, failure: Option<String>) -> CellResult {
    CellResult {
        model: model.into(),
        src: src.short(),
        tgt: tgt.short(),
        failure,
    }
}

/// partition -> convert -> load -> consolidate for every compatible source
/// and target pair, bit-exact against the original state. Scratch files live
/// under `scratch` and are removed per source.
pub fn verify_roundtrip(grid: &GridSpec, scratch: &Path) -> Result<GridReport> {
    let mut report = GridReport::default();
    for m in &grid.models {
        let spec = m.spec()?;
        let state = init_state(&spec, grid.seed);
        let configs: Vec<&ParallelConfig> = grid.configs.iter().filter(|c| check_compatible(&spec, c).is_ok()).collect();
        for (si, src) in configs.iter().enumerate() {
            let dir = scratch.join(format!("{}_{si}", m.label));
            let outcome = (|| -> Result<std::result::Result<AtomicCheckpoint, String>> {
                let ckpt = partition(&spec, &state, src, &dir.join("src"), 2)?;
                let oracle = consolidate_oracle(&ckpt)?;
                report.oracle_checks += 1;
                if let Some(d) = describe_difference(&oracle, &state) {
                    return Ok(Err(format!("oracle on source: {d}")));
                }
                let (atomic, _) = convert(&ckpt, &dir.join("atomic"), grid.convert)?;
                Ok(Ok(atomic))
            })();
            let atomic = match outcome {
                Ok(Ok(a)) => a,
                Ok(Err(msg)) => {
                    report.cells.extend(configs.iter().map(|t| cell(&m.label, src, t, Some(msg.clone()))));
                    continue;
                }
                Err(e) => {
                    let msg = format!("source side: {e}");
                    report.cells.extend(configs.iter().map(|t| cell(&m.label, src, t, Some(msg.clone()))));
                    continue;
                }
            };
            for tgt in &configs {
                let failure = match load(&atomic, tgt, LoadOptions::default()) {
                    Err(e) => Some(format!("load: {e}")),
                    Ok(world) => match consolidate_world(&spec, &world.ranks, world.step, &world.metadata) {
                        Err(e) => Some(format!("consolidate: {e}")),
                        Ok(back) => describe_difference(&back, &state),
                    },
                };
                report.cells.push(cell(&m.label, src, tgt, failure));
            }
            let _ = std::fs::remove_dir_all(&dir);
        }
    }
    Ok(report)
}

/// Wraps a consolidated state as the world `cfg` would hold in memory.
pub fn world_of(spec: &ModelSpec, state: &ModelState, cfg: &ParallelConfig) -> Result<LoadedWorld> {
    Ok(LoadedWorld {
        config: cfg.clone(),
        step: state.step,
        metadata: state.metadata.clone(),
        ranks: shard_world(spec, state, cfg)?,
        stats: LoadStats::default(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResumeCheck {
    pub src: String,
    pub tgt: String,
    pub conversions: u32,
    pub failure: Option<String>,
}

/// Trains `steps` under `src` shard by shard, saves, resumes under `tgt`,
/// trains `steps` more and compares with `2 * steps` uninterrupted steps.
pub fn resume_equivalence(
    spec: &ModelSpec,
    initial: &ModelState,
    reference: &ModelState,
    src: &ParallelConfig,
    tgt: &ParallelConfig,
    trainer: &TrainerConfig,
    steps: u64,
    scratch: &Path,
) -> Result<ResumeCheck> {
    let mut world = world_of(spec, initial, src)?;
    train_world(spec, &mut world, trainer, steps)?;
    let saved = scratch.join("saved");
    write_world(spec, src, world.step, &world.metadata, &world.ranks, &saved, 2)?;
    let out = resume(&saved, tgt, &scratch.join("atomic"), ResumeOptions::default())?;
    let mut resumed = out.world;
    train_world(spec, &mut resumed, trainer, steps)?;
    let back = consolidate_world(spec, &resumed.ranks, resumed.step, &resumed.metadata)?;
    Ok(ResumeCheck {
        src: src.short(),
        tgt: tgt.short(),
        conversions: out.conversions,
        failure: describe_difference(&back, reference),
    })
}

/// Six representative pairs, led by dp=2,pp=4,Z1 -> dp=2,tp=2,pp=2.
pub fn resume_pairs() -> Vec<(ParallelConfig, ParallelConfig)> {
    vec![
        (ParallelConfig::new(2, 1, 4, ZeroStage::Z1), ParallelConfig::new(2, 2, 2, ZeroStage::Z0)),
        (ParallelConfig::new(4, 1, 1, ZeroStage::Z3), ParallelConfig::new(1, 2, 2, ZeroStage::Z1)),
        (ParallelConfig::new(1, 2, 2, ZeroStage::Z0), ParallelConfig::new(4, 1, 1, ZeroStage::Z3)),
        (ParallelConfig::new(2, 2, 1, ZeroStage::Z1), ParallelConfig::new(4, 2, 2, ZeroStage::Z1).interleaved(2)),
        (ParallelConfig::new(4, 2, 2, ZeroStage::Z1), ParallelConfig::new(1, 1, 1, ZeroStage::Z0)),
        (ParallelConfig::new(2, 2, 2, ZeroStage::Z0), ParallelConfig::new(2, 2, 2, ZeroStage::Z0)),
    ]
}

/// Runs every resume pair on `case`; the uninterrupted reference is computed once.
pub fn run_resume_pairs(case: &ModelCase, pairs: &[(ParallelConfig, ParallelConfig)], steps: u64, scratch: &Path) -> Result<Vec<ResumeCheck>> {
    let spec = case.spec()?;
    let trainer = TrainerConfig::default();
    let initial = init_state(&spec, 77);
    let reference = train_steps(&spec, &initial, &trainer, 0, 2 * steps)?;
    let mut out = Vec::new();
    for (i, (src, tgt)) in pairs.iter().enumerate() {
        let dir = scratch.join(format!("resume_{}_{i}", case.label));
        out.push(resume_equivalence(&spec, &initial, &reference, src, tgt, &trainer, steps, &dir)?);
        let _ = std::fs::remove_dir_all(&dir);
    }
    Ok(out)
}

/// Convenience for callers holding a checkpoint directory.
pub fn oracle_of(dir: &Path) -> Result<ModelState> {
    consolidate_oracle(&DistributedCheckpoint::open(dir)?)
}
