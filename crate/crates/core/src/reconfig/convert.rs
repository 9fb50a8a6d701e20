//! The nested-parallel conversion engine.
//!
//! Mappers (outer workers) extract rank directories and route each fragment
//! over a bounded channel to the reducer that owns its parameter in the
//! [`WorkPlan`]. A reducer buffers fragments until a `(param, kind)` is
//! complete, then consolidates and saves it, inline or on its own inner pool.
//! Output files have a single owner, so the tree is independent of timing.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Mutex;

use crossbeam_channel::{bounded, Receiver, Sender};
use serde::{Deserialize, Serialize};

use super::extract::{extract_each, FragmentMsg};
use super::plan::{plan_work, WorkPlan};
use super::union::{union, UnionOptions};
use crate::atomic::{save_atomic_tensor, write_atomic_meta, AtomicCheckpoint, AtomicMeta, ATOMIC_FORMAT_VERSION};
use crate::error::{Result, UcpError};
use crate::io;
use crate::model::{ModelSpec, StateKind};
use crate::partition::{DistributedCheckpoint, CONFIG_FILE};

const QUEUE_DEPTH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvertOptions {
    pub workers: u32,
    pub inner: u32,
    pub strict_replicate: bool,
}

impl Default for ConvertOptions {
    fn default() -> Self {
        ConvertOptions {
            workers: 1,
            inner: 1,
            strict_replicate: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvertStats {
    pub messages_emitted: u64,
    pub messages_consumed: u64,
    pub bytes_read: u64,
    pub bytes_written: u64,
    pub files_written: u64,
    pub plan: WorkPlan,
}

type Key = (String, StateKind);

/// Errors from concurrent tasks; the one reported is the first in a
/// deterministic order, not the first to happen.
#[derive(Default)]
struct Failures(Mutex<Vec<(u8, usize, UcpError)>>);

impl Failures {
    fn push(&self, class: u8, order: usize, e: UcpError) {
        self.0.lock().unwrap().push((class, order, e));
    }

    fn into_first(self) -> Option<UcpError> {
        let mut all = self.0.into_inner().unwrap();
        all.sort_by_key(|(c, o, _)| (*c, *o));
        all.into_iter().next().map(|(_, _, e)| e)
    }
}

/// Converts a distributed checkpoint into an atomic checkpoint at `out_dir`.
pub fn convert(src: &DistributedCheckpoint, out_dir: &Path, opts: ConvertOptions) -> Result<(AtomicCheckpoint, ConvertStats)> {
    let spec = &src.spec;
    spec.validate()?;
    let config_bytes = std::fs::read(src.root.join(CONFIG_FILE)).map_err(|e| UcpError::io(src.root.join(CONFIG_FILE), e))?;

    // Expected fragment counts come from the manifests, read once up front.
    let world = src.world_size();
    let mut expected: HashMap<Key, usize> = HashMap::new();
    for rank in 0..world {
        let m = src.manifest(rank).map_err(|e| e.in_rank(rank.to_string()))?;
        for e in m.shards {
            if spec.param(&e.param).is_none() {
                return Err(UcpError::Manifest {
                    path: src.rank_dir(rank),
                    reason: format!("fragment of unknown param `{}`", e.param),
                }
                .in_rank(rank.to_string()));
            }
            *expected.entry((e.param, e.kind)).or_default() += 1;
        }
    }
    for p in &spec.params {
        for kind in StateKind::ALL {
            if !expected.contains_key(&(p.name.clone(), kind)) {
                return Err(UcpError::MissingFragment {
                    param: p.name.clone(),
                    kind: kind.label().into(),
                    detail: "no rank holds a fragment".into(),
                });
            }
        }
    }

    io::prepare_empty_dir(out_dir)?;
    let plan = plan_work(spec, opts.workers.max(1));
    let owner: HashMap<&str, usize> = plan
        .groups
        .iter()
        .enumerate()
        .flat_map(|(g, names)| names.iter().map(move |n| (n.as_str(), g)))
        .collect();
    let param_order: HashMap<&str, usize> = spec.params.iter().enumerate().map(|(i, p)| (p.name.as_str(), i)).collect();

    let emitted = AtomicU64::new(0);
    let consumed = AtomicU64::new(0);
    let bytes_read = AtomicU64::new(0);
    let bytes_written = AtomicU64::new(0);
    let files_written = AtomicU64::new(0);
    let next_rank = AtomicUsize::new(0);
    let failures = Failures::default();
    let union_opts = UnionOptions {
        strict_replicate: opts.strict_replicate,
    };

    let (senders, receivers): (Vec<Sender<FragmentMsg>>, Vec<Receiver<FragmentMsg>>) =
        (0..plan.groups.len()).map(|_| bounded(QUEUE_DEPTH)).unzip();

    std::thread::scope(|s| {
        for rx in receivers {
            let ctx = ReducerCtx {
                spec,
                out_dir,
                expected: &expected,
                param_order: &param_order,
                union_opts,
                consumed: &consumed,
                bytes_written: &bytes_written,
                files_written: &files_written,
                failures: &failures,
            };
            s.spawn(move || reducer(ctx, rx, opts.inner.max(1)));
        }
        for _ in 0..opts.workers.max(1) {
            let senders = senders.clone();
            let (owner, next_rank, emitted, bytes_read, failures) = (&owner, &next_rank, &emitted, &bytes_read, &failures);
            s.spawn(move || loop {
                let rank = next_rank.fetch_add(1, Ordering::Relaxed);
                if rank >= world as usize {
                    break;
                }
                let res = extract_each(&src.rank_dir(rank as u32), |msg| {
                    let g = owner[msg.entry.param.as_str()];
                    emitted.fetch_add(1, Ordering::Relaxed);
                    senders[g]
                        .send(msg)
                        .map_err(|_| UcpError::io("<shuffle>", std::io::Error::other("reducer hung up")))
                });
                match res {
                    Ok(b) => {
                        bytes_read.fetch_add(b, Ordering::Relaxed);
                    }
                    Err(e) => failures.push(0, rank, e.in_rank(rank.to_string())),
                }
            });
        }
        // Reducers finish once every mapper has dropped its senders.
        drop(senders);
    });

    if let Some(e) = failures.into_first() {
        return Err(e);
    }
    let (emitted, consumed) = (emitted.into_inner(), consumed.into_inner());
    if emitted != consumed {
        return Err(UcpError::io(
            "<shuffle>",
            std::io::Error::other(format!("{emitted} fragments emitted but {consumed} consumed")),
        ));
    }

    let meta = AtomicMeta {
        format_version: ATOMIC_FORMAT_VERSION,
        step: src.config.step,
        metadata: src.config.metadata.clone(),
        source_fingerprint: io::fingerprint(&config_bytes),
    };
    write_atomic_meta(out_dir, spec, &meta)?;
    let atomic = AtomicCheckpoint::open(out_dir)?;
    let stats = ConvertStats {
        messages_emitted: emitted,
        messages_consumed: consumed,
        bytes_read: bytes_read.into_inner(),
        bytes_written: bytes_written.into_inner(),
        files_written: files_written.into_inner(),
        plan,
    };
    Ok((atomic, stats))
}

#[derive(Clone, Copy)]
struct ReducerCtx<'a> {
    spec: &'a ModelSpec,
    out_dir: &'a Path,
    expected: &'a HashMap<Key, usize>,
    param_order: &'a HashMap<&'a str, usize>,
    union_opts: UnionOptions,
    consumed: &'a AtomicU64,
    bytes_written: &'a AtomicU64,
    files_written: &'a AtomicU64,
    failures: &'a Failures,
}

impl ReducerCtx<'_> {
    fn finish(&self, key: Key, msgs: Vec<FragmentMsg>) {
        let (param, kind) = key;
        let order = self.param_order[param.as_str()] * 3 + kind as usize;
        let p = self.spec.param(&param).expect("routed params are in the spec");
        let res = union(p, kind, &msgs, self.union_opts)
            .and_then(|t| save_atomic_tensor(self.out_dir, &param, kind, &t))
            .map_err(|e| e.in_param(&param));
        match res {
            Ok(b) => {
                self.bytes_written.fetch_add(b, Ordering::Relaxed);
                self.files_written.fetch_add(1, Ordering::Relaxed);
            }
            Err(e) => self.failures.push(1, order, e),
        }
    }
}

fn reducer(ctx: ReducerCtx<'_>, rx: Receiver<FragmentMsg>, inner: u32) {
    let mut pending: BTreeMap<Key, Vec<FragmentMsg>> = BTreeMap::new();
    let mut take_ready = |msg: FragmentMsg| -> Option<(Key, Vec<FragmentMsg>)> {
        ctx.consumed.fetch_add(1, Ordering::Relaxed);
        let key = (msg.entry.param.clone(), msg.entry.kind);
        let want = ctx.expected.get(&key).copied().unwrap_or(0);
        let bucket = pending.entry(key.clone()).or_default();
        bucket.push(msg);
        (bucket.len() == want).then(|| (key.clone(), pending.remove(&key).unwrap()))
    };

    if inner <= 1 {
        for msg in rx.iter() {
            if let Some((key, msgs)) = take_ready(msg) {
                ctx.finish(key, msgs);
            }
        }
    } else {
        match rayon::ThreadPoolBuilder::new().num_threads(inner as usize).build() {
            Ok(pool) => pool.in_place_scope(|s| {
                for msg in rx.iter() {
                    if let Some((key, msgs)) = take_ready(msg) {
                        s.spawn(move |_| ctx.finish(key, msgs));
                    }
                }
            }),
            Err(e) => {
                ctx.failures.push(2, 0, UcpError::io("<thread pool>", std::io::Error::other(e)));
                // Keep draining so mappers never block on a full queue.
                for _ in rx.iter() {
                    ctx.consumed.fetch_add(1, Ordering::Relaxed);
                }
            }
        }
    }
    for ((param, kind), msgs) in pending {
        let order = ctx.param_order[param.as_str()] * 3 + kind as usize;
        let detail = format!("{} of {} fragments arrived", msgs.len(), ctx.expected[&(param.clone(), kind)]);
        ctx.failures.push(
            1,
            order,
            UcpError::MissingFragment {
                param,
                kind: kind.label().into(),
                detail,
            },
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_state, make_model, ModelFamily, ModelScale};
    use crate::parallel::{ParallelConfig, ZeroStage};
    use crate::partition::partition;

    #[test]
    fn dense_tp2_pp2_z1_roundtrips() {
        let spec = make_model(ModelFamily::DenseGPT, &ModelScale::new(2, 32)).unwrap();
        let st = init_state(&spec, 11);
        let dir = tempfile::tempdir().unwrap();
        let src = partition(&spec, &st, &ParallelConfig::new(2, 2, 2, ZeroStage::Z1), &dir.path().join("src"), 2).unwrap();
        for (workers, inner) in [(1, 1), (3, 2)] {
            let out = dir.path().join(format!("atomic_{workers}_{inner}"));
            let (atomic, stats) = convert(&src, &out, ConvertOptions { workers, inner, strict_replicate: true }).unwrap();
            assert_eq!(stats.messages_emitted, stats.messages_consumed);
            assert_eq!(stats.files_written as usize, spec.params.len() * 3);
            assert_eq!(atomic.read_state().unwrap(), st);
        }
    }

    #[test]
    fn corrupt_rank_reports_rank() {
        let spec = make_model(ModelFamily::DenseGPT, &ModelScale::new(1, 16)).unwrap();
        let st = init_state(&spec, 2);
        let dir = tempfile::tempdir().unwrap();
        let src = partition(&spec, &st, &ParallelConfig::new(2, 1, 1, ZeroStage::Z0), &dir.path().join("src"), 1).unwrap();
        let victim = src.rank_dir(1).join("embed.weight.weight.ucpt");
        let bytes = std::fs::read(&victim).unwrap();
        std::fs::write(&victim, &bytes[..bytes.len() - 4]).unwrap();
        let err = convert(&src, &dir.path().join("out"), ConvertOptions { workers: 2, ..Default::default() }).unwrap_err();
        assert!(matches!(err, UcpError::InRank { ref rank, .. } if rank == "1"), "{err}");
        assert!(matches!(err.root(), UcpError::TruncatedPayload { .. }));
    }
}
