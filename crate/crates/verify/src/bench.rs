//! Conversion and load timing across worker counts.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;
use ucp_core::loader::{load, LoadOptions};
use ucp_core::model::{init_state, ModelSpec};
use ucp_core::parallel::ParallelConfig;
use ucp_core::partition::partition;
use ucp_core::reconfig::{convert, ConvertOptions};
use ucp_core::Result;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub model: String,
    pub params_numel: u64,
    pub n_workers: u32,
    pub inner: u32,
    pub wall_ms_convert: f64,
    pub wall_ms_load: f64,
    pub speedup_vs_sequential: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub format_version: u32,
    /// Hardware threads the process could use.
    pub host_threads: usize,
    /// The first row is the sequential baseline (1 worker, inner 1).
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,params_numel,n_workers,inner,wall_ms_convert,wall_ms_load,speedup_vs_sequential\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{:.3},{:.3},{:.3}",
                r.model, r.params_numel, r.n_workers, r.inner, r.wall_ms_convert, r.wall_ms_load, r.speedup_vs_sequential
            );
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<12} {:>12} {:>7} {:>5} {:>12} {:>10} {:>8}\n",
            "model", "numel", "workers", "inner", "convert_ms", "load_ms", "speedup"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<12} {:>12} {:>7} {:>5} {:>12.1} {:>10.1} {:>8.2}",
                r.model, r.params_numel, r.n_workers, r.inner, r.wall_ms_convert, r.wall_ms_load, r.speedup_vs_sequential
            );
        }
        s
    }
}

/// Partitions `spec` under `src` once, then times convert (and a load under
/// `src`) for the sequential baseline and every `workers x inner` pair.
pub fn bench(
    spec: &ModelSpec,
    src: &ParallelConfig,
    workers_list: &[u32],
    inner_list: &[u32],
    scratch: &Path,
) -> Result<BenchReport> {
    let state = init_state(spec, 1);
    let ckpt = partition(spec, &state, src, &scratch.join("src"), workers_list.iter().copied().max().unwrap_or(1) as usize)?;
    drop(state);
    let numel = spec.total_numel() as u64;

    let mut runs = vec![(1, 1)];
    for &w in workers_list {
        for &i in inner_list {
            runs.push((w, i));
        }
    }
    let mut rows = Vec::with_capacity(runs.len());
    let mut baseline = 0.0;
    for (k, (workers, inner)) in runs.into_iter().enumerate() {
        let out = scratch.join(format!("atomic_{k}"));
        let t0 = Instant::now();
        let (atomic, _) = convert(
            &ckpt,
            &out,
            ConvertOptions {
                workers,
                inner,
                strict_replicate: true,
            },
        )?;
        let convert_ms = t0.elapsed().as_secs_f64() * 1e3;
        let t1 = Instant::now();
        drop(load(&atomic, src, LoadOptions::default())?);
        let load_ms = t1.elapsed().as_secs_f64() * 1e3;
        std::fs::remove_dir_all(&out).ok();
        if k == 0 {
            baseline = convert_ms;
        }
        rows.push(BenchRow {
            model: spec.name.clone(),
            params_numel: numel,
            n_workers: workers,
            inner,
            wall_ms_convert: convert_ms,
            wall_ms_load: load_ms,
            speedup_vs_sequential: baseline / convert_ms,
        });
    }
    Ok(BenchReport {
        format_version: 1,
        host_threads: std::thread::available_parallelism().map_or(1, |n| n.get()),
        rows,
    })
}
