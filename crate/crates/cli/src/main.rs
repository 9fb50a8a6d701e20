use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ucp_core::atomic::AtomicCheckpoint;
use ucp_core::loader::{load, resume, LoadOptions, ResumeOptions};
use ucp_core::model::{init_state, make_model, train_steps, ModelFamily, ModelScale, ModelSpec, TrainerConfig};
use ucp_core::parallel::ParallelConfig;
use ucp_core::partition::{partition, DistributedCheckpoint};
use ucp_core::reconfig::{convert, ConvertOptions};
use ucp_core::tensor::read_tensor;
use ucp_core::DType;
use ucp_verify::grid::{default_models, resume_pairs, run_resume_pairs, verify_roundtrip, GridSpec};

#[derive(Parser)]
#[command(name = "ucp", version, about = "Partition, convert and reload training checkpoints across parallel layouts")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// dense | moe | gqa
    #[arg(long, default_value = "dense")]
    family: ModelFamily,
    #[arg(long, default_value_t = 4)]
    layers: u32,
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[arg(long)]
    experts: Option<usize>,
    #[arg(long)]
    q_heads: Option<usize>,
    #[arg(long)]
    kv_heads: Option<usize>,
}

impl ModelArgs {
    fn spec(&self) -> Result<ModelSpec> {
        let defaults = |v: Option<usize>, fallback: usize, family: ModelFamily| v.or((self.family == family).then_some(fallback));
        let scale = ModelScale {
            n_experts: defaults(self.experts, 4, ModelFamily::MoE),
            q_heads: defaults(self.q_heads, 8, ModelFamily::GQA),
            kv_heads: defaults(self.kv_heads, 2, ModelFamily::GQA),
            ..ModelScale::new(self.layers, self.hidden)
        };
        Ok(make_model(self.family, &scale)?)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Build a synthetic model state and save it as a distributed checkpoint.
    Partition {
        #[command(flatten)]
        model: ModelArgs,
        /// "dp,tp,pp[,sp[,z0|z1|z3[,seq|int<v>[,gridRxC]]]]" or a config JSON file.
        #[arg(long)]
        config: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Optimizer steps to run before saving.
        #[arg(long, default_value_t = 0)]
        train_steps: u64,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Consolidate a distributed checkpoint into an atomic checkpoint.
    Convert {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: u32,
        #[arg(long, default_value_t = 1)]
        inner: u32,
        #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
        strict_replicate: bool,
    },
    /// Load an atomic checkpoint under a target configuration.
    Load {
        #[arg(long)]
        atomic: PathBuf,
        #[arg(long)]
        config: String,
        #[arg(long, default_value = "f32")]
        dtype: DType,
        /// Write load statistics as JSON here.
        #[arg(long)]
        stats: Option<PathBuf>,
        /// Have every rank read every file itself.
        #[arg(long)]
        no_bypass: bool,
    },
    /// Resume a distributed checkpoint under a target configuration,
    /// converting only when the configuration changed.
    Resume {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        config: String,
        #[arg(long)]
        scratch: PathBuf,
        #[arg(long, default_value = "f32")]
        dtype: DType,
        #[arg(long)]
        stats: Option<PathBuf>,
    },
    /// Run the round-trip grid and resume-equivalence checks.
    Verify {
        /// Scratch directory; a temporary one is used when omitted.
        #[arg(long)]
        scratch: Option<PathBuf>,
        /// Only the dense model and the first resume pair.
        #[arg(long)]
        quick: bool,
        #[arg(long, default_value_t = 100)]
        steps: u64,
    },
    /// Time conversion and loading across worker counts.
    Bench {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value = "4,1,1,1,z1")]
        config: String,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
        workers: Vec<u32>,
        #[arg(long, value_delimiter = ',', default_value = "1")]
        inner: Vec<u32>,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        scratch: Option<PathBuf>,
    },
    /// Pretty-print a manifest, config or meta JSON file, a tensor header, or
    /// a checkpoint directory summary.
    Inspect { path: PathBuf },
}

fn parse_config(s: &str) -> Result<ParallelConfig> {
    let p = Path::new(s);
    if p.is_file() {
        let text = std::fs::read_to_string(p).with_context(|| format!("reading {s}"))?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        // Accept a bare config or a checkpoint config.json.
        let inner = value.get("parallel").cloned().unwrap_or(value);
        return Ok(serde_json::from_value(inner)?);
    }
    s.parse().map_err(anyhow::Error::msg)
}

fn scratch_dir(given: Option<PathBuf>) -> Result<(PathBuf, Option<tempfile::TempDir>)> {
    match given {
        Some(p) => {
            std::fs::create_dir_all(&p)?;
            Ok((p, None))
        }
        None => {
            let t = tempfile::tempdir()?;
            Ok((t.path().to_path_buf(), Some(t)))
        }
    }
}

fn write_stats(path: Option<&Path>, stats: &ucp_core::loader::LoadStats) -> Result<()> {
    let json = serde_json::to_string_pretty(stats)?;
    match path {
        Some(p) => std::fs::write(p, json + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => println!("{json}"),
    }
    Ok(())
}

fn inspect(path: &Path) -> Result<()> {
    if path.is_dir() {
        for name in ["config.json", "ucp_meta.json", "model.json"] {
            let f = path.join(name);
            if f.is_file() {
                println!("== {name}");
                inspect(&f)?;
            }
        }
        return Ok(());
    }
    if path.extension().is_some_and(|e| e == "ucpt") {
        let t = read_tensor(path)?;
        println!("dtype {:?} shape {:?} numel {} bytes {}", t.dtype(), t.shape(), t.numel(), t.nbytes());
        return Ok(());
    }
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("{} is not JSON", path.display()))?;
    println!("{}", serde_json::to_string_pretty(&value)?);
    Ok(())
}

fn run(cmd: Cmd) -> Result<bool> {
    match cmd {
        Cmd::Partition { model, config, out, seed, train_steps: steps, workers } => {
            let spec = model.spec()?;
            let cfg = parse_config(&config)?;
            let mut state = init_state(&spec, seed);
            if steps > 0 {
                state = train_steps(&spec, &state, &TrainerConfig::default(), 0, steps)?;
            }
            let ckpt = partition(&spec, &state, &cfg, &out, workers)?;
            println!(
                "wrote {} ranks for {} ({} params, {} elements) under {}",
                ckpt.world_size(),
                spec.name,
                spec.params.len(),
                spec.total_numel(),
                cfg.short()
            );
        }
        Cmd::Convert { src, out, workers, inner, strict_replicate } => {
            let ckpt = DistributedCheckpoint::open(&src)?;
            let (atomic, stats) = convert(&ckpt, &out, ConvertOptions { workers, inner, strict_replicate })?;
            println!(
                "converted {} params: {} fragments, {} bytes read, {} files written to {}",
                atomic.spec.params.len(),
                stats.messages_consumed,
                stats.bytes_read,
                stats.files_written,
                out.display()
            );
        }
        Cmd::Load { atomic, config, dtype, stats, no_bypass } => {
            let atomic = AtomicCheckpoint::open(&atomic)?;
            let world = load(&atomic, &parse_config(&config)?, LoadOptions { dtype, bypass: !no_bypass })?;
            write_stats(stats.as_deref(), &world.stats)?;
        }
        Cmd::Resume { src, config, scratch, dtype, stats } => {
            let opts = ResumeOptions {
                load: LoadOptions { dtype, bypass: true },
                ..Default::default()
            };
            let out = resume(&src, &parse_config(&config)?, &scratch, opts)?;
            let path = if out.conversions == 0 { "lazy (no conversion)" } else { "converted" };
            eprintln!("resumed {} ranks at step {}: {path}", out.world.ranks.len(), out.world.step);
            write_stats(stats.as_deref(), &out.world.stats)?;
        }
        Cmd::Verify { scratch, quick, steps } => {
            let (dir, _guard) = scratch_dir(scratch)?;
            let mut grid = GridSpec::default();
            let mut models = default_models();
            let mut pairs = resume_pairs();
            if quick {
                models.truncate(1);
                pairs.truncate(1);
                grid.models.truncate(1);
            }
            let report = verify_roundtrip(&grid, &dir.join("grid"))?;
            print!("round trip: {report}");
            let mut ok = report.passed();
            for m in &models {
                for c in run_resume_pairs(m, &pairs, steps, &dir.join("resume"))? {
                    let status = if c.failure.is_none() { "ok" } else { "FAIL" };
                    println!("resume {} {} -> {}: {status} {}", m.label, c.src, c.tgt, c.failure.clone().unwrap_or_default());
                    ok &= c.failure.is_none();
                }
            }
            return Ok(ok);
        }
        Cmd::Bench { model, config, workers, inner, csv, scratch } => {
            if workers.is_empty() || inner.is_empty() {
                bail!("--workers and --inner need at least one value");
            }
            let (dir, _guard) = scratch_dir(scratch)?;
            let report = ucp_verify::bench(&model.spec()?, &parse_config(&config)?, &workers, &inner, &dir)?;
            print!("{}", report.to_table());
            if let Some(p) = csv {
                std::fs::write(&p, report.to_csv()).with_context(|| format!("writing {}", p.display()))?;
            }
        }
        Cmd::Inspect { path } => inspect(&path)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse().cmd) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
