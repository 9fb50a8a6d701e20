//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! A criterion whose preconditions the host cannot meet is printed as
//! `NOT MET` with the reason. It does not fail the test, and it is never
//! reported as a pass.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use ucp_core::io::fingerprint;
use ucp_core::loader::{load, resume, LoadOptions, ResumeOptions};
use ucp_core::model::{init_state, make_model, ModelFamily, ModelScale, ModelSpec, ParamKind, ParamSpec, StateKind};
use ucp_core::parallel::{ParallelConfig, ZeroStage};
use ucp_core::partition::{partition, shard_world};
use ucp_core::reconfig::{convert, plan_items, ConvertOptions};
use ucp_core::tensor::{decode_tensor, encode_tensor, read_tensor, splitmix64};
use ucp_core::{DType, Tensor, UcpError};
use ucp_verify::grid::{default_models, describe_difference, resume_pairs, run_resume_pairs, verify_roundtrip, GridSpec};
use ucp_verify::{bench, consolidate_world};

enum Outcome {
    Pass(String),
    Fail(String),
    NotMet(String),
}

fn emit(n: u32, title: &str, o: &Outcome) {
    let line = match o {
        Outcome::Pass(d) => format!("[PASS]    {n}. {title}: {d}"),
        Outcome::Fail(d) => format!("[FAIL]    {n}. {title}: {d}"),
        Outcome::NotMet(d) => format!("[NOT MET] {n}. {title}: {d}"),
    };
    // Bypass the test harness capture so the lines land in the log.
    let mut out = std::io::stdout();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn check(ok: bool, pass: String, fail: String) -> Outcome {
    if ok {
        Outcome::Pass(pass)
    } else {
        Outcome::Fail(fail)
    }
}

fn tree(root: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fingerprint(&std::fs::read(&p).unwrap()));
            }
        }
    }
    out
}

fn count_files(root: &Path) -> usize {
    if root.exists() {
        tree(root).len()
    } else {
        0
    }
}

fn roundtrip_grid(scratch: &Path) -> Outcome {
    let t = Instant::now();
    let report = verify_roundtrip(&GridSpec::default(), scratch).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let expected = 3 * 39 * 39;
    let ok = report.passed() && report.cells.len() == expected && secs < 300.0;
    check(
        ok,
        format!("{} of {} cells bit-exact, oracle agrees on {} sources, {secs:.0} s", report.cells.len(), expected, report.oracle_checks),
        format!("{report} ({secs:.0} s)"),
    )
}

fn resume_equivalence(scratch: &Path) -> Outcome {
    let pairs = resume_pairs();
    let mut lines = Vec::new();
    let mut total = 0;
    for m in default_models() {
        for c in run_resume_pairs(&m, &pairs, 100, scratch).unwrap() {
            total += 1;
            if let Some(f) = c.failure {
                lines.push(format!("{} {} -> {}: {f}", m.label, c.src, c.tgt));
            }
        }
    }
    check(
        lines.is_empty() && pairs.len() >= 6,
        format!("{total} runs (3 models x {} pairs, headline 2,1,4,z1 -> 2,2,2,z0 included): 100+100 steps == 200 steps, bit-exact", pairs.len()),
        lines.join("; "),
    )
}

fn single_1024() -> ModelSpec {
    ModelSpec {
        name: "single".into(),
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

fn zero3_padding(scratch: &Path) -> Outcome {
    let spec = single_1024();
    let st = init_state(&spec, 3);
    let ckpt = partition(&spec, &st, &ParallelConfig::new(3, 1, 1, ZeroStage::Z3), &scratch.join("src"), 1).unwrap();
    let mut lens = Vec::new();
    let mut pads = Vec::new();
    let mut tail_zero = true;
    for r in 0..3 {
        let e = ckpt.manifest(r).unwrap().shards.into_iter().find(|e| e.kind == StateKind::Weight).unwrap();
        let t = read_tensor(ckpt.rank_dir(r).join(&e.file)).unwrap();
        lens.push(t.numel());
        pads.push(e.pad_elems);
        tail_zero &= t.bits()[t.numel() - e.pad_elems..].iter().all(|&b| b == 0);
    }
    let (atomic, _) = convert(&ckpt, &scratch.join("atomic"), ConvertOptions::default()).unwrap();
    let full = atomic.read("w", StateKind::Weight).unwrap();
    let world = load(&atomic, &ParallelConfig::new(2, 1, 1, ZeroStage::Z3), LoadOptions::default()).unwrap();
    let lens2: Vec<usize> = world.ranks.iter().map(|r| r.find("w", StateKind::Weight).unwrap().tensor.numel()).collect();
    let pads2: Vec<usize> = world.ranks.iter().map(|r| r.find("w", StateKind::Weight).unwrap().entry.pad_elems).collect();
    let ok = lens == [342; 3] && pads == [0, 0, 2] && tail_zero && full.shape() == [1024] && full == st.params["w"].weight && lens2 == [512, 512] && pads2 == [0, 0];
    let summary = format!("dp=3 shards {lens:?} pads {pads:?} (zero tail: {tail_zero}); atomic {:?}; dp=2 shards {lens2:?} pads {pads2:?}", full.shape());
    check(ok, summary.clone(), summary)
}

fn scenario(model: &ModelSpec, src: ParallelConfig, tgt: ParallelConfig, scratch: &Path) -> Result<(), String> {
    let st = init_state(model, 21);
    let ckpt = partition(model, &st, &src, &scratch.join("src"), 2).map_err(|e| e.to_string())?;
    let (atomic, _) = convert(&ckpt, &scratch.join("atomic"), ConvertOptions { workers: 2, ..Default::default() }).map_err(|e| e.to_string())?;
    let world = load(&atomic, &tgt, LoadOptions::default()).map_err(|e| e.to_string())?;
    if world.ranks != shard_world(model, &st, &tgt).map_err(|e| e.to_string())? {
        return Err("loaded world differs from direct partition".into());
    }
    let back = consolidate_world(model, &world.ranks, world.step, &world.metadata).map_err(|e| e.to_string())?;
    match describe_difference(&back, &st) {
        None => Ok(()),
        Some(d) => Err(d),
    }
}

fn pattern_coverage(scratch: &Path) -> Outcome {
    let models = default_models();
    let (dense, moe, gqa) = (models[0].spec().unwrap(), models[1].spec().unwrap(), models[2].spec().unwrap());
    let cases: Vec<(&str, &ModelSpec, ParallelConfig, ParallelConfig)> = vec![
        ("DP-degree change", &dense, ParallelConfig::new(2, 1, 1, ZeroStage::Z0), ParallelConfig::new(4, 1, 1, ZeroStage::Z0)),
        ("switch to ZeRO-1", &dense, ParallelConfig::new(2, 2, 1, ZeroStage::Z0), ParallelConfig::new(2, 2, 1, ZeroStage::Z1)),
        ("switch to ZeRO-3", &gqa, ParallelConfig::new(2, 1, 1, ZeroStage::Z0), ParallelConfig::new(4, 1, 1, ZeroStage::Z3)),
        ("MP-degree change", &gqa, ParallelConfig::new(1, 2, 2, ZeroStage::Z0), ParallelConfig::new(2, 1, 1, ZeroStage::Z0)),
        ("MoE reconfiguration", &moe, ParallelConfig::new(1, 2, 1, ZeroStage::Z1), ParallelConfig::new(2, 1, 2, ZeroStage::Z0)),
    ];
    let mut failures = Vec::new();
    for (i, (name, m, src, tgt)) in cases.iter().enumerate() {
        if let Err(e) = scenario(m, src.clone(), tgt.clone(), &scratch.join(format!("case{i}"))) {
            failures.push(format!("{name}: {e}"));
        }
    }

    // Fault injection: flip one payload bit of one data-parallel replica.
    let st = init_state(&dense, 22);
    let ckpt = partition(&dense, &st, &ParallelConfig::new(2, 1, 1, ZeroStage::Z0), &scratch.join("faulty"), 1).unwrap();
    let victim = ckpt.rank_dir(1).join("layers.2.attn.out.weight.ucpt");
    let mut bytes = std::fs::read(&victim).unwrap();
    let at = bytes.len() - 7;
    bytes[at] ^= 0x10;
    std::fs::write(&victim, bytes).unwrap();
    let strict = convert(&ckpt, &scratch.join("faulty_atomic"), ConvertOptions::default());
    let loud = matches!(&strict, Err(e) if matches!(e.root(), UcpError::ReplicaMismatch { param, .. } if param == "layers.2.attn.out"));
    if !loud {
        failures.push(format!("corrupted replica not reported: {:?}", strict.err().map(|e| e.to_string())));
    }
    check(
        failures.is_empty(),
        format!("{} scenarios end-to-end bit-exact; corrupted replica -> replica mismatch on `layers.2.attn.out`", cases.len()),
        failures.join("; "),
    )
}

fn bypass_accounting(scratch: &Path) -> Outcome {
    let spec = default_models()[0].spec().unwrap();
    let st = init_state(&spec, 4);
    let atomic = ucp_core::atomic::AtomicCheckpoint::save_state(&spec, &st, scratch, "acceptance").unwrap();
    let group_files = spec.params.len() as u64 * 3;
    let dp4 = ParallelConfig::new(4, 1, 1, ZeroStage::Z1);
    let on = load(&atomic, &dp4, LoadOptions::default()).unwrap();
    let off = load(&atomic, &dp4, LoadOptions { bypass: false, ..Default::default() }).unwrap();
    let dp1 = load(&atomic, &ParallelConfig::default(), LoadOptions::default()).unwrap();
    let ok = on.stats.files_read == group_files
        && off.stats.files_read == 4 * group_files
        && off.stats.bytes_read == 4 * on.stats.bytes_read
        && on.stats.bytes_read == dp1.stats.bytes_read
        && on.ranks == off.ranks
        && on.stats.peak_resident_elements <= on.stats.resident_bound_elements;
    let summary = format!(
        "dp=4 group: {} files read with bypass (group holds {group_files}), {} without (x{}); bytes {} vs {} at dp=1; peak resident {} <= bound {}",
        on.stats.files_read,
        off.stats.files_read,
        off.stats.files_read as f64 / on.stats.files_read as f64,
        on.stats.bytes_read,
        dp1.stats.bytes_read,
        on.stats.peak_resident_elements,
        on.stats.resident_bound_elements
    );
    check(ok, summary.clone(), summary)
}

/// Exhaustive optimum over all m^n assignments.
fn brute_force_opt(numels: &[u64], m: usize) -> u64 {
    let n = numels.len();
    let mut best = u64::MAX;
    let mut assign = vec![0usize; n];
    loop {
        let mut loads = vec![0u64; m];
        for (i, &g) in assign.iter().enumerate() {
            loads[g] += numels[i];
        }
        best = best.min(*loads.iter().max().unwrap());
        let mut i = 0;
        loop {
            if i == n {
                return best;
            }
            assign[i] += 1;
            if assign[i] < m {
                break;
            }
            assign[i] = 0;
            i += 1;
        }
    }
}

fn determinism_and_speedup(scratch: &Path) -> Outcome {
    // Byte-identical trees for workers 1, 2, 8.
    let spec = default_models()[1].spec().unwrap();
    let st = init_state(&spec, 5);
    let ckpt = partition(&spec, &st, &ParallelConfig::new(2, 2, 2, ZeroStage::Z1), &scratch.join("src"), 2).unwrap();
    let mut trees = Vec::new();
    for (workers, inner) in [(1, 1), (2, 1), (8, 1), (2, 2), (8, 4)] {
        let out = scratch.join(format!("a_{workers}_{inner}"));
        convert(&ckpt, &out, ConvertOptions { workers, inner, strict_replicate: true }).unwrap();
        trees.push(tree(&out));
    }
    let identical = trees.iter().all(|t| *t == trees[0]);

    // LPT against the exhaustive optimum on small random instances.
    let mut seed = 0xACCE_5510u64;
    let mut worst: f64 = 0.0;
    let mut lpt_ok = true;
    let mut instances = 0;
    for &(m, max_n) in &[(2usize, 12usize), (3, 10), (4, 8)] {
        for _ in 0..40 {
            seed = splitmix64(seed);
            let n = 1 + (seed % max_n as u64) as usize;
            let numels: Vec<u64> = (0..n)
                .map(|i| 1 + splitmix64(seed ^ (i as u64 + 1)) % 10_000)
                .collect();
            let items: Vec<(String, u64)> = numels.iter().enumerate().map(|(i, &x)| (format!("p{i:02}"), x)).collect();
            let lpt = plan_items(&items, m as u32).max_cost();
            let opt = brute_force_opt(&numels, m);
            lpt_ok &= 3 * m as u64 * lpt <= (4 * m as u64 - 1) * opt;
            worst = worst.max(lpt as f64 / opt as f64);
            instances += 1;
        }
    }

    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let base = format!("trees identical for workers 1/2/8: {identical}; LPT/opt worst {worst:.3} over {instances} instances (bound 4/3 - 1/3m)");
    if !(identical && lpt_ok) {
        return Outcome::Fail(base);
    }
    if cores >= 4 {
        let big = make_model(ModelFamily::DenseGPT, &ModelScale::new(8, 1024)).unwrap();
        assert!(big.total_numel() >= 100_000_000);
        let r = bench(&big, &ParallelConfig::new(4, 1, 1, ZeroStage::Z1), &[4], &[1], &scratch.join("bench")).unwrap();
        let speedup = r.rows[1].speedup_vs_sequential;
        let msg = format!("{base}; speedup at 4 workers on {} elements: {speedup:.2} ({cores} cores)", big.total_numel());
        check(speedup > 2.0, msg.clone(), msg)
    } else {
        let small = make_model(ModelFamily::DenseGPT, &ModelScale::new(4, 256)).unwrap();
        let r = bench(&small, &ParallelConfig::new(4, 1, 1, ZeroStage::Z1), &[4], &[1], &scratch.join("bench")).unwrap();
        Outcome::NotMet(format!(
            "{base}; speedup > 2.0 needs a >= 4-core host, this one has {cores} (informational: {:.2}x at 4 workers on {} elements)",
            r.rows[1].speedup_vs_sequential,
            small.total_numel()
        ))
    }
}

fn format_stability() -> Outcome {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures");
    let wide = Tensor::from_f32(vec![4], vec![1.0, -1.5, 65504.0, 1e-3]).unwrap();
    let golden = [
        ("f32_2x3.ucpt", Tensor::from_f32(vec![2, 3], vec![1.0, -2.0, 0.5, -0.0, f32::INFINITY, 3.25]).unwrap()),
        ("bf16_4.ucpt", wide.cast(DType::BF16).unwrap()),
        ("f16_4.ucpt", wide.cast(DType::F16).unwrap()),
        ("f32_scalar.ucpt", Tensor::scalar(0.25)),
    ];
    let mut bad = Vec::new();
    for (name, t) in &golden {
        let bytes = std::fs::read(fixtures.join(name)).unwrap();
        if encode_tensor(t) != bytes || decode_tensor(&bytes).ok().as_ref() != Some(t) {
            bad.push(name.to_string());
        }
    }
    for name in ["rank_3_shards.json", "config.json", "model.json", "ucp_meta.json"] {
        let text = std::fs::read_to_string(fixtures.join(name)).unwrap();
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        if value.get("format_version").is_none() && name != "model.json" {
            bad.push(format!("{name} lacks format_version"));
        }
    }
    let manifest_text = std::fs::read_to_string(fixtures.join("rank_3_shards.json")).unwrap();
    let manifest: ucp_core::partition::RankManifest = serde_json::from_str(&manifest_text).unwrap();
    if serde_json::to_string_pretty(&manifest).unwrap() + "\n" != manifest_text {
        bad.push("rank_3_shards.json re-serializes differently".into());
    }

    let mut seed = 0xF0F0u64;
    let mut roundtrips = 0;
    for _ in 0..1000 {
        seed = splitmix64(seed);
        let ndim = (seed % 4) as usize;
        let shape: Vec<usize> = (0..ndim).map(|d| (splitmix64(seed + d as u64) % 6) as usize).collect();
        let n: usize = shape.iter().product();
        let data = (0..n as u64).map(|i| f32::from_bits(splitmix64(seed ^ (i << 8)) as u32)).collect();
        let t = Tensor::from_f32(shape, data).unwrap();
        let t = match seed % 3 {
            0 => t,
            1 => t.cast(DType::F16).unwrap(),
            _ => t.cast(DType::BF16).unwrap(),
        };
        if decode_tensor(&encode_tensor(&t)).ok().as_ref() == Some(&t) {
            roundtrips += 1;
        }
    }
    check(
        bad.is_empty() && roundtrips == 1000,
        format!("{} tensor fixtures and the shard manifest byte-stable; {roundtrips}/1000 random tensors write->read bit-identical", golden.len()),
        format!("unstable: {bad:?}; {roundtrips}/1000 round trips"),
    )
}

fn lazy_invocation(scratch: &Path) -> Outcome {
    let spec = default_models()[2].spec().unwrap();
    let st = init_state(&spec, 6);
    let cfg = ParallelConfig::new(2, 2, 1, ZeroStage::Z1);
    partition(&spec, &st, &cfg, &scratch.join("src"), 2).unwrap();
    let lazy_scratch = scratch.join("lazy");
    let lazy = resume(&scratch.join("src"), &cfg, &lazy_scratch, ResumeOptions::default()).unwrap();
    let created = count_files(&lazy_scratch);
    let same = lazy.world.ranks == shard_world(&spec, &st, &cfg).unwrap();

    let eager_scratch = scratch.join("eager");
    let other = ParallelConfig::new(1, 2, 2, ZeroStage::Z0);
    let eager = resume(&scratch.join("src"), &other, &eager_scratch, ResumeOptions::default()).unwrap();
    let eager_files = count_files(&eager_scratch);
    let ok = lazy.conversions == 0 && created == 0 && same && eager.conversions == 1 && eager_files == spec.params.len() * 3 + 2;
    check(
        ok,
        format!(
            "tgt == src: {} conversions, {created} atomic files, direct load bit-equal; tgt != src: {} conversion, {eager_files} files",
            lazy.conversions, eager.conversions
        ),
        format!("lazy conversions {} files {created} equal {same}; eager conversions {} files {eager_files}", lazy.conversions, eager.conversions),
    )
}

#[test]
fn acceptance_criteria() {
    let root = tempfile::tempdir().unwrap();
    let dir = |name: &str| {
        let d = root.path().join(name);
        std::fs::create_dir_all(&d).unwrap();
        d
    };
    let results = [
        (1, "round-trip grid", roundtrip_grid(&dir("c1"))),
        (2, "resume equivalence", resume_equivalence(&dir("c2"))),
        (3, "ZeRO-3 padding example", zero3_padding(&dir("c3"))),
        (4, "pattern coverage and strict replicas", pattern_coverage(&dir("c4"))),
        (5, "redundancy-bypass accounting", bypass_accounting(&dir("c5"))),
        (6, "nested-parallel determinism, LPT, speedup", determinism_and_speedup(&dir("c6"))),
        (7, "format stability", format_stability()),
        (8, "lazy invocation", lazy_invocation(&dir("c8"))),
    ];
    for (n, title, o) in &results {
        emit(*n, title, o);
    }
    let failed: Vec<u32> = results.iter().filter(|r| matches!(r.2, Outcome::Fail(_))).map(|r| r.0).collect();
    assert!(failed.is_empty(), "criteria failed: {failed:?}");
}
