use std::path::Path;
use std::process::{Command, Output};

fn ucp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ucp")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn partition_convert_load_resume() {
    let dir = tempfile::tempdir().unwrap();
    let (src, atomic, stats) = (dir.path().join("src"), dir.path().join("atomic"), dir.path().join("stats.json"));

    let out = ucp(&["partition", "--family", "gqa", "--layers", "2", "--config", "2,1,2,1,z1", "--out", s(&src), "--train-steps", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let out = ucp(&["convert", "--src", s(&src), "--out", s(&atomic), "--workers", "2", "--inner", "2", "--strict-replicate=true"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(atomic.join("ucp_meta.json").is_file());

    let out = ucp(&["load", "--atomic", s(&atomic), "--config", "4,1,1,1,z1", "--dtype", "bf16", "--stats", s(&stats)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&stats).unwrap()).unwrap();
    assert_eq!(v["format_version"], 1);
    assert_eq!(v["per_rank"].as_array().unwrap().len(), 4);
    let no_bypass = ucp(&["load", "--atomic", s(&atomic), "--config", "4,1,1,1,z1", "--no-bypass"]);
    let nb: serde_json::Value = serde_json::from_slice(&no_bypass.stdout).unwrap();
    assert_eq!(nb["files_read"].as_u64().unwrap(), 4 * v["files_read"].as_u64().unwrap());

    // Same layout: nothing is written to the scratch directory.
    let scratch = dir.path().join("scratch");
    let out = ucp(&["resume", "--src", s(&src), "--config", s(&src.join("config.json")), "--scratch", s(&scratch)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lazy"));
    assert!(!scratch.exists());

    let out = ucp(&["resume", "--src", s(&src), "--config", "1,2,1", "--scratch", s(&scratch)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(scratch.join("ucp_meta.json").is_file());

    let out = ucp(&["inspect", s(&src.join("rank_0/shards.json"))]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("\"format_version\": 1"));
    let out = ucp(&["inspect", s(&atomic.join("embed.weight/weight.ucpt"))]);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("dtype F32"));
}

#[test]
fn errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out = ucp(&["convert", "--src", s(&dir.path().join("missing")), "--out", s(&dir.path().join("o"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let out = ucp(&["partition", "--config", "2,2,2,1,z3", "--out", s(&dir.path().join("p"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("ZeRO-3"));
}

#[test]
fn bench_writes_baseline_plus_grid() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bench.csv");
    let out = ucp(&["bench", "--layers", "1", "--hidden", "16", "--config", "2,1,1,1,z1", "--workers", "1,2", "--inner", "1,2", "--csv", s(&csv)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 1 + 2 * 2 + 1);
}
