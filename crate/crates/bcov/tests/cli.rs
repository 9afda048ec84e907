//! The `bcov` command line, driven as a subprocess.

mod common;

use std::path::Path;
use std::process::{Command, Output, Stdio};

use bcov::report::CoverageReport;

fn bcov(args: &[&dyn AsRef<std::ffi::OsStr>]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bcov"))
        .args(args.iter().map(|a| a.as_ref()))
        .stdin(Stdio::null())
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn run_patched(exe: &Path, args: &[&str], out: &Path) {
    let st = Command::new(exe)
        .args(args)
        .env("LD_PRELOAD", common::runtime())
        .env("BCOV_OUT", out)
        .stdout(Stdio::null())
        .status()
        .unwrap();
    assert!(st.code().is_some());
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(bcov(&[&"frobnicate"]).status.code(), Some(2));
    assert_eq!(bcov(&[&"patch", &"-i", &"x"]).status.code(), Some(2));
    let fx = common::fixture("branch");
    let dir = tempfile::tempdir().unwrap();
    let o = bcov(&[&"patch", &"-i", &fx.path, &"-o", &dir.path().join("b"), &"-p", &"any", &"-f", &"no_such_fn"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!dir.path().join("b").exists());
}

#[test]
fn runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = bcov(&[&"patch", &"-i", &dir.path().join("missing"), &"-o", &dir.path().join("b"), &"-p", &"leaf"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
}

#[test]
fn patch_prints_statistics() {
    let fx = common::fixture("branch");
    let dir = tempfile::tempdir().unwrap();
    let mut fractions = Vec::new();
    for p in ["leaf", "any"] {
        let out = dir.path().join(p);
        let o = bcov(&[&"patch", &"-i", &fx.path, &"-o", &out, &"-p", &p]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        let line = stdout(&o);
        let field = |k: &str| -> f64 {
            line.split_whitespace()
                .find_map(|w| w.strip_prefix(&format!("{k}=")))
                .unwrap_or_else(|| panic!("{k} in {line}"))
                .parse()
                .unwrap()
        };
        assert_eq!(field("probe_fraction"), (field("probes") / field("blocks") * 1e4).round() / 1e4);
        assert!(field("code_segment") > 0.0);
        assert!(field("data_segment") >= 28.0 + field("probes"));
        fractions.push(field("probe_fraction"));
        assert!(out.exists());
    }
    assert!(fractions[0] < fractions[1]);
}

#[test]
fn analyze_emits_jump_table_json_lines() {
    let fx = common::fixture("switch_dense");
    let o = bcov(&[&"analyze", &"-i", &fx.path, &"--jump-tables"]);
    assert_eq!(o.status.code(), Some(0));
    let lines: Vec<serde_json::Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 1);
    let t = &lines[0];
    for k in ["jmp_addr", "base", "kind", "bound", "entry_count", "targets", "patchable"] {
        assert!(t.get(k).is_some(), "{k}");
    }
    assert_eq!(t["entry_count"], 92);
    assert_eq!(t["kind"], "offset32");
    assert!(t["jmp_addr"].as_str().unwrap().starts_with("0x"));
}

#[test]
fn dump_cfg_writes_dot() {
    let fx = common::fixture("branch");
    let o = bcov(&[&"dump-cfg", &"-i", &fx.path, &"-f", &"main"]);
    assert_eq!(o.status.code(), Some(0));
    let dot = stdout(&o);
    assert!(dot.starts_with("digraph \"main\""));
    assert_eq!(dot.matches("digraph").count(), 1);
    assert!(dot.contains("->"));
}

#[test]
fn patch_run_report_merge_verify() {
    let fx = common::fixture("branch");
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let exe = d.join("branch");
    assert!(bcov(&[&"patch", &"-i", &fx.path, &"-o", &exe, &"-p", &"any"]).status.success());
    std::fs::create_dir(d.join("a")).unwrap();
    std::fs::create_dir(d.join("b")).unwrap();
    run_patched(&exe, &["5"], &d.join("a"));
    run_patched(&exe, &["-3"], &d.join("b"));
    let da = &common::dumps_for(&d.join("a"), "branch")[0];
    let db = &common::dumps_for(&d.join("b"), "branch")[0];

    let o = bcov(&[&"report", &"-i", &fx.path, &"-d", da, &"-p", &"any", &"--format", &"json"]);
    assert!(o.status.success());
    let ra: CoverageReport = serde_json::from_slice(&o.stdout).unwrap();
    assert!(ra.covered_blocks > 0);
    let text = stdout(&bcov(&[&"report", &"-i", &fx.path, &"-d", da, &"-p", &"any"]));
    assert!(text.lines().last().unwrap().starts_with("total"));

    // wrong policy is an error
    assert_eq!(bcov(&[&"report", &"-i", &fx.path, &"-d", da, &"-p", &"leaf"]).status.code(), Some(1));

    let merged = d.join("m.bcov");
    assert!(bcov(&[&"merge", da, db, &"-o", &merged]).status.success());
    let o = bcov(&[&"report", &"-i", &fx.path, &"-d", &merged, &"-p", &"any", &"--format", &"json", &"-o", &d.join("m.json")]);
    assert!(o.status.success());
    let rm: CoverageReport = serde_json::from_slice(&std::fs::read(d.join("m.json")).unwrap()).unwrap();
    assert!(rm.covered_blocks > ra.covered_blocks);

    let trace = d.join("t.txt");
    let o = bcov(&[&"verify", &"trace", &"-i", &fx.path, &"-o", &trace, &"--", &"5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let lines: Vec<String> = std::fs::read_to_string(&trace).unwrap().lines().map(String::from).collect();
    let mut sorted = lines.clone();
    sorted.sort_by_key(|l| u64::from_str_radix(&l[2..], 16).unwrap());
    assert_eq!(lines, sorted);

    let o = bcov(&[&"verify", &"compare", &"-i", &fx.path, &"-d", da, &"-t", &trace, &"-p", &"any"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let score: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(score["precision"], 1.0);
    assert_eq!(score["recall"], 1.0);
    // the other run's dump disagrees with this trace
    let o = bcov(&[&"verify", &"compare", &"-i", &fx.path, &"-d", db, &"-t", &trace, &"-p", &"any"]);
    assert_eq!(o.status.code(), Some(3));
    let o = bcov(&[&"verify", &"compare", &"-i", &fx.path, &"-d", db, &"-t", &trace, &"-p", &"any", &"--min-precision", &"0", &"--min-recall", &"0"]);
    assert_eq!(o.status.code(), Some(0));
}
