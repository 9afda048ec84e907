//! Patch, run, dump, report and trace checks over the fixture corpus.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use bcov::report::{infer_coverage, CoverageReport};
use bcov::verify::{block_heads, trace_block_heads, AccuracyScore, TraceOptions};
use bcov_core::covdata::{decode_dump, merge, HEADER_SIZE};
use bcov_core::{CoverageArray, CoverageHeader, Policy};

use super::{dump_seq, dumps_for, modules_of, patch_corpus, run, runnable, runtime};

/// Runs every input of every executable fixture, original against patched
/// under `policy`. Returns the number of runs.
pub fn transparency(policy: Policy) -> usize {
    let corpus = super::corpus();
    let orig_dir = corpus[0].path.parent().unwrap().to_path_buf();
    let dir = tempfile::tempdir().unwrap();
    patch_corpus(&corpus, policy, dir.path());
    let mut failures = Vec::new();
    let mut runs = 0;
    for fx in corpus.iter().filter(|f| runnable(f)) {
        for r in &fx.spec.runs {
            let a = run(&fx.path, r, &orig_dir, &[]);
            let b = run(&dir.path().join(fx.spec.file_name()), r, dir.path(), &[]);
            runs += 1;
            if a != b {
                failures.push(format!(
                    "{policy:?} {} {:?}: exit {:?} vs {:?}, stdout {:?} vs {:?}",
                    fx.name(),
                    r.args,
                    a.code,
                    b.code,
                    String::from_utf8_lossy(&a.stdout),
                    String::from_utf8_lossy(&b.stdout)
                ));
            }
        }
    }
    assert!(failures.is_empty(), "{}", failures.join("\n"));
    runs
}

pub struct RunCoverage {
    pub fixture: String,
    pub run: usize,
    pub module: String,
    pub report: CoverageReport,
    pub traced: BTreeSet<u64>,
}

/// Reported coverage and the original's traced block heads for every
/// deterministic run and every module it loads.
pub fn collect(policy: Policy) -> Vec<RunCoverage> {
    let corpus = super::corpus();
    let rt = runtime();
    let dir = tempfile::tempdir().unwrap();
    let modules = patch_corpus(&corpus, policy, dir.path());
    let mut out = Vec::new();
    for fx in corpus.iter().filter(|f| runnable(f) && f.spec.deterministic) {
        for (ri, r) in fx.spec.runs.iter().enumerate() {
            let dumps = dir.path().join(format!("dumps-{}-{ri}", fx.name()));
            std::fs::create_dir(&dumps).unwrap();
            run(&dir.path().join(fx.spec.file_name()), r, dir.path(), &[("LD_PRELOAD", &rt), ("BCOV_OUT", &dumps)]);
            for name in modules_of(fx, &corpus) {
                let m = &modules[&name];
                let files = dumps_for(&dumps, &name);
                assert_eq!(files.len(), 1, "{} run {ri} {name}", fx.name());
                let (h, a) = decode_dump(&std::fs::read(&files[0]).unwrap()).unwrap();
                let report = infer_coverage(&m.view, &m.analysis, &m.plan, &h, &a).unwrap();
                let heads = block_heads(&m.analysis, Some(&m.plan.functions));
                let options = TraceOptions {
                    stdin: r.stdin.clone().map(String::into_bytes),
                    ..Default::default()
                };
                let t = trace_block_heads(&fx.path, &r.args, &m.view, &heads, &options).unwrap();
                out.push(RunCoverage {
                    fixture: fx.name().to_string(),
                    run: ri,
                    module: name,
                    report,
                    traced: t.trace.heads,
                });
            }
        }
    }
    out
}

/// Any-node must be exact, leaf-node free of false positives. Returns the
/// number of scored (run, module) pairs.
pub fn accuracy(policy: Policy) -> usize {
    let runs = collect(policy);
    let mut errs = Vec::new();
    for c in &runs {
        let reported: BTreeSet<u64> = c.report.covered_addresses().into_iter().collect();
        let s = AccuracyScore::from_sets(&reported, &c.traced);
        let ok = match policy {
            Policy::AnyNode => s.precision == 1.0 && s.recall == 1.0,
            Policy::LeafNode => s.false_positives == 0,
        };
        if !ok {
            errs.push(format!(
                "{policy:?} {} run {} {}: fp {:x?} fn {:x?}",
                c.fixture,
                c.run,
                c.module,
                reported.difference(&c.traced).collect::<Vec<_>>(),
                c.traced.difference(&reported).collect::<Vec<_>>()
            ));
        }
    }
    assert!(errs.is_empty(), "{}", errs.join("\n"));
    runs.len()
}

/// Dumps of every run of `name` OR-merge into the union of their coverage.
pub fn merged_union(name: &str) {
    let fx = super::fixture(name);
    let rt = runtime();
    let dir = tempfile::tempdir().unwrap();
    let m = super::load(&fx.path, Policy::AnyNode);
    let exe = dir.path().join(fx.spec.file_name());
    super::patch_into(&m, &exe);
    let mut decoded = Vec::new();
    let mut union = BTreeSet::new();
    for (ri, r) in fx.spec.runs.iter().enumerate() {
        let out = dir.path().join(format!("d{ri}"));
        std::fs::create_dir(&out).unwrap();
        run(&exe, r, dir.path(), &[("LD_PRELOAD", &rt), ("BCOV_OUT", &out)]);
        let (h, a) = decode_dump(&std::fs::read(&dumps_for(&out, &fx.spec.file_name())[0]).unwrap()).unwrap();
        union.extend(infer_coverage(&m.view, &m.analysis, &m.plan, &h, &a).unwrap().covered_addresses());
        decoded.push((h, a));
    }
    assert!(decoded.len() >= 2);
    let (h, a) = merge(&decoded).unwrap();
    let merged: BTreeSet<u64> = infer_coverage(&m.view, &m.analysis, &m.plan, &h, &a)
        .unwrap()
        .covered_addresses()
        .into_iter()
        .collect();
    assert_eq!(merged, union);
}

pub fn read_dump(p: &Path) -> (CoverageHeader, CoverageArray) {
    decode_dump(&std::fs::read(p).unwrap()).unwrap()
}

/// A patched run leaves exactly one dump, consistent with the plan.
pub fn exit_dump(policy: Policy) {
    let fx = super::fixture("branch");
    let dir = tempfile::tempdir().unwrap();
    let m = super::load(&fx.path, policy);
    let exe = dir.path().join("branch");
    super::patch_into(&m, &exe);
    let r = &fx.spec.runs[1];
    let o = run(&exe, r, dir.path(), &[("LD_PRELOAD", &runtime()), ("BCOV_OUT", dir.path())]);
    assert_eq!(o, run(&fx.path, r, dir.path(), &[]));
    let files = dumps_for(dir.path(), "branch");
    assert_eq!(files.len(), 1);
    assert_eq!(dump_seq(&files[0]), 0);
    let (h, a) = read_dump(&files[0]);
    assert_eq!(h.policy, policy);
    assert_eq!(h.probe_count as usize, m.plan.probes.len());
    assert_eq!(h.build_hash, m.view.build_hash);
    assert!(a.hits().count() > 0);
    assert_eq!(std::fs::metadata(&files[0]).unwrap().len() as usize, HEADER_SIZE + m.plan.probes.len());
}

fn wait_for(dir: &Path, name: &str, count: usize, size: usize) -> Vec<PathBuf> {
    let start = Instant::now();
    loop {
        let files = dumps_for(dir, name);
        let complete = files
            .iter()
            .all(|f| std::fs::metadata(f).map(|m| m.len() as usize == size).unwrap_or(false));
        if files.len() >= count && complete {
            return files;
        }
        assert!(start.elapsed() < Duration::from_secs(10), "timed out waiting for {count} dumps of {name}");
        std::thread::sleep(Duration::from_millis(10));
    }
}

/// Signals the looping fixture between inputs; each later dump contains
/// every hit of the earlier ones. `signal` is the `BCOV_SIG` value.
pub fn signal_monotone(signal: Option<&str>) {
    let fx = super::fixture("looper");
    let dir = tempfile::tempdir().unwrap();
    let m = super::load(&fx.path, Policy::AnyNode);
    let exe = dir.path().join("looper");
    super::patch_into(&m, &exe);
    let size = HEADER_SIZE + m.plan.probes.len();
    let out = dir.path().join("out");
    std::fs::create_dir(&out).unwrap();
    let mut cmd = Command::new(&exe);
    cmd.env("LD_PRELOAD", runtime())
        .env("BCOV_OUT", &out)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped());
    if let Some(s) = signal {
        cmd.env("BCOV_SIG", s);
    }
    let mut child = cmd.spawn().unwrap();
    let sig = match signal {
        Some("SIGUSR2") => libc::SIGUSR2,
        None => libc::SIGUSR1,
        Some(other) => panic!("unsupported test signal {other}"),
    };
    let mut stdin = child.stdin.take().unwrap();
    let mut stdout = BufReader::new(child.stdout.take().unwrap());
    let mut line = String::new();
    stdout.read_line(&mut line).unwrap();
    assert_eq!(line, "ready\n");
    for (i, input) in ["a\n", "bbb\n", "c\n"].iter().enumerate() {
        unsafe { libc::kill(child.id() as i32, sig) };
        wait_for(&out, "looper", i + 1, size);
        stdin.write_all(input.as_bytes()).unwrap();
        stdin.flush().unwrap();
        line.clear();
        stdout.read_line(&mut line).unwrap();
    }
    drop(stdin);
    assert!(child.wait().unwrap().success());
    let files = wait_for(&out, "looper", 4, size);
    let mut by_seq: Vec<(u32, BTreeSet<usize>)> = files
        .iter()
        .map(|f| (dump_seq(f), read_dump(f).1.hits().collect()))
        .collect();
    by_seq.sort();
    assert_eq!(by_seq.iter().map(|s| s.0).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
    for w in by_seq.windows(2) {
        assert!(w[0].1.is_subset(&w[1].1), "{signal:?}: seq {} not contained in {}", w[0].0, w[1].0);
    }
    assert!(by_seq[0].1.len() < by_seq[3].1.len(), "coverage never grew");
}
