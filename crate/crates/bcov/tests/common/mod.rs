//! Helpers shared by the integration tests and the acceptance harness.

#![allow(dead_code)]

pub mod golden;
pub mod oracle;
pub mod pipeline;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use bcov::analysis::{analyze, ModuleAnalysis};
use bcov::elf::{load_module, ElfModuleView};
use bcov::patch::{patch_file, plan_module, PatchOptions, PatchPlan, PatchedModule};
use bcov_core::Policy;
use bcov_fixtures::{Fixture, Kind, Run};

pub const POLICIES: [Policy; 2] = [Policy::LeafNode, Policy::AnyNode];

pub fn corpus() -> Vec<Fixture> {
    bcov_fixtures::corpus().expect("fixture corpus")
}

pub fn fixture(name: &str) -> Fixture {
    bcov_fixtures::fixture(name).expect("fixture")
}

/// The preloadable runtime built next to the test binaries.
pub fn runtime() -> PathBuf {
    let exe = std::env::current_exe().expect("test executable path");
    let dir = exe.parent().expect("deps dir");
    for cand in [dir.join("libbcov_rt.so"), dir.join("deps").join("libbcov_rt.so")] {
        if cand.exists() {
            return cand;
        }
    }
    panic!("libbcov_rt.so not found next to {}", exe.display());
}

pub fn options(policy: Policy) -> PatchOptions {
    PatchOptions {
        policy: Some(policy),
        functions: None,
    }
}

pub struct Module {
    pub view: ElfModuleView,
    pub analysis: ModuleAnalysis,
    pub plan: PatchPlan,
}

pub fn load(path: &Path, policy: Policy) -> Module {
    let view = load_module(path).expect("load module");
    let analysis = analyze(&view).expect("analyze");
    let plan = plan_module(&view, &analysis, &options(policy)).expect("plan");
    Module { view, analysis, plan }
}

pub fn patch_into(m: &Module, out: &Path) -> PatchedModule {
    patch_file(&m.view, &m.analysis, &m.plan, out).expect("patch")
}

/// Patches every corpus module into `dir` under its own file name.
pub fn patch_corpus(corpus: &[Fixture], policy: Policy, dir: &Path) -> BTreeMap<String, Module> {
    let mut out = BTreeMap::new();
    for fx in corpus {
        let m = load(&fx.path, policy);
        patch_into(&m, &dir.join(fx.spec.file_name()));
        out.insert(fx.spec.file_name(), m);
    }
    out
}

/// File names of the modules a fixture run loads: itself plus dependencies.
pub fn modules_of(fx: &Fixture, corpus: &[Fixture]) -> Vec<String> {
    let mut mods = vec![fx.spec.file_name()];
    for d in &fx.spec.depends {
        let dep = corpus.iter().find(|c| &c.spec.name == d).expect("dependency in corpus");
        mods.push(dep.spec.file_name());
    }
    mods
}

pub fn runnable(fx: &Fixture) -> bool {
    fx.spec.kind != Kind::Shared
}

#[derive(Debug, PartialEq, Eq)]
pub struct Outcome {
    pub stdout: Vec<u8>,
    pub code: Option<i32>,
}

/// Runs `exe` with the run's arguments and stdin. Shared libraries are
/// looked up in `lib_dir`.
pub fn run(exe: &Path, r: &Run, lib_dir: &Path, env: &[(&str, &Path)]) -> Outcome {
    let mut cmd = Command::new(exe);
    cmd.args(&r.args)
        .env("LD_LIBRARY_PATH", lib_dir)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::null());
    for (k, v) in env {
        cmd.env(k, v);
    }
    let mut child = cmd.spawn().expect("spawn fixture");
    let mut stdin = child.stdin.take().expect("stdin pipe");
    if let Some(s) = &r.stdin {
        let _ = stdin.write_all(s.as_bytes());
    }
    drop(stdin);
    let o = child.wait_with_output().expect("wait fixture");
    Outcome {
        stdout: o.stdout,
        code: o.status.code(),
    }
}

/// Dump files in `dir` written for module `name`.
pub fn dumps_for(dir: &Path, name: &str) -> Vec<PathBuf> {
    let prefix = format!("{name}.");
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .expect("dump dir")
        .map(|e| e.expect("dir entry").path())
        .filter(|p| {
            let f = p.file_name().unwrap().to_string_lossy();
            f.starts_with(&prefix) && f.ends_with(".bcov") && f[prefix.len()..].split('.').count() == 3
        })
        .collect();
    v.sort();
    v
}

/// Sequence number parsed from `<module>.<pid>.<seq>.bcov`.
pub fn dump_seq(path: &Path) -> u32 {
    let name = path.file_name().unwrap().to_string_lossy();
    let parts: Vec<&str> = name.rsplitn(3, '.').collect();
    parts[1].parse().expect("sequence number")
}
