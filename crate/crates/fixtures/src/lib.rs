//! Compiled test corpus: C, C++ and assembly sources plus a JSON manifest per
//! binary describing how to build it, how to run it and what the analyzer
//! should find in it.
//!
//! Tests call [`corpus`], which prefers the checked-in binaries under
//! `prebuilt/` and falls back to compiling into the cargo target directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad manifest {path}: {source}")]
    Manifest {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("compiler `{0}` not found; install it or use the prebuilt corpus")]
    CompilerMissing(String),
    #[error("building {name} failed:\n{log}")]
    BuildFailed { name: String, log: String },
    #[error("unknown fixture `{0}`")]
    Unknown(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Exe,
    Shared,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Run {
    pub args: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stdin: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpectedTable {
    pub function: String,
    /// Number of indirect jmps dispatching through tables in the function.
    pub sites: usize,
    pub kind: String,
    pub bound_kind: String,
    pub entry_count: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Expected {
    pub jump_tables: Vec<ExpectedTable>,
    /// Function name to number of distinct landing pads.
    pub landing_pads: BTreeMap<String, usize>,
    pub nonreturn: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureSpec {
    pub name: String,
    pub kind: Kind,
    pub language: String,
    pub compiler: String,
    pub sources: Vec<String>,
    pub flags: Vec<String>,
    pub link_flags: Vec<String>,
    pub depends: Vec<String>,
    pub strip: bool,
    pub deterministic: bool,
    pub runs: Vec<Run>,
    pub expected: Expected,
}

impl FixtureSpec {
    /// File name of the built artifact.
    pub fn file_name(&self) -> String {
        match self.kind {
            Kind::Exe => self.name.clone(),
            Kind::Shared => format!("{}.so", self.name),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Fixture {
    pub spec: FixtureSpec,
    pub path: PathBuf,
}

impl Fixture {
    pub fn name(&self) -> &str {
        &self.spec.name
    }
}

fn crate_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

pub fn source_dir() -> PathBuf {
    crate_dir().join("corpus/src")
}

pub fn manifest_dir() -> PathBuf {
    crate_dir().join("corpus/manifests")
}

pub fn prebuilt_dir() -> PathBuf {
    crate_dir().join("prebuilt")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FixtureError + '_ {
    move |source| FixtureError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// All manifests, in build order (dependencies first, then by name).
pub fn load_specs() -> Result<Vec<FixtureSpec>, FixtureError> {
    let dir = manifest_dir();
    let mut specs = Vec::new();
    for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
        let path = entry.map_err(io_err(&dir))?.path();
        if path.extension().is_some_and(|e| e == "json") {
            let text = fs::read_to_string(&path).map_err(io_err(&path))?;
            let spec: FixtureSpec = serde_json::from_str(&text)
                .map_err(|source| FixtureError::Manifest { path, source })?;
            specs.push(spec);
        }
    }
    specs.sort_by(|a, b| (!a.depends.is_empty(), &a.name).cmp(&(!b.depends.is_empty(), &b.name)));
    Ok(specs)
}

fn expand(arg: &str, out: &Path) -> String {
    arg.replace("{out}", &out.display().to_string())
        .replace("{src}", &source_dir().display().to_string())
}

/// Compiles one fixture into `out_dir`.
pub fn build_fixture(spec: &FixtureSpec, out_dir: &Path) -> Result<PathBuf, FixtureError> {
    let out = out_dir.join(spec.file_name());
    let src = source_dir();
    let mut cmd = Command::new(&spec.compiler);
    cmd.args(spec.flags.iter().map(|f| expand(f, out_dir)));
    cmd.args(spec.sources.iter().map(|s| src.join(s)));
    cmd.arg("-o").arg(&out);
    cmd.args(spec.link_flags.iter().map(|f| expand(f, out_dir)));
    let output = cmd.output().map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => FixtureError::CompilerMissing(spec.compiler.clone()),
        _ => FixtureError::Io {
            path: out.clone(),
            source: e,
        },
    })?;
    if !output.status.success() {
        return Err(FixtureError::BuildFailed {
            name: spec.name.clone(),
            log: String::from_utf8_lossy(&output.stderr).into_owned(),
        });
    }
    if spec.strip {
        let status = Command::new("strip")
            .arg("--strip-all")
            .arg(&out)
            .status()
            .map_err(|_| FixtureError::CompilerMissing("strip".into()))?;
        if !status.success() {
            return Err(FixtureError::BuildFailed {
                name: spec.name.clone(),
                log: "strip failed".into(),
            });
        }
    }
    Ok(out)
}

pub fn build_corpus(out_dir: &Path) -> Result<Vec<Fixture>, FixtureError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    load_specs()?
        .into_iter()
        .map(|spec| {
            let path = build_fixture(&spec, out_dir)?;
            Ok(Fixture { spec, path })
        })
        .collect()
}

fn default_build_dir() -> PathBuf {
    let target = std::env::var_os("CARGO_TARGET_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| crate_dir().join("../../target"));
    target.join("bcov-fixtures")
}

/// The corpus, prebuilt when every artifact is checked in, compiled otherwise.
pub fn corpus() -> Result<Vec<Fixture>, FixtureError> {
    let specs = load_specs()?;
    let pre = prebuilt_dir();
    if specs.iter().all(|s| pre.join(s.file_name()).is_file()) {
        return Ok(specs
            .into_iter()
            .map(|spec| Fixture {
                path: pre.join(spec.file_name()),
                spec,
            })
            .collect());
    }
    build_corpus(&default_build_dir())
}

pub fn fixture(name: &str) -> Result<Fixture, FixtureError> {
    corpus()?
        .into_iter()
        .find(|f| f.spec.name == name)
        .ok_or_else(|| FixtureError::Unknown(name.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifests_parse_and_cover_the_corpus() {
        let specs = load_specs().unwrap();
        assert!(specs.len() >= 20);
        for s in &specs {
            for src in &s.sources {
                assert!(source_dir().join(src).is_file(), "{} missing {src}", s.name);
            }
            for d in &s.depends {
                assert!(specs.iter().any(|o| &o.name == d));
            }
        }
        // dependencies come first
        let pos = |n: &str| specs.iter().position(|s| s.name == n).unwrap();
        assert!(pos("libfix") < pos("shlib_main"));
    }
}
