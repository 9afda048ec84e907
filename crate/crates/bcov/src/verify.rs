//! Single-step tracer used as a ground-truth oracle for block coverage,
//! and scoring of reported coverage against a trace.

use std::collections::BTreeSet;
use std::ffi::OsStr;
use std::fs;
use std::io;
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::analysis::ModuleAnalysis;
use crate::elf::{ElfModuleView, PAGE_SIZE};
use crate::report::CoverageReport;

#[derive(Debug, thiserror::Error)]
pub enum VerifyError {
    #[error("failed to start tracee: {0}")]
    Spawn(io::Error),
    #[error("ptrace {op} failed: {err}")]
    Ptrace { op: &'static str, err: io::Error },
    #[error("tracee crashed with signal {0}")]
    TraceeCrash(i32),
    #[error("tracee did not finish within {0:?}")]
    Timeout(Duration),
    #[error("module {0} was never mapped by the tracee")]
    ModuleNotLoaded(PathBuf),
    #[error("trace and report describe different modules ({trace} vs {report})")]
    ModuleMismatch { trace: String, report: String },
    #[error("bad trace file line {line}: {text:?}")]
    BadTraceLine { line: usize, text: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Executed block heads of one module, as static (unrelocated) addresses.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BlockTrace {
    pub module: PathBuf,
    pub heads: BTreeSet<u64>,
}

#[derive(Clone, Debug)]
pub struct TraceOptions {
    pub timeout: Duration,
    /// Pass the program's stdout and stderr through instead of discarding them.
    pub output: bool,
    pub stdin: Option<Vec<u8>>,
}

impl Default for TraceOptions {
    fn default() -> Self {
        TraceOptions {
            timeout: Duration::from_secs(60),
            output: false,
            stdin: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TraceOutcome {
    pub trace: BlockTrace,
    pub exit_code: i32,
    pub steps: u64,
}

/// Block heads of every analyzed function, or only the listed ones.
pub fn block_heads(analysis: &ModuleAnalysis, functions: Option<&[usize]>) -> BTreeSet<u64> {
    let pick = |fi: usize| {
        analysis.functions[fi]
            .result
            .as_ref()
            .ok()
            .into_iter()
            .flat_map(|a| a.cfg.blocks.iter().map(|b| b.addr))
    };
    match functions {
        Some(fs) => fs.iter().flat_map(|&fi| pick(fi)).collect(),
        None => (0..analysis.functions.len()).flat_map(pick).collect(),
    }
}

#[derive(Clone, Debug)]
struct Mapping {
    start: u64,
    end: u64,
    offset: u64,
    path: Option<PathBuf>,
}

fn read_maps(pid: i32) -> io::Result<Vec<Mapping>> {
    let text = fs::read_to_string(format!("/proc/{pid}/maps"))?;
    let mut out = Vec::new();
    for line in text.lines() {
        let mut it = line.split_whitespace();
        let (Some(range), Some(perms), Some(offset)) = (it.next(), it.next(), it.next()) else {
            continue;
        };
        if !perms.contains('x') {
            continue;
        }
        // Skip device and inode.
        let path = it.nth(2).filter(|p| p.starts_with('/')).map(PathBuf::from);
        let Some((s, e)) = range.split_once('-') else { continue };
        out.push(Mapping {
            start: u64::from_str_radix(s, 16).unwrap_or(0),
            end: u64::from_str_radix(e, 16).unwrap_or(0),
            offset: u64::from_str_radix(offset, 16).unwrap_or(0),
            path,
        });
    }
    Ok(out)
}

fn same_file(a: &Path, b: &Path) -> bool {
    use std::os::unix::fs::MetadataExt;
    match (fs::metadata(a), fs::metadata(b)) {
        (Ok(x), Ok(y)) => x.dev() == y.dev() && x.ino() == y.ino(),
        _ => false,
    }
}

/// Executable mappings of the traced module, keyed by runtime range, with
/// the bias to subtract to get static addresses.
struct ModuleRanges {
    target: PathBuf,
    /// (start, end, bias) of each executable mapping of the module.
    segments: Vec<(u64, u64, u64)>,
    known: Vec<(u64, u64)>,
}

impl ModuleRanges {
    fn refresh(&mut self, pid: i32, view: &ElfModuleView) -> io::Result<()> {
        let maps = read_maps(pid)?;
        self.known = maps.iter().map(|m| (m.start, m.end)).collect();
        self.segments.clear();
        for m in &maps {
            if m.path.as_deref().is_some_and(|p| same_file(p, &self.target)) {
                if let Some(vaddr) = offset_to_vaddr(view, m.offset) {
                    self.segments.push((m.start, m.end, m.start.wrapping_sub(vaddr)));
                }
            }
        }
        Ok(())
    }

    fn is_known(&self, pc: u64) -> bool {
        self.known.iter().any(|&(s, e)| pc >= s && pc < e)
    }

    fn bias_of(&self, pc: u64) -> Option<u64> {
        self.segments
            .iter()
            .find(|&&(s, e, _)| pc >= s && pc < e)
            .map(|&(_, _, bias)| bias)
    }
}

/// Static vaddr of a page-aligned file offset mapped by a loader.
fn offset_to_vaddr(view: &ElfModuleView, offset: u64) -> Option<u64> {
    view.load_segments
        .iter()
        .find(|s| offset >= s.offset & !(PAGE_SIZE - 1) && offset < s.offset + s.file_size)
        .map(|s| s.vaddr.wrapping_sub(s.offset).wrapping_add(offset))
}

fn ptrace_err(op: &'static str) -> VerifyError {
    VerifyError::Ptrace {
        op,
        err: io::Error::last_os_error(),
    }
}

fn wait(pid: i32) -> Result<i32, VerifyError> {
    let mut status = 0;
    loop {
        let r = unsafe { libc::waitpid(pid, &mut status, libc::__WALL) };
        if r == pid {
            return Ok(status);
        }
        let err = io::Error::last_os_error();
        if err.kind() != io::ErrorKind::Interrupted {
            return Err(VerifyError::Ptrace { op: "waitpid", err });
        }
    }
}

fn read_pc(pid: i32) -> Result<u64, VerifyError> {
    let mut regs: libc::user_regs_struct = unsafe { std::mem::zeroed() };
    let r = unsafe {
        libc::ptrace(
            libc::PTRACE_GETREGS,
            pid,
            std::ptr::null_mut::<libc::c_void>(),
            &mut regs as *mut _ as *mut libc::c_void,
        )
    };
    if r < 0 {
        return Err(ptrace_err("GETREGS"));
    }
    Ok(regs.rip)
}

/// Runs the tracee at full speed to `addr` with a temporary int3.
fn run_to(pid: i32, addr: u64) -> Result<(), VerifyError> {
    let word = unsafe {
        *libc::__errno_location() = 0;
        libc::ptrace(libc::PTRACE_PEEKTEXT, pid, addr as *mut libc::c_void, 0)
    };
    if word == -1 && io::Error::last_os_error().raw_os_error() != Some(0) {
        return Err(ptrace_err("PEEKTEXT"));
    }
    let trap = (word & !0xff) | 0xcc;
    if unsafe { libc::ptrace(libc::PTRACE_POKETEXT, pid, addr as *mut libc::c_void, trap) } < 0 {
        return Err(ptrace_err("POKETEXT"));
    }
    if unsafe { libc::ptrace(libc::PTRACE_CONT, pid, 0, 0) } < 0 {
        return Err(ptrace_err("CONT"));
    }
    let status = wait(pid)?;
    if !libc::WIFSTOPPED(status) || libc::WSTOPSIG(status) != libc::SIGTRAP {
        if libc::WIFSIGNALED(status) {
            return Err(VerifyError::TraceeCrash(libc::WTERMSIG(status)));
        }
        return Err(VerifyError::TraceeCrash(libc::WSTOPSIG(status)));
    }
    if unsafe { libc::ptrace(libc::PTRACE_POKETEXT, pid, addr as *mut libc::c_void, word) } < 0 {
        return Err(ptrace_err("POKETEXT"));
    }
    let mut regs: libc::user_regs_struct = unsafe { std::mem::zeroed() };
    let r = unsafe {
        libc::ptrace(
            libc::PTRACE_GETREGS,
            pid,
            std::ptr::null_mut::<libc::c_void>(),
            &mut regs as *mut _ as *mut libc::c_void,
        )
    };
    if r < 0 {
        return Err(ptrace_err("GETREGS"));
    }
    regs.rip = addr;
    let r = unsafe {
        libc::ptrace(
            libc::PTRACE_SETREGS,
            pid,
            std::ptr::null_mut::<libc::c_void>(),
            &mut regs as *mut _ as *mut libc::c_void,
        )
    };
    if r < 0 {
        return Err(ptrace_err("SETREGS"));
    }
    Ok(())
}

fn kill(pid: i32) {
    unsafe {
        libc::kill(pid, libc::SIGKILL);
    }
    let _ = wait(pid);
}

/// Runs `binary` under single-stepping and records each executed
/// instruction whose static address in `module` is in `heads`. `module`
/// is the executable itself or a shared library it loads.
pub fn trace_block_heads(
    binary: &Path,
    args: &[impl AsRef<OsStr>],
    module: &ElfModuleView,
    heads: &BTreeSet<u64>,
    options: &TraceOptions,
) -> Result<TraceOutcome, VerifyError> {
    let target = module.path.clone();
    let mut cmd = Command::new(binary);
    cmd.args(args).stdin(if options.stdin.is_some() { Stdio::piped() } else { Stdio::null() });
    if !options.output {
        cmd.stdout(Stdio::null()).stderr(Stdio::null());
    }
    unsafe {
        cmd.pre_exec(|| {
            if libc::ptrace(libc::PTRACE_TRACEME, 0, 0, 0) < 0 {
                return Err(io::Error::last_os_error());
            }
            Ok(())
        });
    }
    let mut child = cmd.spawn().map_err(VerifyError::Spawn)?;
    let pid = child.id() as i32;
    if let (Some(mut pipe), Some(data)) = (child.stdin.take(), options.stdin.clone()) {
        std::thread::spawn(move || {
            use std::io::Write;
            let _ = pipe.write_all(&data);
        });
    }
    // The child stops with SIGTRAP right after exec.
    let status = wait(pid)?;
    if !libc::WIFSTOPPED(status) {
        return Err(VerifyError::TraceeCrash(0));
    }
    unsafe {
        libc::ptrace(
            libc::PTRACE_SETOPTIONS,
            pid,
            0,
            libc::PTRACE_O_EXITKILL as libc::c_long,
        );
    }

    let mut ranges = ModuleRanges {
        target: target.clone(),
        segments: Vec::new(),
        known: Vec::new(),
    };
    ranges.refresh(pid, module)?;
    // An executable runs no code of its own before its entry point, so the
    // loader can run untraced.
    if !module.is_shared_object || same_file(binary, &target) {
        if let Some(&(_, _, bias)) = ranges.segments.first() {
            if let Err(e) = run_to(pid, bias.wrapping_add(module.entry)) {
                kill(pid);
                return Err(e);
            }
        }
    }
    let mut seen = BTreeSet::new();
    let mut mapped = !ranges.segments.is_empty();
    let start = Instant::now();
    let mut steps = 0u64;
    let mut signal = 0;
    loop {
        let pc = read_pc(pid)?;
        if !ranges.is_known(pc) {
            ranges.refresh(pid, module)?;
            mapped |= !ranges.segments.is_empty();
        }
        if let Some(bias) = ranges.bias_of(pc) {
            let addr = pc.wrapping_sub(bias);
            if heads.contains(&addr) {
                seen.insert(addr);
            }
        }
        if unsafe { libc::ptrace(libc::PTRACE_SINGLESTEP, pid, 0, signal as libc::c_long) } < 0 {
            return Err(ptrace_err("SINGLESTEP"));
        }
        steps += 1;
        if steps % 4096 == 0 && start.elapsed() > options.timeout {
            kill(pid);
            return Err(VerifyError::Timeout(options.timeout));
        }
        let status = wait(pid)?;
        if libc::WIFEXITED(status) {
            if !mapped {
                return Err(VerifyError::ModuleNotLoaded(target));
            }
            return Ok(TraceOutcome {
                trace: BlockTrace {
                    module: target,
                    heads: seen,
                },
                exit_code: libc::WEXITSTATUS(status),
                steps,
            });
        }
        if libc::WIFSIGNALED(status) {
            return Err(VerifyError::TraceeCrash(libc::WTERMSIG(status)));
        }
        let sig = libc::WSTOPSIG(status);
        signal = if sig == libc::SIGTRAP { 0 } else { sig };
    }
}

/// Sorted unique hex addresses, one per line.
pub fn write_trace(trace: &BlockTrace) -> String {
    trace.heads.iter().map(|a| format!("{a:#x}\n")).collect()
}

pub fn parse_trace(module: &Path, text: &str) -> Result<BlockTrace, VerifyError> {
    let mut heads = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let v = t
            .strip_prefix("0x")
            .and_then(|h| u64::from_str_radix(h, 16).ok())
            .ok_or_else(|| VerifyError::BadTraceLine {
                line: i + 1,
                text: line.to_string(),
            })?;
        heads.insert(v);
    }
    Ok(BlockTrace {
        module: module.to_path_buf(),
        heads,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyScore {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
}

impl AccuracyScore {
    pub fn from_sets(reported: &BTreeSet<u64>, traced: &BTreeSet<u64>) -> Self {
        let tp = reported.intersection(traced).count();
        let fp = reported.len() - tp;
        let fn_ = traced.len() - tp;
        let ratio = |n: usize, d: usize| if d == 0 { 1.0 } else { n as f64 / d as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f_score = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        AccuracyScore {
            true_positives: tp,
            false_positives: fp,
            false_negatives: fn_,
            precision,
            recall,
            f_score,
        }
    }
}

pub fn score(report: &CoverageReport, trace: &BlockTrace) -> Result<AccuracyScore, VerifyError> {
    let trace_name = trace
        .module
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    if !trace_name.is_empty() && !report.module.is_empty() && trace_name != report.module {
        return Err(VerifyError::ModuleMismatch {
            trace: trace_name,
            report: report.module.clone(),
        });
    }
    let reported: BTreeSet<u64> = report.covered_addresses().into_iter().collect();
    Ok(AccuracyScore::from_sets(&reported, &trace.heads))
}
