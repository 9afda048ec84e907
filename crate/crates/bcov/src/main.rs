use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use bcov::analysis::{analyze, ModuleAnalysis};
use bcov::elf::{load_module, ElfError, ElfModuleView};
use bcov::jumptab::JumpTable;
use bcov::patch::{plan, plan_module, patch_file, PatchError, PatchOptions};
use bcov::report::{infer_coverage, render_json, render_text, ReportError};
use bcov::verify::{
    block_heads, parse_trace, score, trace_block_heads, write_trace, TraceOptions, VerifyError,
};
use bcov_core::covdata::{decode_dump, encode_dump, merge};
use bcov_core::{CovDataError, Policy};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "bcov", version, about = "Static coverage instrumentation for x86-64 ELF modules")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Instrument a module and write the patched copy.
    Patch {
        #[arg(short, long)]
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[command(flatten)]
        select: Selection,
    },
    /// Reconstruct coverage from a dump of a patched module.
    Report {
        /// The original, unpatched module.
        #[arg(short, long)]
        input: PathBuf,
        #[arg(short, long)]
        dump: PathBuf,
        #[command(flatten)]
        select: Selection,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// OR-merge dumps of the same patched module.
    Merge {
        #[arg(required = true)]
        dumps: Vec<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Print analysis results as JSON lines.
    Analyze {
        #[arg(short, long)]
        input: PathBuf,
        /// One record per recovered jump table instead of per function.
        #[arg(long)]
        jump_tables: bool,
    },
    /// Write the CFG of every (or each selected) function in DOT.
    DumpCfg {
        #[arg(short, long)]
        input: PathBuf,
        /// Function names or hex start addresses.
        #[arg(short, long, value_delimiter = ',')]
        functions: Option<Vec<String>>,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Ground-truth tracing and accuracy scoring.
    #[command(subcommand)]
    Verify(Verify),
}

#[derive(Subcommand)]
enum Verify {
    /// Single-step the original binary and record executed block heads.
    Trace {
        /// The original executable to run.
        #[arg(short, long)]
        input: PathBuf,
        /// Record heads of this shared library instead of the executable.
        #[arg(long)]
        module: Option<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, default_value_t = 60)]
        timeout_secs: u64,
        /// Arguments passed to the program.
        #[arg(last = true)]
        args: Vec<OsString>,
    },
    /// Score a dump's reconstructed coverage against a trace.
    Compare {
        /// The original module the trace and dump belong to.
        #[arg(short, long)]
        input: PathBuf,
        #[arg(short, long)]
        dump: PathBuf,
        #[arg(short, long)]
        trace: PathBuf,
        #[command(flatten)]
        select: Selection,
        #[arg(long, default_value_t = 1.0)]
        min_precision: f64,
        #[arg(long, default_value_t = 1.0)]
        min_recall: f64,
    },
}

#[derive(Args)]
struct Selection {
    #[arg(short, long, value_enum)]
    policy: PolicyArg,
    /// Restrict instrumentation to these function names or hex addresses.
    #[arg(short, long, value_delimiter = ',')]
    functions: Option<Vec<String>>,
}

impl Selection {
    fn options(&self) -> PatchOptions {
        PatchOptions {
            policy: Some(self.policy.into()),
            functions: self.functions.clone(),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Leaf,
    Any,
}

impl From<PolicyArg> for Policy {
    fn from(p: PolicyArg) -> Policy {
        match p {
            PolicyArg::Leaf => Policy::LeafNode,
            PolicyArg::Any => Policy::AnyNode,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Elf(#[from] ElfError),
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error("{path}: {source}")]
    CovData { path: PathBuf, source: CovDataError },
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Usage(String),
    #[error("accuracy below threshold")]
    Threshold,
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Threshold => 3,
            _ => 1,
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: Option<&Path>, bytes: &[u8]) -> Result<(), CliError> {
    match path {
        Some(p) => fs::write(p, bytes).map_err(|source| CliError::Io {
            path: p.to_path_buf(),
            source,
        }),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(bytes)
                .and_then(|_| out.flush())
                .map_err(|source| CliError::Io {
                    path: PathBuf::from("<stdout>"),
                    source,
                })
        }
    }
}

fn load(path: &Path) -> Result<(ElfModuleView, ModuleAnalysis), CliError> {
    let view = load_module(path)?;
    let analysis = analyze(&view)?;
    Ok((view, analysis))
}

fn load_dump(path: &Path) -> Result<(bcov_core::CoverageHeader, bcov_core::CoverageArray), CliError> {
    decode_dump(&read(path)?).map_err(|source| CliError::CovData {
        path: path.to_path_buf(),
        source,
    })
}

fn check_filter(analysis: &ModuleAnalysis, options: &PatchOptions, plan_functions: usize) -> Result<(), CliError> {
    if options.functions.is_some() && plan_functions == 0 && !analysis.functions.is_empty() {
        return Err(CliError::Usage("no function matches the filter".into()));
    }
    Ok(())
}

#[derive(Serialize)]
struct TableRecord<'a> {
    jmp_addr: String,
    base: String,
    kind: &'a bcov::jumptab::EntryKind,
    bound_kind: &'a bcov::jumptab::BoundKind,
    bound: u64,
    entry_count: u64,
    targets: Vec<String>,
    patchable: bool,
}

impl<'a> From<&'a JumpTable> for TableRecord<'a> {
    fn from(t: &'a JumpTable) -> Self {
        TableRecord {
            jmp_addr: format!("{:#x}", t.jmp_addr),
            base: format!("{:#x}", t.base),
            kind: &t.entry_kind,
            bound_kind: &t.bound_kind,
            bound: t.bound,
            entry_count: t.entry_count,
            targets: t.targets.iter().map(|a| format!("{a:#x}")).collect(),
            patchable: t.patchable,
        }
    }
}

#[derive(Serialize)]
struct FunctionRecord {
    name: String,
    address: String,
    size: u64,
    blocks: Option<usize>,
    superblocks: Option<usize>,
    jump_tables: usize,
    nonreturn: bool,
    error: Option<String>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Patch { input, output, select } => {
            let (view, analysis) = load(&input)?;
            let options = select.options();
            let p = plan_module(&view, &analysis, &options)?;
            check_filter(&analysis, &options, p.functions.len())?;
            patch_file(&view, &analysis, &p, &output)?;
            println!(
                "probes={} blocks={} probe_fraction={:.4} code_segment={} data_segment={} hosts={} unprobeable={} instrumented={} skipped={}",
                p.probes.len(),
                p.total_blocks,
                p.probe_fraction(),
                p.code_seg_bytes,
                p.data_seg_bytes,
                p.hosts.len(),
                p.unprobeable.iter().filter(|u| !u.covered_by_siblings).count(),
                p.functions.len(),
                p.skipped.len()
            );
        }
        Command::Report {
            input,
            dump,
            select,
            format,
            output,
        } => {
            let (view, analysis) = load(&input)?;
            let (header, array) = load_dump(&dump)?;
            let p = plan(&view, &analysis, &select.options());
            let report = infer_coverage(&view, &analysis, &p, &header, &array)?;
            let text = match format {
                Format::Text => render_text(&report),
                Format::Json => render_json(&report) + "\n",
            };
            write(output.as_deref(), text.as_bytes())?;
        }
        Command::Merge { dumps, output } => {
            let decoded = dumps.iter().map(|d| load_dump(d)).collect::<Result<Vec<_>, _>>()?;
            let (header, array) = merge(&decoded).map_err(|source| CliError::CovData {
                path: dumps[0].clone(),
                source,
            })?;
            write(Some(&output), &encode_dump(&header, &array))?;
        }
        Command::Analyze { input, jump_tables } => {
            let (_, analysis) = load(&input)?;
            let mut out = String::new();
            if jump_tables {
                for t in analysis.tables() {
                    out += &serde_json::to_string(&TableRecord::from(t)).expect("serializable");
                    out.push('\n');
                }
            } else {
                for f in &analysis.functions {
                    let rec = FunctionRecord {
                        name: f.function.display_name(),
                        address: format!("{:#x}", f.function.start),
                        size: f.function.size,
                        blocks: f.result.as_ref().ok().map(|a| a.cfg.blocks.len()),
                        superblocks: f.result.as_ref().ok().map(|a| a.sbg.len()),
                        jump_tables: f.result.as_ref().map_or(0, |a| a.tables.len()),
                        nonreturn: analysis.callgraph.nonreturn.contains(&f.function.start),
                        error: f.result.as_ref().err().map(|e| e.to_string()),
                    };
                    out += &serde_json::to_string(&rec).expect("serializable");
                    out.push('\n');
                }
            }
            write(None, out.as_bytes())?;
        }
        Command::DumpCfg {
            input,
            functions,
            output,
        } => {
            let (_, analysis) = load(&input)?;
            let options = PatchOptions {
                policy: None,
                functions,
            };
            let mut out = String::new();
            for f in &analysis.functions {
                if !bcov::patch::plan::selected(&options, &f.function) {
                    continue;
                }
                if let Ok(a) = &f.result {
                    out += &a.cfg.to_dot();
                }
            }
            if out.is_empty() {
                return Err(CliError::Usage("no analyzed function matches".into()));
            }
            write(output.as_deref(), out.as_bytes())?;
        }
        Command::Verify(Verify::Trace {
            input,
            module,
            output,
            timeout_secs,
            args,
        }) => {
            let target = module.as_deref().unwrap_or(&input);
            let (view, analysis) = load(target)?;
            let heads = block_heads(&analysis, None);
            let options = TraceOptions {
                timeout: Duration::from_secs(timeout_secs),
                output: true,
                stdin: None,
            };
            let outcome = trace_block_heads(&input, &args, &view, &heads, &options)?;
            write(Some(&output), write_trace(&outcome.trace).as_bytes())?;
            eprintln!(
                "heads={} steps={} exit_code={}",
                outcome.trace.heads.len(),
                outcome.steps,
                outcome.exit_code
            );
        }
        Command::Verify(Verify::Compare {
            input,
            dump,
            trace,
            select,
            min_precision,
            min_recall,
        }) => {
            let (view, analysis) = load(&input)?;
            let (header, array) = load_dump(&dump)?;
            let p = plan(&view, &analysis, &select.options());
            let report = infer_coverage(&view, &analysis, &p, &header, &array)?;
            let text = String::from_utf8_lossy(&read(&trace)?).into_owned();
            let mut t = parse_trace(&input, &text)?;
            // only instrumented functions are reported
            let heads = block_heads(&analysis, Some(&p.functions));
            t.heads.retain(|a| heads.contains(a));
            let s = score(&report, &t)?;
            println!("{}", serde_json::to_string(&s).expect("serializable"));
            if s.precision < min_precision || s.recall < min_recall {
                return Err(CliError::Threshold);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
