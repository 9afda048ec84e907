//! Module-level analysis: decoding, jump tables, non-return propagation,
//! final CFGs and superblock dominator graphs.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use bcov_core::{InstKind, SuperblockGraph};
use log::{debug, warn};
use rayon::prelude::*;

use crate::cfg::{build_cfg, callee_key, may_return, CallFacts, ControlFlowGraph, ExitKind};
use crate::disasm::{decode_function, plt_names, DisasmError, Instruction};
use crate::elf::{collect_landing_pads, read_function_definitions, ElfError, ElfModuleView, FunctionDefinition};
use crate::jumptab::{self, emu::Image, Abort, JumpTable};

/// Functions that never return to their caller.
pub const NONRETURN_SEEDS: &[&str] = &[
    "abort",
    "exit",
    "_exit",
    "_Exit",
    "__stack_chk_fail",
    "__assert_fail",
    "longjmp",
    "siglongjmp",
    "__cxa_throw",
    "_Unwind_Resume",
    "pthread_exit",
    "__libc_start_main",
    "__cxa_rethrow",
    "__longjmp_chk",
    "_longjmp",
    "__fortify_fail",
    "__chk_fail",
    "quick_exit",
    "err",
    "errx",
    "verr",
    "verrx",
    "__cxa_bad_cast",
    "__cxa_bad_typeid",
    "__cxa_call_unexpected",
    "__cxa_pure_virtual",
    "_ZSt9terminatev",
];

/// Callees whose call sites may be resumed a second time.
pub const SETJMP_FAMILY: &[&str] = &["setjmp", "_setjmp", "sigsetjmp", "__sigsetjmp"];

/// Rounds of table recovery followed by CFG rebuilds.
const TABLE_ROUNDS: usize = 4;

fn base_name(name: &str) -> &str {
    name.split('@').next().unwrap_or(name)
}

pub fn is_nonreturn_seed(name: &str) -> bool {
    let n = base_name(name);
    NONRETURN_SEEDS.contains(&n) || (n.starts_with("_ZSt") && n.contains("__throw_"))
}

#[derive(Clone, Debug, Default)]
pub struct CallGraph {
    pub nodes: BTreeSet<u64>,
    /// Direct call sites as (caller start, callee key).
    pub edges: BTreeSet<(u64, u64)>,
    pub nonreturn: BTreeSet<u64>,
}

#[derive(Clone, Debug)]
pub struct Analyzed {
    pub cfg: ControlFlowGraph,
    pub sbg: SuperblockGraph,
    pub tables: BTreeMap<u64, JumpTable>,
    pub table_failures: BTreeMap<u64, Abort>,
}

#[derive(Clone, Debug)]
pub struct FunctionAnalysis {
    pub function: FunctionDefinition,
    pub result: Result<Analyzed, DisasmError>,
}

#[derive(Debug)]
pub struct ModuleAnalysis {
    pub functions: Vec<FunctionAnalysis>,
    pub callgraph: CallGraph,
    /// Callee key to symbol name (defined functions, PLT stubs, GOT slots).
    pub names: BTreeMap<u64, String>,
}

impl ModuleAnalysis {
    pub fn analyzed(&self) -> impl Iterator<Item = &Analyzed> {
        self.functions.iter().filter_map(|f| f.result.as_ref().ok())
    }

    pub fn tables(&self) -> impl Iterator<Item = &JumpTable> {
        self.analyzed().flat_map(|a| a.tables.values())
    }
}

struct Decoded {
    function: FunctionDefinition,
    insts: Result<Vec<Instruction>, DisasmError>,
}

impl Decoded {
    fn is_local(&self) -> impl Fn(u64) -> bool + '_ {
        let end = self.function.end();
        move |a| {
            a < end
                && self
                    .insts
                    .as_ref()
                    .is_ok_and(|v| v.binary_search_by_key(&a, |i| i.addr).is_ok())
        }
    }
}

pub fn analyze(view: &ElfModuleView) -> Result<ModuleAnalysis, ElfError> {
    let mut funcs = read_function_definitions(view)?;
    let starts: Vec<u64> = funcs.iter().map(|f| f.start).collect();
    let ends: Vec<u64> = funcs.iter().map(|f| f.end()).collect();
    let owner = |a: u64| -> Option<usize> {
        let k = starts.partition_point(|&s| s <= a).checked_sub(1)?;
        (a < ends[k]).then_some(k)
    };
    let mut extra: Vec<(usize, u64)> = Vec::new();
    for pads in collect_landing_pads(view).into_values() {
        for lp in pads {
            match owner(lp) {
                Some(k) => extra.push((k, lp)),
                None => warn!("landing pad {lp:#x} is outside every function"),
            }
        }
    }
    for (k, lp) in extra.drain(..) {
        funcs[k].aux_entries.insert(lp);
    }

    let text_end = view.text_range().map_or(u64::MAX, |r| r.1);
    let decode_all = |funcs: &[FunctionDefinition]| -> Vec<Decoded> {
        funcs
            .par_iter()
            .enumerate()
            .map(|(k, f)| {
                let limit = funcs.get(k + 1).map_or(text_end, |g| g.start);
                let insts = decode_function(view, f, limit);
                if let Err(e) = &insts {
                    warn!("{}: {e}", f.display_name());
                }
                Decoded { function: f.clone(), insts }
            })
            .collect()
    };
    let mut decoded = decode_all(&funcs);

    // jumps into the middle of another function make an auxiliary entry
    let mut cross = Vec::new();
    for (k, d) in decoded.iter().enumerate() {
        let Ok(insts) = &d.insts else { continue };
        for i in insts {
            if !matches!(i.kind, InstKind::JmpDirect | InstKind::CondJmp) {
                continue;
            }
            let Some(t) = i.branch_target else { continue };
            if let Some(o) = owner(t).filter(|&o| o != k && starts[o] != t) {
                cross.push((o, t));
            }
        }
    }
    for (o, t) in cross {
        if decoded[o].is_local()(t) {
            decoded[o].function.aux_entries.insert(t);
        } else {
            warn!("{}: jump target {t:#x} is not an instruction start", decoded[o].function.display_name());
        }
    }
    for (f, d) in funcs.iter_mut().zip(&decoded) {
        *f = d.function.clone();
    }

    let names = callee_names(view, &funcs);
    let by_name: BTreeMap<&str, u64> = funcs
        .iter()
        .filter_map(|f| f.name.as_deref().map(|n| (base_name(n), f.start)))
        .collect();
    // PLT stubs of functions defined in this module resolve to the definition
    let alias: BTreeMap<u64, u64> = names
        .iter()
        .filter(|(k, _)| starts.binary_search(k).is_err())
        .filter_map(|(&k, n)| by_name.get(base_name(n)).map(|&s| (k, s)))
        .collect();
    let resolve = |key: u64| alias.get(&key).copied().unwrap_or(key);
    let is_defined = |key: u64| starts.binary_search(&resolve(key)).is_ok();

    let seeds: BTreeSet<u64> = names
        .iter()
        .filter(|(_, n)| is_nonreturn_seed(n))
        .map(|(&k, _)| k)
        .collect();
    let setjmp: BTreeSet<u64> = names
        .iter()
        .filter(|(_, n)| SETJMP_FAMILY.contains(&base_name(n)))
        .map(|(&k, _)| k)
        .collect();
    let cxx = view.uses_cxx_unwinding();
    let external_escapes: BTreeSet<u64> = if cxx {
        names
            .iter()
            .filter(|(&k, n)| !is_defined(k) && base_name(n).starts_with("_Z"))
            .map(|(&k, _)| k)
            .collect()
    } else {
        BTreeSet::new()
    };

    let image = Arc::new(Image::new(view));
    let mut facts = CallFacts {
        nonreturn: seeds.clone(),
        escapes: BTreeSet::new(),
        setjmp,
        indirect_escapes: cxx,
    };

    // draft CFGs and jump tables
    let mut tables: Vec<BTreeMap<u64, JumpTable>> = vec![BTreeMap::new(); decoded.len()];
    let mut failures: Vec<BTreeMap<u64, Abort>> = vec![BTreeMap::new(); decoded.len()];
    let build_all = |tables: &[BTreeMap<u64, JumpTable>], facts: &CallFacts| -> Vec<Option<ControlFlowGraph>> {
        decoded
            .par_iter()
            .zip(tables.par_iter())
            .map(|(d, t)| d.insts.as_ref().ok().map(|insts| build_cfg(&d.function, insts, t, facts)))
            .collect()
    };
    let mut cfgs = build_all(&tables, &facts);
    for round in 0..TABLE_ROUNDS {
        let found: Vec<(BTreeMap<u64, JumpTable>, BTreeMap<u64, Abort>)> = cfgs
            .par_iter()
            .zip(decoded.par_iter())
            .zip(tables.par_iter().zip(failures.par_iter()))
            .map(|((cfg, d), (known, failed))| {
                let mut new = BTreeMap::new();
                let mut bad = BTreeMap::new();
                let Some(cfg) = cfg else { return (new, bad) };
                let pending = cfg
                    .exits
                    .values()
                    .flatten()
                    .any(|e| matches!(e, ExitKind::UnresolvedJump));
                if !pending {
                    return (new, bad);
                }
                let local = d.is_local();
                for (addr, r) in jumptab::recover_all(view, &image, cfg, &local) {
                    if known.contains_key(&addr) || failed.contains_key(&addr) {
                        continue;
                    }
                    match r {
                        Ok(t) => {
                            new.insert(addr, t);
                        }
                        Err(e) => {
                            bad.insert(addr, e);
                        }
                    }
                }
                (new, bad)
            })
            .collect();
        let mut changed = false;
        for (k, (new, bad)) in found.into_iter().enumerate() {
            changed |= !new.is_empty();
            tables[k].extend(new);
            failures[k].extend(bad);
        }
        if !changed {
            break;
        }
        debug!("jump-table round {round} found new tables");
        // a newly reachable block may hold another dispatch
        for f in &mut failures {
            f.clear();
        }
        cfgs = build_all(&tables, &facts);
    }

    // non-return: least fixed point of returning functions
    let index_of: BTreeMap<u64, usize> = starts.iter().enumerate().map(|(k, &s)| (s, k)).collect();
    let mut returning = vec![false; decoded.len()];
    loop {
        let returns = |key: Option<u64>| match key {
            None => true,
            Some(k) => match index_of.get(&resolve(k)) {
                Some(&i) => returning[i] || decoded[i].insts.is_err(),
                None => !seeds.contains(&k),
            },
        };
        let next: Vec<bool> = cfgs
            .par_iter()
            .enumerate()
            .map(|(i, c)| returning[i] || c.as_ref().is_none_or(|c| may_return(c, &returns)))
            .collect();
        if next == returning {
            break;
        }
        returning = next;
    }
    let nonreturn_fns: BTreeSet<u64> = starts
        .iter()
        .zip(&returning)
        .filter(|(_, &r)| !r)
        .map(|(&s, _)| s)
        .collect();
    facts.nonreturn.extend(nonreturn_fns.iter().copied());
    facts
        .nonreturn
        .extend(alias.iter().filter(|(_, s)| nonreturn_fns.contains(s)).map(|(&k, _)| k));

    // may-escape: functions that can leave without returning normally
    facts.escapes = external_escapes;
    loop {
        cfgs = build_all(&tables, &facts);
        let mut escapes = facts.escapes.clone();
        for (i, c) in cfgs.iter().enumerate() {
            let Some(c) = c else { continue };
            let esc = c.exits.values().flatten().any(|e| match *e {
                ExitKind::NoReturnCall(_) | ExitKind::Escape(_) | ExitKind::Halt => true,
                ExitKind::TailCall(Some(k)) => facts.escapes.contains(&k) || facts.nonreturn.contains(&k),
                _ => false,
            });
            if esc && !facts.nonreturn.contains(&starts[i]) {
                escapes.insert(starts[i]);
                escapes.extend(alias.iter().filter(|(_, &s)| s == starts[i]).map(|(&k, _)| k));
            }
        }
        if escapes == facts.escapes {
            break;
        }
        facts.escapes = escapes;
    }

    let mut callgraph = CallGraph {
        nodes: starts.iter().copied().collect(),
        edges: BTreeSet::new(),
        nonreturn: facts.nonreturn.clone(),
    };
    for (d, c) in decoded.iter().zip(&cfgs) {
        let Some(c) = c else { continue };
        for b in &c.blocks {
            let last = b.last();
            if last.kind == InstKind::CallDirect {
                if let Some(k) = callee_key(last) {
                    callgraph.edges.insert((d.function.start, resolve(k)));
                }
            }
        }
    }

    let functions = decoded
        .into_par_iter()
        .zip(cfgs.into_par_iter())
        .zip(tables.into_par_iter().zip(failures.into_par_iter()))
        .map(|((d, cfg), (tables, table_failures))| {
            let result = match (d.insts, cfg) {
                (Err(e), _) => Err(e),
                (Ok(_), Some(cfg)) => {
                    let sbg = SuperblockGraph::build(&cfg.flow);
                    Ok(Analyzed { cfg, sbg, tables, table_failures })
                }
                (Ok(_), None) => unreachable!("decoded functions have CFGs"),
            };
            FunctionAnalysis { function: d.function, result }
        })
        .collect();
    Ok(ModuleAnalysis { functions, callgraph, names })
}

/// Names for every callee key: defined functions, PLT stubs and GOT slots.
fn callee_names(view: &ElfModuleView, funcs: &[FunctionDefinition]) -> BTreeMap<u64, String> {
    let mut names: BTreeMap<u64, String> = view.got_imports();
    names.extend(plt_names(view));
    for f in funcs {
        if let Some(n) = &f.name {
            names.insert(f.start, n.clone());
        }
    }
    names
}
