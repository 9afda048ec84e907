//! Per-function control-flow graphs with virtual entry and exit nodes.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as _;

use bcov_core::probe::{classify, BlockShape};
use bcov_core::{Digraph, FlowGraph, InstKind, ProbeType};
use log::warn;
use serde::Serialize;

use crate::disasm::Instruction;
use crate::elf::FunctionDefinition;
use crate::jumptab::JumpTable;

#[derive(Clone, Debug)]
pub struct BasicBlock {
    pub addr: u64,
    pub byte_size: u32,
    pub padding: u32,
    pub insts: Vec<Instruction>,
    pub probe_type: ProbeType,
    /// Every way into the block is an entry of a patchable jump table.
    pub jump_table_target: bool,
}

impl BasicBlock {
    pub fn end(&self) -> u64 {
        self.addr + u64::from(self.byte_size)
    }

    pub fn last(&self) -> &Instruction {
        self.insts.last().expect("blocks are non-empty")
    }

    pub fn sizes(&self) -> Vec<u32> {
        self.insts.iter().map(|i| i.size).collect()
    }

    pub fn contains(&self, addr: u64) -> bool {
        addr >= self.addr && addr < self.end()
    }

    /// The last instruction's kind and size when it ends the block by
    /// transferring control.
    pub fn terminator(&self) -> Option<(InstKind, u32)> {
        let last = self.last();
        (last.kind != InstKind::Other).then_some((last.kind, last.size))
    }

    pub fn shape(&self) -> BlockShape {
        BlockShape {
            byte_size: self.byte_size,
            padding: self.padding,
            terminator: self.terminator(),
            jump_table_target: self.jump_table_target,
        }
    }
}

/// Why control leaves the function from a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum ExitKind {
    Return,
    /// Direct jump (or `jmp [rip+slot]`) leaving the function; holds the
    /// callee key.
    TailCall(Option<u64>),
    /// Indirect jump without a recovered table.
    UnresolvedJump,
    NoReturnCall(Option<u64>),
    /// A call that may leave abnormally (longjmp, throw, exit on some path);
    /// the fallthrough edge is kept as well.
    Escape(Option<u64>),
    Halt,
    /// Execution runs past the end of the function body.
    FallOff,
}

/// What the CFG builder needs to know about callees. Callees are keyed by
/// their direct target, or by the GOT slot for `call [rip+slot]`.
#[derive(Clone, Debug, Default)]
pub struct CallFacts {
    pub nonreturn: BTreeSet<u64>,
    pub escapes: BTreeSet<u64>,
    pub setjmp: BTreeSet<u64>,
    /// Indirect calls may leave abnormally (module takes part in C++
    /// unwinding).
    pub indirect_escapes: bool,
}

impl CallFacts {
    fn escapes(&self, key: Option<u64>) -> bool {
        match key {
            Some(k) => self.escapes.contains(&k),
            None => self.indirect_escapes,
        }
    }
}

/// Key identifying the callee of a call or tail jump.
pub fn callee_key(inst: &Instruction) -> Option<u64> {
    inst.branch_target.or_else(|| inst.rip_target())
}

#[derive(Clone, Debug)]
pub struct ControlFlowGraph {
    pub function: FunctionDefinition,
    /// Reachable blocks sorted by address; node `i` of `flow` is `blocks[i]`.
    pub blocks: Vec<BasicBlock>,
    pub flow: FlowGraph,
    pub exits: BTreeMap<usize, Vec<ExitKind>>,
    /// Blocks with an edge from the virtual entry.
    pub entries: BTreeSet<usize>,
    /// Blocks not reachable from any entry; kept out of the graph.
    pub unreachable: Vec<BasicBlock>,
    /// Blocks that cannot reach an exit and were linked to EX.
    pub dead_ends: Vec<usize>,
}

impl ControlFlowGraph {
    pub fn en(&self) -> usize {
        self.flow.entry
    }

    pub fn ex(&self) -> usize {
        self.flow.exit
    }

    pub fn block_at(&self, addr: u64) -> Option<usize> {
        self.blocks.binary_search_by_key(&addr, |b| b.addr).ok()
    }

    pub fn block_containing(&self, addr: u64) -> Option<usize> {
        let i = self.blocks.partition_point(|b| b.addr <= addr);
        (i > 0 && self.blocks[i - 1].contains(addr)).then(|| i - 1)
    }

    pub fn succs(&self, b: usize) -> &[usize] {
        self.flow.graph.succs(b)
    }

    pub fn preds(&self, b: usize) -> &[usize] {
        self.flow.graph.preds(b)
    }

    /// Addresses of blocks that end in an indirect jmp without a table.
    pub fn unresolved_jumps(&self) -> Vec<u64> {
        self.exits
            .iter()
            .filter(|(_, k)| k.contains(&ExitKind::UnresolvedJump))
            .map(|(&b, _)| self.blocks[b].last().addr)
            .collect()
    }

    pub fn exit_addrs(&self) -> BTreeSet<u64> {
        self.exits.keys().map(|&b| self.blocks[b].addr).collect()
    }

    /// DOT rendering; block labels carry address, size, padding and type.
    pub fn to_dot(&self) -> String {
        let mut s = String::new();
        let name = self.function.display_name();
        let _ = writeln!(s, "digraph \"{name}\" {{");
        let _ = writeln!(s, "  node [shape=box fontname=monospace];");
        let _ = writeln!(s, "  EN [shape=circle];\n  EX [shape=circle];");
        let label = |n: usize| -> String {
            if n == self.en() {
                "EN".into()
            } else if n == self.ex() {
                "EX".into()
            } else {
                format!("b_{:x}", self.blocks[n].addr)
            }
        };
        for b in &self.blocks {
            let _ = writeln!(
                s,
                "  b_{:x} [label=\"{:#x}\\ns={} p={}\\n{}\"];",
                b.addr,
                b.addr,
                b.byte_size,
                b.padding,
                b.probe_type.as_str()
            );
        }
        for (a, b) in self.flow.graph.edges() {
            let _ = writeln!(s, "  {} -> {};", label(a), label(b));
        }
        s.push_str("}\n");
        s
    }
}

/// Builds the CFG of `f` from its decoded instructions.
///
/// `tables` maps indirect-jmp addresses to recovered tables. Branch targets
/// outside `f` are tail calls.
pub fn build_cfg(
    f: &FunctionDefinition,
    insts: &[Instruction],
    tables: &BTreeMap<u64, JumpTable>,
    facts: &CallFacts,
) -> ControlFlowGraph {
    let body_end = f.end();
    let starts: BTreeSet<u64> = insts.iter().filter(|i| i.addr < body_end).map(|i| i.addr).collect();
    let local = |a: u64| starts.contains(&a);

    // leaders that must start a block even inside a padding run
    let mut targets: BTreeSet<u64> = BTreeSet::new();
    targets.insert(f.start);
    for &a in &f.aux_entries {
        if local(a) {
            targets.insert(a);
        } else {
            warn!("{}: entry {a:#x} is not an instruction boundary", f.display_name());
        }
    }
    for i in insts {
        if matches!(i.kind, InstKind::CondJmp | InstKind::JmpDirect) {
            if let Some(t) = i.branch_target.filter(|&t| local(t)) {
                targets.insert(t);
            }
        }
        if let Some(t) = tables.get(&i.addr) {
            targets.extend(t.targets.iter().copied().filter(|&a| local(a)));
        }
    }

    // form blocks
    let mut blocks: Vec<BasicBlock> = Vec::new();
    let mut current: Vec<Instruction> = Vec::new();
    let mut padding_mode = false;
    let mut split_next = true;
    let flush = |cur: &mut Vec<Instruction>, blocks: &mut Vec<BasicBlock>| {
        if !cur.is_empty() {
            let insts = std::mem::take(cur);
            let addr = insts[0].addr;
            let byte_size = insts.iter().map(|i| i.size).sum();
            blocks.push(BasicBlock {
                addr,
                byte_size,
                padding: 0,
                insts,
                probe_type: ProbeType::Internal,
                jump_table_target: false,
            });
        }
    };
    for i in insts {
        let target = targets.contains(&i.addr);
        if padding_mode && crate::disasm::is_padding(&i.decoded) && !target {
            if let Some(b) = blocks.last_mut() {
                if b.end() + u64::from(b.padding) == i.addr {
                    b.padding += i.size;
                }
            }
            continue;
        }
        padding_mode = false;
        if i.addr >= body_end {
            break;
        }
        if target || split_next {
            flush(&mut current, &mut blocks);
        }
        split_next = i.is_terminator();
        if split_next {
            padding_mode = i.is_barrier();
        }
        current.push(i.clone());
        if split_next {
            flush(&mut current, &mut blocks);
        }
    }
    flush(&mut current, &mut blocks);

    let index: BTreeMap<u64, usize> = blocks.iter().enumerate().map(|(k, b)| (b.addr, k)).collect();
    let n = blocks.len();
    let (en, ex) = (n, n + 1);
    let mut graph = Digraph::new(n + 2);
    let mut exits: BTreeMap<usize, Vec<ExitKind>> = BTreeMap::new();
    let mut entry_addrs: BTreeSet<u64> = targets
        .iter()
        .copied()
        .filter(|a| *a == f.start || f.aux_entries.contains(a))
        .collect();
    let add_exit = |exits: &mut BTreeMap<usize, Vec<ExitKind>>, b: usize, k: ExitKind| {
        exits.entry(b).or_default().push(k);
    };

    for (k, b) in blocks.iter().enumerate() {
        let last = b.last();
        let next = index.get(&b.end()).copied();
        let fall = |graph: &mut Digraph, exits: &mut BTreeMap<usize, Vec<ExitKind>>| match next {
            Some(nb) => {
                graph.add_edge(k, nb);
            }
            None => exits.entry(k).or_default().push(ExitKind::FallOff),
        };
        if last.is_halt() {
            add_exit(&mut exits, k, ExitKind::Halt);
            continue;
        }
        match last.kind {
            InstKind::Ret => add_exit(&mut exits, k, ExitKind::Return),
            InstKind::CondJmp => {
                let t = last.branch_target.expect("direct");
                match index.get(&t) {
                    Some(&tb) => {
                        graph.add_edge(k, tb);
                    }
                    None => add_exit(&mut exits, k, ExitKind::TailCall(Some(t))),
                }
                fall(&mut graph, &mut exits);
            }
            InstKind::JmpDirect => {
                let t = last.branch_target.expect("direct");
                match index.get(&t) {
                    Some(&tb) => {
                        graph.add_edge(k, tb);
                    }
                    None => add_exit(&mut exits, k, ExitKind::TailCall(Some(t))),
                }
            }
            InstKind::JmpIndirect => match tables.get(&last.addr) {
                Some(t) => {
                    for a in &t.targets {
                        match index.get(a) {
                            Some(&tb) => {
                                graph.add_edge(k, tb);
                            }
                            None => warn!("table target {a:#x} is not a block start"),
                        }
                    }
                }
                None if last.rip_relative => add_exit(&mut exits, k, ExitKind::TailCall(last.rip_target())),
                None => add_exit(&mut exits, k, ExitKind::UnresolvedJump),
            },
            InstKind::CallDirect | InstKind::CallIndirect => {
                let key = callee_key(last);
                if key.is_some_and(|c| facts.nonreturn.contains(&c)) {
                    add_exit(&mut exits, k, ExitKind::NoReturnCall(key));
                    continue;
                }
                fall(&mut graph, &mut exits);
                if facts.escapes(key) {
                    add_exit(&mut exits, k, ExitKind::Escape(key));
                }
                if key.is_some_and(|c| facts.setjmp.contains(&c)) && next.is_some() {
                    entry_addrs.insert(b.end());
                }
            }
            InstKind::Other => fall(&mut graph, &mut exits),
        }
    }

    let mut entries = BTreeSet::new();
    for a in &entry_addrs {
        if let Some(&b) = index.get(a) {
            graph.add_edge(en, b);
            entries.insert(b);
        }
    }
    for &b in exits.keys() {
        graph.add_edge(b, ex);
    }

    // drop blocks unreachable from EN
    let reach = graph.reachable_from(en);
    let keep: Vec<usize> = (0..n).filter(|&b| reach[b]).collect();
    let mut unreachable = Vec::new();
    let mut remap = vec![usize::MAX; n + 2];
    for (new, &old) in keep.iter().enumerate() {
        remap[old] = new;
    }
    let m = keep.len();
    remap[en] = m;
    remap[ex] = m + 1;
    let mut kept_blocks = Vec::with_capacity(m);
    for (k, b) in blocks.into_iter().enumerate() {
        if reach[k] {
            kept_blocks.push(b);
        } else {
            unreachable.push(b);
        }
    }
    if !unreachable.is_empty() {
        log::debug!("{}: {} unreachable blocks removed", f.display_name(), unreachable.len());
    }
    let mut g = Digraph::new(m + 2);
    for (a, b) in graph.edges() {
        if remap[a] != usize::MAX && remap[b] != usize::MAX {
            g.add_edge(remap[a], remap[b]);
        }
    }
    let exits: BTreeMap<usize, Vec<ExitKind>> = exits
        .into_iter()
        .filter(|(b, _)| remap[*b] != usize::MAX)
        .map(|(b, k)| (remap[b], k))
        .collect();
    let entries: BTreeSet<usize> = entries.into_iter().map(|b| remap[b]).collect();
    let mut flow = FlowGraph::new(g, m, m + 1);
    let dead_ends = flow.connect_dead_ends();

    let mut blocks = kept_blocks;
    // jump-tab marking: every predecessor is a patchable table dispatch
    let dispatch: BTreeMap<usize, &JumpTable> = blocks
        .iter()
        .enumerate()
        .filter_map(|(k, b)| tables.get(&b.last().addr).filter(|t| t.patchable).map(|t| (k, t)))
        .collect();
    for k in 0..m {
        let preds = flow.graph.preds(k);
        blocks[k].jump_table_target = !entries.contains(&k)
            && !preds.is_empty()
            && preds.iter().all(|p| {
                dispatch
                    .get(p)
                    .is_some_and(|t| t.targets.contains(&blocks[k].addr))
            });
    }
    for b in &mut blocks {
        b.probe_type = classify(&b.shape());
    }

    ControlFlowGraph {
        function: f.clone(),
        blocks,
        flow,
        exits,
        entries,
        unreachable,
        dead_ends,
    }
}

/// Whether some exit reachable from the entries lets control return to the
/// caller, given which callees return. Calls fall through only when
/// `returns(callee)` holds.
pub fn may_return(cfg: &ControlFlowGraph, returns: &dyn Fn(Option<u64>) -> bool) -> bool {
    let mut seen = vec![false; cfg.blocks.len()];
    let mut queue: VecDeque<usize> = cfg.entries.iter().copied().collect();
    for &e in &cfg.entries {
        seen[e] = true;
    }
    while let Some(b) = queue.pop_front() {
        let block = &cfg.blocks[b];
        let last = block.last();
        let mut follow = true;
        if last.kind.is_call() && !returns(callee_key(last)) {
            follow = false;
        }
        if let Some(kinds) = cfg.exits.get(&b) {
            for k in kinds {
                let ret = match *k {
                    ExitKind::Return | ExitKind::UnresolvedJump | ExitKind::FallOff => true,
                    ExitKind::TailCall(key) => returns(key),
                    ExitKind::Escape(_) | ExitKind::NoReturnCall(_) | ExitKind::Halt => false,
                };
                if ret && !(matches!(k, ExitKind::FallOff) && !follow) {
                    return true;
                }
            }
        }
        if !follow {
            continue;
        }
        for &s in cfg.succs(b) {
            if s < cfg.blocks.len() && !seen[s] {
                seen[s] = true;
                queue.push_back(s);
            }
        }
    }
    false
}
