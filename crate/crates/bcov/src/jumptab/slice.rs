//! Backward slicing of an indirect jmp over its dominator chain.
//!
//! The chain (blocks from the function entry down to the jmp block along
//! immediate pre-dominators) is walked forward once to build a value graph:
//! one node per (instruction, written location), plus input nodes for
//! locations read before any definition or clobbered by blocks that sit
//! between two chain blocks. The backward slice of the jmp is the ancestor
//! closure of its target node.

use std::collections::{BTreeMap, BTreeSet};

use bcov_core::{DominatorTree, InstKind};
use iced_x86::{InstructionInfoFactory, Mnemonic, OpAccess, OpKind, Register};

use crate::cfg::ControlFlowGraph;
use crate::disasm::Instruction;
use crate::elf::ElfModuleView;

pub type NodeId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Loc {
    Reg(Register),
    /// Stack slot at this offset from the stack pointer at chain start.
    Stack(i64),
    Flags,
    /// The jmp target.
    Pc,
}

/// Non-stack memory read feeding a node.
#[derive(Clone, Copy, Debug)]
pub struct LoadInfo {
    pub base: Option<NodeId>,
    pub index: Option<NodeId>,
    pub disp: u64,
    /// Address known without register values (rip-relative or absolute).
    pub static_addr: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct Node {
    pub loc: Loc,
    /// Chain position of the defining instruction; `None` for inputs.
    pub pos: Option<usize>,
    /// For inputs: chain position before which the value appears.
    pub input_at: usize,
    pub deps: Vec<NodeId>,
    pub load: Option<LoadInfo>,
    pub copy_of: Option<NodeId>,
    /// Bytes written (stack slots) or register width.
    pub width: u32,
}

/// A `cmp loc, imm` found on the chain.
#[derive(Clone, Copy, Debug)]
pub struct Compare {
    pub operand: NodeId,
    pub bits: u32,
    pub imm: u64,
}

#[derive(Debug)]
pub struct ValueGraph<'a> {
    pub chain: Vec<&'a Instruction>,
    pub chain_blocks: Vec<usize>,
    pub nodes: Vec<Node>,
    /// Node of the jmp target.
    pub target: NodeId,
    /// Flags node live at each conditional jmp, by position.
    pub flags_at: BTreeMap<usize, NodeId>,
    pub compares: BTreeMap<usize, Compare>,
}

const CALLER_SAVED: [Register; 9] = [
    Register::RAX,
    Register::RCX,
    Register::RDX,
    Register::RSI,
    Register::RDI,
    Register::R8,
    Register::R9,
    Register::R10,
    Register::R11,
];

fn tracked(r: Register) -> Option<Register> {
    if r == Register::None || r == Register::RIP {
        return None;
    }
    let full = r.full_register();
    (full.is_gpr64()).then_some(full)
}

fn reads(a: OpAccess) -> bool {
    matches!(a, OpAccess::Read | OpAccess::CondRead | OpAccess::ReadWrite | OpAccess::ReadCondWrite)
}

fn writes(a: OpAccess) -> bool {
    matches!(a, OpAccess::Write | OpAccess::CondWrite | OpAccess::ReadWrite | OpAccess::ReadCondWrite)
}

/// Blocks between `upper` (a chain block) and `lower` (the next chain
/// block) whose writes may reach `lower`'s entry without passing `upper`'s
/// last instance. Includes `upper` itself when it sits on a cycle reaching
/// `lower`.
fn region(cfg: &ControlFlowGraph, upper: usize, lower: usize) -> Vec<usize> {
    let n = cfg.blocks.len();
    let walk = |start: &[usize], next: &dyn Fn(usize) -> Vec<usize>| {
        let mut seen = vec![false; n + 2];
        let mut stack: Vec<usize> = start.iter().copied().filter(|&s| s < n && s != lower).collect();
        while let Some(x) = stack.pop() {
            if seen[x] {
                continue;
            }
            seen[x] = true;
            for y in next(x) {
                if y < n && y != lower && !seen[y] {
                    stack.push(y);
                }
            }
        }
        seen
    };
    let fwd = walk(cfg.succs(upper), &|x| cfg.succs(x).to_vec());
    let bwd = walk(cfg.preds(lower), &|x| cfg.preds(x).to_vec());
    (0..n).filter(|&x| fwd[x] && bwd[x]).collect()
}

struct Builder {
    nodes: Vec<Node>,
    map: BTreeMap<Loc, NodeId>,
    killed_at: BTreeMap<Loc, usize>,
    stack_killed_at: usize,
    rsp_off: Option<i64>,
    rbp_off: Option<i64>,
}

impl Builder {
    fn input(&mut self, loc: Loc, at: usize, width: u32) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node {
            loc,
            pos: None,
            input_at: at,
            deps: Vec::new(),
            load: None,
            copy_of: None,
            width,
        });
        self.map.insert(loc, id);
        id
    }

    fn get(&mut self, loc: Loc) -> NodeId {
        if let Some(&id) = self.map.get(&loc) {
            return id;
        }
        let at = match loc {
            Loc::Stack(_) => self.stack_killed_at,
            _ => self.killed_at.get(&loc).copied().unwrap_or(0),
        };
        self.input(loc, at, 8)
    }

    fn kill(&mut self, loc: Loc, at: usize) {
        self.map.remove(&loc);
        self.killed_at.insert(loc, at);
    }

    fn kill_stack(&mut self, at: usize) {
        self.map.retain(|l, _| !matches!(l, Loc::Stack(_)));
        self.stack_killed_at = at;
    }

    fn stack_loc(&self, base: Register, index: Register, disp: u64) -> Option<i64> {
        if index != Register::None {
            return None;
        }
        match base {
            Register::RSP => self.rsp_off.map(|o| o + disp as i64),
            Register::RBP => self.rbp_off.map(|o| o + disp as i64),
            _ => None,
        }
    }

    fn def(&mut self, loc: Loc, pos: usize, deps: Vec<NodeId>, load: Option<LoadInfo>, width: u32) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node {
            loc,
            pos: Some(pos),
            input_at: pos,
            deps,
            load,
            copy_of: None,
            width,
        });
        id
    }
}

/// Locations an instruction may write, for clobber sets of side regions.
fn clobbers(inst: &Instruction, factory: &mut InstructionInfoFactory) -> (Vec<Register>, bool, bool) {
    if inst.kind.is_call() {
        return (CALLER_SAVED.to_vec(), true, false);
    }
    let info = factory.info(&inst.decoded);
    let regs = info
        .used_registers()
        .iter()
        .filter(|u| writes(u.access()))
        .filter_map(|u| tracked(u.register()))
        .filter(|&r| r != Register::RSP)
        .collect();
    let stack = info.used_memory().iter().any(|m| {
        writes(m.access()) && matches!(m.base(), Register::RSP | Register::RBP)
    });
    (regs, inst.decoded.rflags_modified() != 0, stack)
}

/// Builds the value graph for the indirect jmp ending block `b0`.
pub fn build<'a>(
    cfg: &'a ControlFlowGraph,
    dom: &DominatorTree,
    b0: usize,
) -> ValueGraph<'a> {
    let mut chain_blocks = vec![b0];
    let mut cur = b0;
    while let Some(p) = dom.idom(cur) {
        if p >= cfg.blocks.len() {
            break;
        }
        chain_blocks.push(p);
        cur = p;
    }
    chain_blocks.reverse();

    let mut factory = InstructionInfoFactory::new();
    let mut chain: Vec<&Instruction> = Vec::new();
    let mut b = Builder {
        nodes: Vec::new(),
        map: BTreeMap::new(),
        killed_at: BTreeMap::new(),
        stack_killed_at: 0,
        rsp_off: Some(0),
        rbp_off: None,
    };
    let mut flags_at = BTreeMap::new();
    let mut compares = BTreeMap::new();
    let mut target = None;

    for (k, &blk) in chain_blocks.iter().enumerate() {
        let pos0 = chain.len();
        if k > 0 {
            let mut regs = BTreeSet::new();
            let mut flags = false;
            let mut stack = false;
            for x in region(cfg, chain_blocks[k - 1], blk) {
                for inst in &cfg.blocks[x].insts {
                    let (r, f, s) = clobbers(inst, &mut factory);
                    regs.extend(r);
                    flags |= f;
                    stack |= s;
                }
            }
            for r in regs {
                b.kill(Loc::Reg(r), pos0);
            }
            if flags {
                b.kill(Loc::Flags, pos0);
            }
            if stack {
                b.kill_stack(pos0);
            }
        }
        for inst in &cfg.blocks[blk].insts {
            let pos = chain.len();
            chain.push(inst);
            if inst.kind == InstKind::CondJmp {
                let f = b.get(Loc::Flags);
                flags_at.insert(pos, f);
                continue;
            }
            if inst.kind.is_call() {
                for r in CALLER_SAVED {
                    b.kill(Loc::Reg(r), pos + 1);
                }
                b.kill(Loc::Flags, pos + 1);
                continue;
            }
            let is_jmp = inst.kind == InstKind::JmpIndirect && blk == b0;
            let id = step(&mut b, &mut factory, inst, pos, is_jmp, &mut compares);
            if is_jmp {
                target = id;
            }
        }
    }

    ValueGraph {
        chain,
        chain_blocks,
        target: target.expect("jmp block ends in an indirect jmp"),
        nodes: b.nodes,
        flags_at,
        compares,
    }
}

fn step(
    b: &mut Builder,
    factory: &mut InstructionInfoFactory,
    inst: &Instruction,
    pos: usize,
    is_jmp: bool,
    compares: &mut BTreeMap<usize, Compare>,
) -> Option<NodeId> {
    let d = &inst.decoded;
    let info = factory.info(d);
    let used_regs: Vec<_> = info.used_registers().to_vec();
    let used_mem: Vec<_> = info.used_memory().to_vec();

    let mut addr_regs: BTreeSet<Register> = BTreeSet::new();
    let mut stack_reads: Vec<(i64, u32)> = Vec::new();
    let mut stack_writes: Vec<(i64, u32)> = Vec::new();
    let mut mem_read = None;
    let mut unknown_store = false;
    for m in &used_mem {
        if m.access() == OpAccess::NoMemAccess {
            continue;
        }
        for r in [m.base(), m.index()] {
            if let Some(t) = tracked(r) {
                addr_regs.insert(t);
            }
        }
        let size = m.memory_size().size() as u32;
        let stack = b.stack_loc(m.base(), m.index(), m.displacement());
        match stack {
            Some(off) => {
                if reads(m.access()) {
                    stack_reads.push((off, size));
                }
                if writes(m.access()) {
                    stack_writes.push((off, size));
                }
            }
            None => {
                if reads(m.access()) {
                    mem_read = Some(*m);
                }
                if writes(m.access()) && matches!(m.base(), Register::RSP | Register::RBP) {
                    unknown_store = true;
                }
            }
        }
    }
    if unknown_store {
        b.kill_stack(pos + 1);
    }

    let mut read_regs: BTreeSet<Register> = BTreeSet::new();
    let mut write_regs: Vec<(Register, u32)> = Vec::new();
    let lea = d.mnemonic() == Mnemonic::Lea;
    for u in &used_regs {
        let Some(full) = tracked(u.register()) else { continue };
        if reads(u.access()) && (lea || !addr_regs.contains(&full) || is_value_operand(d, full)) {
            read_regs.insert(full);
        }
        if writes(u.access()) {
            let size = u.register().size() as u32;
            if size < 4 {
                read_regs.insert(full);
            }
            write_regs.push((full, size.max(1) * 8));
        }
    }

    let rsp_before = b.rsp_off;
    let rbp_before = b.rbp_off;
    let mut value_deps: Vec<NodeId> = read_regs
        .iter()
        .filter(|&&r| r != Register::RSP || !write_regs.iter().any(|(w, _)| *w == Register::RSP))
        .map(|&r| b.get(Loc::Reg(r)))
        .collect();
    if d.rflags_read() != 0 {
        value_deps.push(b.get(Loc::Flags));
    }
    for &(off, _) in &stack_reads {
        value_deps.push(b.get(Loc::Stack(off)));
    }
    let addr_deps: Vec<NodeId> = addr_regs.iter().map(|&r| b.get(Loc::Reg(r))).collect();
    let load = mem_read.map(|m| {
        let node_of = |b: &mut Builder, r: Register| tracked(r).map(|t| b.get(Loc::Reg(t)));
        let static_addr = if d.is_ip_rel_memory_operand() {
            Some(d.ip_rel_memory_address())
        } else if m.base() == Register::None && m.index() == Register::None {
            Some(m.displacement())
        } else {
            None
        };
        LoadInfo {
            base: node_of(b, m.base()),
            index: node_of(b, m.index()),
            disp: if d.is_ip_rel_memory_operand() { d.ip_rel_memory_address() } else { m.displacement() },
            static_addr,
        }
    });
    let mut all_deps = value_deps.clone();
    all_deps.extend(addr_deps.iter().copied());
    all_deps.sort_unstable();
    all_deps.dedup();

    if d.mnemonic() == Mnemonic::Cmp && d.op_count() == 2 && is_imm(d.op1_kind()) {
        let operand = match d.op0_kind() {
            OpKind::Register => tracked(d.op0_register()).map(|r| b.get(Loc::Reg(r))),
            OpKind::Memory => stack_reads.first().map(|&(off, _)| b.get(Loc::Stack(off))),
            _ => None,
        };
        if let Some(operand) = operand {
            let bits = match d.op0_kind() {
                OpKind::Register => d.op0_register().size() as u32 * 8,
                _ => d.memory_size().size() as u32 * 8,
            };
            let imm = d.immediate(1) & if bits >= 64 { u64::MAX } else { (1u64 << bits) - 1 };
            compares.insert(pos, Compare { operand, bits, imm });
        }
    }

    if is_jmp {
        let id = b.def(Loc::Pc, pos, all_deps, load, 64);
        return Some(id);
    }

    // copies keep value identity (same width, 32 or 64 bits)
    let copy_src = if d.mnemonic() == Mnemonic::Mov && d.op_count() == 2 {
        let width_ok = match (d.op0_kind(), d.op1_kind()) {
            (OpKind::Register, OpKind::Register) => d.op0_register().size() == d.op1_register().size(),
            (OpKind::Register, OpKind::Memory) | (OpKind::Memory, OpKind::Register) => mem_read.is_none(),
            _ => false,
        };
        let bits = match d.op0_kind() {
            OpKind::Register => d.op0_register().size() * 8,
            _ => d.memory_size().size() * 8,
        };
        (width_ok && bits >= 32).then(|| value_deps.first().copied()).flatten()
    } else {
        None
    };

    for &(r, bits) in &write_regs {
        let id = if r == Register::RSP {
            let mut deps = vec![b.get(Loc::Reg(Register::RSP))];
            if read_regs.contains(&Register::RBP) {
                deps.push(b.get(Loc::Reg(Register::RBP)));
            }
            b.def(Loc::Reg(r), pos, deps, None, 64)
        } else {
            b.def(Loc::Reg(r), pos, all_deps.clone(), load, bits)
        };
        if r != Register::RSP {
            b.nodes[id].copy_of = copy_src.map(|s| root(&b.nodes, s));
        }
        b.map.insert(Loc::Reg(r), id);
    }
    for &(off, size) in &stack_writes {
        let id = b.def(Loc::Stack(off), pos, all_deps.clone(), None, size);
        b.nodes[id].copy_of = copy_src.map(|s| root(&b.nodes, s));
        b.map.insert(Loc::Stack(off), id);
    }
    if d.rflags_modified() != 0 {
        let id = b.def(Loc::Flags, pos, all_deps.clone(), load, 64);
        b.map.insert(Loc::Flags, id);
    }

    // frame tracking
    if write_regs.iter().any(|(r, _)| *r == Register::RSP) {
        b.rsp_off = match d.mnemonic() {
            Mnemonic::Push => rsp_before.map(|o| o - 8),
            Mnemonic::Pop => rsp_before.map(|o| o + 8),
            Mnemonic::Sub if is_imm(d.op1_kind()) => rsp_before.map(|o| o - d.immediate(1) as i64),
            Mnemonic::Add if is_imm(d.op1_kind()) => rsp_before.map(|o| o + d.immediate(1) as i64),
            Mnemonic::Lea if d.memory_base() == Register::RSP && d.memory_index() == Register::None => {
                rsp_before.map(|o| o + d.memory_displacement64() as i64)
            }
            Mnemonic::Mov if d.op1_kind() == OpKind::Register && d.op1_register() == Register::RBP => rbp_before,
            Mnemonic::Leave => rbp_before.map(|o| o + 8),
            _ => None,
        };
    }
    if write_regs.iter().any(|(r, _)| *r == Register::RBP) {
        b.rbp_off = match d.mnemonic() {
            Mnemonic::Mov if d.op1_kind() == OpKind::Register && d.op1_register() == Register::RSP => rsp_before,
            Mnemonic::Lea if d.memory_base() == Register::RSP && d.memory_index() == Register::None => {
                rsp_before.map(|o| o + d.memory_displacement64() as i64)
            }
            _ => None,
        };
    }
    None
}

fn is_imm(k: OpKind) -> bool {
    matches!(
        k,
        OpKind::Immediate8
            | OpKind::Immediate16
            | OpKind::Immediate32
            | OpKind::Immediate64
            | OpKind::Immediate8to16
            | OpKind::Immediate8to32
            | OpKind::Immediate8to64
            | OpKind::Immediate32to64
    )
}

/// Whether `reg` is used as a plain (non-address) operand.
fn is_value_operand(d: &iced_x86::Instruction, reg: Register) -> bool {
    (0..d.op_count()).any(|i| d.op_kind(i) == OpKind::Register && d.op_register(i).full_register() == reg)
}

pub fn root(nodes: &[Node], mut n: NodeId) -> NodeId {
    while let Some(c) = nodes[n].copy_of {
        if c == n {
            break;
        }
        n = c;
    }
    n
}

impl ValueGraph<'_> {
    /// Variable sources `n` depends on. Nodes in `pinned` count as constant.
    pub fn vars(&self, view: &ElfModuleView, pinned: &BTreeSet<NodeId>) -> Vec<BTreeSet<NodeId>> {
        let mut out: Vec<BTreeSet<NodeId>> = vec![BTreeSet::new(); self.nodes.len()];
        for (id, node) in self.nodes.iter().enumerate() {
            if pinned.contains(&id) || pinned.contains(&root(&self.nodes, id)) {
                continue;
            }
            if node.pos.is_none() {
                if node.loc != Loc::Reg(Register::RSP) {
                    out[id].insert(id);
                }
                continue;
            }
            let mut acc = BTreeSet::new();
            let addr: Vec<NodeId> = node
                .load
                .map(|l| l.base.into_iter().chain(l.index).collect())
                .unwrap_or_default();
            for &dep in &node.deps {
                if !addr.contains(&dep) {
                    acc.extend(out[dep].iter().copied());
                }
            }
            if let Some(l) = node.load {
                let base_vars = l.base.map(|x| out[x].clone()).unwrap_or_default();
                let index_vars = l.index.map(|x| out[x].clone()).unwrap_or_default();
                let var_part = !base_vars.is_empty() || !index_vars.is_empty();
                if !var_part {
                    let writable = l.static_addr.is_some_and(|a| !view.is_read_only(a));
                    if writable {
                        acc.insert(id);
                    }
                } else if self.has_const_base(view, &l, &out) {
                    acc.extend(base_vars);
                    acc.extend(index_vars);
                } else {
                    acc.insert(id);
                }
            }
            out[id] = acc;
        }
        out
    }

    /// A table read: the address mixes a variable part with a constant
    /// register or an in-image displacement.
    pub fn has_const_base(&self, view: &ElfModuleView, l: &LoadInfo, vars: &[BTreeSet<NodeId>]) -> bool {
        let const_reg = |x: Option<NodeId>| x.is_some_and(|x| vars[x].is_empty());
        const_reg(l.base) || const_reg(l.index) || view.in_section(l.disp)
    }

    /// Ancestor closure of `from`, not descending below `stop`.
    pub fn closure(&self, from: &[NodeId], stop: Option<NodeId>) -> BTreeSet<NodeId> {
        let mut seen = BTreeSet::new();
        let mut stack: Vec<NodeId> = from.to_vec();
        while let Some(n) = stack.pop() {
            if !seen.insert(n) {
                continue;
            }
            if Some(n) == stop {
                continue;
            }
            stack.extend(self.nodes[n].deps.iter().copied());
        }
        seen
    }
}
