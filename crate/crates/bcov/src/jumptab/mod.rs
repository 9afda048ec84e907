//! Jump-table recovery by sliced micro-execution.
//!
//! For each unresolved indirect jmp the backward slice over the dominator
//! chain is executed concretely with chosen index values. A bounding
//! conditional jmp on the chain gives a control-bounded table; otherwise
//! the index is probed with a fixed value set and the table is bounded by
//! the largest slot read.

pub mod emu;
mod slice;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use bcov_core::{DominatorTree, InstKind};
use iced_x86::{ConditionCode, Mnemonic, Register};
use serde::Serialize;
use thiserror::Error;

use crate::cfg::ControlFlowGraph;
use crate::elf::ElfModuleView;
use emu::{EmuError, Image, Machine, MemRead, STACK_TOP};
use slice::{Loc, NodeId, ValueGraph};

/// Longest slice that is executed.
pub const SLICE_CAP: usize = 128;
/// Largest table enumerated by per-index trials.
pub const TABLE_CAP: u64 = 4096;
/// Share of in-bound trial indices that must reach the jmp.
pub const CONFORMANCE: f64 = 0.75;
/// Largest table read directly from memory past `TABLE_CAP`.
const DIRECT_CAP: u64 = 1 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryKind {
    Offset32,
    Abs64,
    Offset8,
    Offset16,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundKind {
    Control,
    Data,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct JumpTable {
    pub jmp_addr: u64,
    /// Address of entry 0.
    pub base: u64,
    pub entry_kind: EntryKind,
    pub entry_size: u32,
    /// Entries are sign-extended before `rel_base` is added.
    pub signed: bool,
    /// Target = `rel_base` + entry.
    pub rel_base: u64,
    pub bound_kind: BoundKind,
    pub bound: u64,
    pub entry_count: u64,
    /// Target of every entry in table order.
    pub entries: Vec<u64>,
    pub targets: BTreeSet<u64>,
    pub patchable: bool,
    /// Bounding conditional jmp (control-bounded tables).
    pub cond_addr: Option<u64>,
    /// Instructions of the executed slice, ascending.
    #[serde(skip)]
    pub slice: Vec<u64>,
}

impl JumpTable {
    pub fn entry_addr(&self, slot: u64) -> u64 {
        self.base.wrapping_add(slot * u64::from(self.entry_size))
    }

    /// Raw entry value that makes slot dispatch to `target`.
    pub fn encode(&self, target: u64) -> Option<u64> {
        let v = target.wrapping_sub(self.rel_base);
        match self.entry_kind {
            EntryKind::Abs64 => Some(v),
            EntryKind::Offset32 => {
                let s = v as i64;
                (i64::from(i32::MIN)..=i64::from(i32::MAX)).contains(&s).then_some(v & 0xffff_ffff)
            }
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum Abort {
    #[error("jmp target does not depend on a variable")]
    NoVariable,
    #[error("no table read in the slice")]
    NoTableRead,
    #[error("no single index variable")]
    NoIndex,
    #[error("slice exceeds {SLICE_CAP} instructions")]
    SliceTooLarge,
    #[error("emulation failed: {0:?}")]
    Emulation(EmuError),
    #[error("trials disagree on table layout")]
    Inconsistent,
    #[error("entry targets {0:#x} outside the function")]
    NonLocalTarget(u64),
    #[error("table of {0} entries is too large")]
    TooLarge(u64),
    #[error("no trial set conforms to a jump table")]
    NoConformance,
}

fn mask(bits: u32) -> u64 {
    if bits >= 64 {
        u64::MAX
    } else {
        (1u64 << bits) - 1
    }
}

fn sext(v: u64, bits: u32) -> u64 {
    if bits >= 64 {
        v
    } else {
        let shift = 64 - bits;
        (((v << shift) as i64) >> shift) as u64
    }
}

/// Index values for data-bounded trials.
pub fn data_trial_values() -> Vec<u64> {
    let mut out: Vec<u64> = (1..=12).map(|k| (1u64 << k) - 1).collect();
    for k in 1..=12u32 {
        let pattern = if k % 2 == 1 { 0x5555 } else { 0xaaaa };
        out.push(pattern & mask(k));
    }
    out
}

/// In-bound and out-of-bound index values for a bound `b` of `bits` width.
pub fn control_trial_values(b: u64, bits: u32) -> (Vec<u64>, Vec<u64>) {
    let mut inb = vec![0, b.saturating_sub(1), b];
    for i in 1..=5u64 {
        inb.push(((u128::from(b) * u128::from(i)) / 6) as u64);
    }
    let mut seen = BTreeSet::new();
    inb.retain(|v| seen.insert(*v));
    let m = mask(bits);
    let mut out = BTreeSet::new();
    for k in 0..16 {
        let v = b.saturating_add(1u64 << k).min(m);
        if v > b {
            out.insert(v);
        }
    }
    (inb, out.into_iter().collect())
}

struct Plan {
    exec: BTreeSet<usize>,
    inject_at: usize,
    inject: Loc,
    inject_width: u32,
    check: Option<(usize, bool)>,
    jmp: usize,
    table_read: usize,
    table_vars: (bool, bool),
}

#[derive(Clone, Copy, Debug)]
struct Trial {
    reached: bool,
    target: u64,
    read: Option<MemRead>,
    base: u64,
}

struct Ctx<'a, 'g> {
    image: &'a Arc<Image>,
    g: &'g ValueGraph<'g>,
    is_local: &'a dyn Fn(u64) -> bool,
}

impl Ctx<'_, '_> {
    fn plan(&self, index: NodeId, check: Option<(usize, bool, NodeId)>, table_read: NodeId, table_vars: (bool, bool)) -> Result<Plan, Abort> {
        let g = self.g;
        let index_node = &g.nodes[index];
        let mut from = vec![g.target];
        if let Some((_, _, flags)) = check {
            from.push(flags);
        }
        let closure = g.closure(&from, Some(index));
        let mut exec: BTreeSet<usize> = closure.iter().filter_map(|&n| g.nodes[n].pos).collect();
        if let Some(p) = index_node.pos {
            let shared = closure.iter().any(|&n| n != index && g.nodes[n].pos == Some(p));
            if !shared {
                exec.remove(&p);
            }
        }
        let jmp = g.chain.len() - 1;
        exec.remove(&jmp);
        if let Some((p, _, _)) = check {
            exec.remove(&p);
        }
        if exec.len() + 1 + usize::from(check.is_some()) > SLICE_CAP {
            return Err(Abort::SliceTooLarge);
        }
        let table_read = g.nodes[table_read].pos.expect("table read is a definition");
        Ok(Plan {
            exec,
            inject_at: index_node.pos.map_or(index_node.input_at, |p| p + 1),
            inject: index_node.loc,
            inject_width: index_node.width,
            check: check.map(|(p, t, _)| (p, t)),
            jmp,
            table_read,
            table_vars,
        })
    }

    fn run(&self, plan: &Plan, value: u64) -> Result<Trial, EmuError> {
        let mut m = Machine::new(self.image.clone());
        let mut base = 0;
        let mut read = None;
        for pos in 0..=plan.jmp {
            if pos == plan.inject_at {
                inject(&mut m, plan.inject, plan.inject_width, value);
            }
            let inst = &self.g.chain[pos].decoded;
            if pos == plan.table_read {
                base = const_base(&m, inst, plan.table_vars);
            }
            if let Some((p, toward_taken)) = plan.check {
                if p == pos && m.condition(inst.condition_code()) != toward_taken {
                    return Ok(Trial { reached: false, target: 0, read: None, base });
                }
            }
            if pos == plan.jmp {
                let target = m.jump_target(inst)?;
                if pos == plan.table_read {
                    read = m.last_read;
                }
                return Ok(Trial { reached: true, target, read, base });
            }
            if plan.exec.contains(&pos) {
                m.step(inst)?;
                if pos == plan.table_read {
                    read = m.last_read;
                }
            }
        }
        unreachable!("plan ends at the jmp")
    }
}

fn inject(m: &mut Machine, loc: Loc, width: u32, value: u64) {
    match loc {
        Loc::Reg(r) => m.set_reg(r, value),
        Loc::Stack(off) => m.store(STACK_TOP.wrapping_add(off as u64), width.clamp(1, 8), value),
        Loc::Flags | Loc::Pc => {}
    }
}

/// Constant part of the table read address: registers with no variable
/// part plus the displacement.
fn const_base(m: &Machine, inst: &iced_x86::Instruction, (base_var, index_var): (bool, bool)) -> u64 {
    let mut v = inst.memory_displacement64();
    if inst.memory_base() != Register::None && inst.memory_base() != Register::RIP && !base_var {
        v = v.wrapping_add(m.reg(inst.memory_base()));
    }
    if inst.memory_index() != Register::None && !index_var {
        v = v.wrapping_add(m.reg(inst.memory_index()).wrapping_mul(u64::from(inst.memory_index_scale())));
    }
    v
}

/// Layout shared by all reaching trials.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Layout {
    base: u64,
    size: u32,
    rel_base: u64,
}

fn slot_of(t: &Trial) -> Option<(u64, MemRead)> {
    let r = t.read?;
    let off = r.addr.wrapping_sub(t.base);
    let size = u64::from(r.size);
    (off % size == 0).then_some((off / size, r))
}

impl Ctx<'_, '_> {
    fn layout(&self, trials: &[&Trial], signed: bool) -> Result<Layout, Abort> {
        let mut layout: Option<Layout> = None;
        for t in trials {
            let (_, r) = slot_of(t).ok_or(Abort::Inconsistent)?;
            let ext = if signed { sext(r.value, r.size * 8) } else { r.value & mask(r.size * 8) };
            let l = Layout { base: t.base, size: r.size, rel_base: t.target.wrapping_sub(ext) };
            match layout {
                None => layout = Some(l),
                Some(x) if x == l => {}
                Some(_) => return Err(Abort::Inconsistent),
            }
        }
        layout.ok_or(Abort::NoConformance)
    }

    fn decode_entries(&self, l: Layout, signed: bool, count: u64) -> Result<Vec<u64>, Abort> {
        (0..count)
            .map(|s| {
                let raw = self.image.read(l.base.wrapping_add(s * u64::from(l.size)), l.size);
                let ext = if signed { sext(raw, l.size * 8) } else { raw };
                let t = l.rel_base.wrapping_add(ext);
                if (self.is_local)(t) {
                    Ok(t)
                } else {
                    Err(Abort::NonLocalTarget(t))
                }
            })
            .collect()
    }

    fn finish(
        &self,
        trials: &[Trial],
        bound_kind: BoundKind,
        bound: u64,
        count: u64,
        plan: &Plan,
    ) -> Result<JumpTable, Abort> {
        let reached: Vec<&Trial> = trials.iter().filter(|t| t.reached).collect();
        // sign extension may happen after the load (cdqe), so try it first
        let (l, signed) = match self.layout(&reached, true) {
            Ok(l) => (l, true),
            Err(_) => (self.layout(&reached, false)?, false),
        };
        let entries = self.decode_entries(l, signed, count)?;
        for t in &reached {
            let (slot, _) = slot_of(t).ok_or(Abort::Inconsistent)?;
            if entries.get(slot as usize) != Some(&t.target) {
                return Err(Abort::Inconsistent);
            }
        }
        let (entry_kind, patchable) = match l.size {
            8 => (EntryKind::Abs64, l.rel_base == 0),
            4 => (EntryKind::Offset32, signed),
            2 => (EntryKind::Offset16, false),
            _ => (EntryKind::Offset8, false),
        };
        let g = self.g;
        Ok(JumpTable {
            jmp_addr: g.chain[g.chain.len() - 1].addr,
            base: l.base,
            entry_kind,
            entry_size: l.size,
            signed,
            rel_base: l.rel_base,
            bound_kind,
            bound,
            entry_count: count,
            targets: entries.iter().copied().collect(),
            entries,
            patchable,
            cond_addr: plan.check.map(|(p, _)| g.chain[p].addr),
            slice: plan
                .exec
                .iter()
                .copied()
                .chain(plan.check.map(|(p, _)| p))
                .chain([plan.jmp])
                .map(|p| g.chain[p].addr)
                .collect::<BTreeSet<u64>>()
                .into_iter()
                .collect(),
        })
    }

    fn control(&self, plan: &Plan, b: u64, bits: u32) -> Result<JumpTable, Abort> {
        let (inb, outb) = control_trial_values(b, bits);
        let run = |v| self.run(plan, v).map_err(Abort::Emulation);
        let mut good = 0usize;
        let mut total = 0usize;
        let mut at_b = None;
        for &v in &inb {
            let t = run(v)?;
            if v == b {
                at_b = Some(t);
                continue;
            }
            total += 1;
            if t.reached && (self.is_local)(t.target) {
                good += 1;
            }
        }
        if total == 0 || (good as f64) < CONFORMANCE * total as f64 {
            return Err(Abort::NoConformance);
        }
        for &v in &outb {
            if run(v)?.reached {
                return Err(Abort::NoConformance);
            }
        }
        if b + 1 > TABLE_CAP {
            if b + 1 > DIRECT_CAP {
                return Err(Abort::TooLarge(b + 1));
            }
            let samples: Vec<Trial> = inb.iter().map(|&v| run(v)).collect::<Result<_, _>>()?;
            let count = if at_b.is_some_and(|t| t.reached) { b + 1 } else { b };
            let reached: Vec<Trial> = samples.into_iter().filter(|t| t.reached).collect();
            return self.finish(&reached, BoundKind::Control, b, count, plan);
        }
        let trials: Vec<Trial> = (0..=b).map(run).collect::<Result<_, _>>()?;
        let count = trials
            .iter()
            .filter(|t| t.reached)
            .filter_map(slot_of)
            .map(|(s, _)| s + 1)
            .max()
            .ok_or(Abort::NoConformance)?;
        if count > TABLE_CAP {
            return Err(Abort::TooLarge(count));
        }
        self.finish(&trials, BoundKind::Control, b, count, plan)
    }

    fn data(&self, plan: &Plan) -> Result<JumpTable, Abort> {
        let trials: Vec<Trial> = data_trial_values()
            .into_iter()
            .map(|v| self.run(plan, v).map_err(Abort::Emulation))
            .collect::<Result<_, _>>()?;
        if !trials.iter().all(|t| t.reached && (self.is_local)(t.target)) {
            return Err(Abort::NoConformance);
        }
        let slots: BTreeSet<u64> = trials.iter().filter_map(slot_of).map(|(s, _)| s).collect();
        let targets: BTreeSet<u64> = trials.iter().map(|t| t.target).collect();
        let bound = *slots.last().ok_or(Abort::Inconsistent)?;
        if targets.len() > slots.len() {
            return Err(Abort::Inconsistent);
        }
        if bound + 1 > TABLE_CAP {
            return Err(Abort::TooLarge(bound + 1));
        }
        self.finish(&trials, BoundKind::Data, bound, bound + 1, plan)
    }
}

/// Recovers the table dispatched by the indirect jmp ending block `b0`.
pub fn recover(
    view: &ElfModuleView,
    image: &Arc<Image>,
    cfg: &ControlFlowGraph,
    dom: &DominatorTree,
    b0: usize,
    is_local: &dyn Fn(u64) -> bool,
) -> Result<JumpTable, Abort> {
    let g = slice::build(cfg, dom, b0);
    let none = BTreeSet::new();
    let vars = g.vars(view, &none);
    let j = g.target;
    if vars[j].is_empty() {
        return Err(Abort::NoVariable);
    }
    let closure = g.closure(&[j], None);

    // nearest table read feeding the target
    let table_read = closure
        .iter()
        .copied()
        .filter(|&n| {
            g.nodes[n].load.is_some_and(|l| {
                let var = |x: Option<NodeId>| x.is_some_and(|x| !vars[x].is_empty());
                (var(l.base) || var(l.index)) && g.has_const_base(view, &l, &vars)
            })
        })
        .max_by_key(|&n| (g.nodes[n].pos, n))
        .ok_or(Abort::NoTableRead)?;
    let load = g.nodes[table_read].load.expect("filtered on load");
    let table_vars = (
        load.base.is_some_and(|x| !vars[x].is_empty()),
        load.index.is_some_and(|x| !vars[x].is_empty()),
    );
    let ctx = Ctx { image, g: &g, is_local };
    let mut last_err = Abort::NoConformance;

    let cut = |n: NodeId| g.vars(view, &BTreeSet::from([n]))[j].is_empty();

    for k in (0..g.chain_blocks.len().saturating_sub(1)).rev() {
        let c = g.chain_blocks[k];
        let last = cfg.blocks[c].last();
        if last.kind != InstKind::CondJmp || last.decoded.condition_code() == ConditionCode::None {
            continue;
        }
        if matches!(last.decoded.mnemonic(), Mnemonic::Jrcxz | Mnemonic::Jecxz | Mnemonic::Jcxz) {
            continue;
        }
        let pos = g.chain.iter().rposition(|i| i.addr == last.addr).expect("on chain");
        let Some(&flags) = g.flags_at.get(&pos) else { continue };
        let Some(cmp) = g.nodes[flags].pos.and_then(|p| g.compares.get(&p)) else { continue };
        if cmp.imm == 0 {
            continue;
        }
        let r = slice::root(&g.nodes, cmp.operand);
        if !closure.contains(&r) || !cut(r) {
            continue;
        }
        // successor leading to the jmp without revisiting the jcc block
        let mut blocked = vec![false; cfg.flow.graph.node_count()];
        blocked[c] = true;
        let taken = last.branch_target.and_then(|t| cfg.block_at(t));
        let fall = cfg.block_at(last.end());
        let leads = |s: Option<usize>| s.is_some_and(|s| s == b0 || cfg.flow.graph.reachable_avoiding(s, &blocked)[b0]);
        let toward_taken = match (leads(taken), leads(fall)) {
            (true, false) => true,
            (false, true) => false,
            _ => continue,
        };
        let plan = match ctx.plan(r, Some((pos, toward_taken, flags)), table_read, table_vars) {
            Ok(p) => p,
            Err(e) => {
                last_err = e;
                continue;
            }
        };
        match ctx.control(&plan, cmp.imm, cmp.bits) {
            Ok(t) => return Ok(t),
            Err(e) => last_err = e,
        }
    }

    let index = if vars[j].len() == 1 {
        *vars[j].iter().next().expect("one element")
    } else {
        closure.iter().copied().find(|&n| cut(n)).ok_or(Abort::NoIndex)?
    };
    let index = slice::root(&g.nodes, index);
    match ctx.plan(index, None, table_read, table_vars).and_then(|p| ctx.data(&p)) {
        Ok(t) => Ok(t),
        Err(Abort::NoConformance) => Err(last_err),
        Err(e) => Err(e),
    }
}

/// Recovers every unresolved indirect jmp of `cfg`, keyed by jmp address.
pub fn recover_all(
    view: &ElfModuleView,
    image: &Arc<Image>,
    cfg: &ControlFlowGraph,
    is_local: &dyn Fn(u64) -> bool,
) -> BTreeMap<u64, Result<JumpTable, Abort>> {
    let dom = DominatorTree::pre(&cfg.flow.graph, cfg.en());
    let mut out = BTreeMap::new();
    for (k, b) in cfg.blocks.iter().enumerate() {
        let last = b.last();
        if last.kind == InstKind::JmpIndirect && cfg.succs(k).iter().all(|&s| s >= cfg.blocks.len()) {
            out.insert(last.addr, recover(view, image, cfg, &dom, k, is_local));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trial_value_sets() {
        let d = data_trial_values();
        assert_eq!(d.len(), 24);
        assert_eq!(d[11], 4095);
        assert_eq!(d[12], 1);
        assert_eq!(d[13], 2);
        let (inb, outb) = control_trial_values(0x5b, 8);
        assert!(inb.len() <= 8);
        assert!(inb.contains(&0) && inb.contains(&0x5a) && inb.contains(&0x5b));
        assert!(outb.iter().all(|&v| v > 0x5b && v <= 0xff));
        assert!(outb.contains(&0x5c) && outb.contains(&0xff));
        let (_, wide) = control_trial_values(10, 32);
        assert_eq!(wide.len(), 16);
    }

    #[test]
    fn entry_encoding() {
        let t = JumpTable {
            jmp_addr: 0,
            base: 0x2000,
            entry_kind: EntryKind::Offset32,
            entry_size: 4,
            signed: true,
            rel_base: 0x2000,
            bound_kind: BoundKind::Control,
            bound: 3,
            entry_count: 4,
            entries: vec![],
            targets: BTreeSet::new(),
            patchable: true,
            cond_addr: None,
            slice: vec![],
        };
        assert_eq!(t.encode(0x1000), Some(0xffff_f000));
        assert_eq!(t.encode(0x2000 + (1 << 32)), None);
        assert_eq!(t.entry_addr(3), 0x200c);
    }
}
