//! Probe placement: which block carries each superblock's probe, how its
//! detour reaches the trampoline, and what happens to superblocks that
//! cannot be probed.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::ops::Range;

use bcov_core::hosting::{GuestSite, HostSite, Hosting, HostingFailure};
use bcov_core::probe::{classify, internal_run, suffix_run, BlockShape, DETOUR_SIZE};
use bcov_core::{InstKind, Policy, ProbeType};
use rayon::prelude::*;

use crate::analysis::{Analyzed, ModuleAnalysis};
use crate::cfg::BasicBlock;
use crate::elf::{extend_layout, ElfModuleView, PAGE_SIZE};
use crate::jumptab::EntryKind;

use super::rewrite::{relocatable, uses_stack_pointer};

/// Trampolines are assumed to land in this many bytes after the start of
/// the new code segment when checking that table entries can reach them.
pub const TRAMPOLINE_WINDOW: u64 = 1 << 28;

#[derive(Clone, Debug, Default)]
pub struct PatchOptions {
    pub policy: Option<Policy>,
    /// Function names or hex start addresses; `None` instruments everything.
    pub functions: Option<Vec<String>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Detour {
    /// 5-byte `jmp` at `site`, the first relocated instruction.
    Jmp { site: u64 },
    /// 2-byte `jmp` at the block start to `slot` inside a host; the slot
    /// holds a `call` (return address captured) or a `jmp` to the
    /// trampoline.
    Hosted { host: usize, slot: u64, call: bool },
    /// The block is itself a host: the probe is part of the host trampoline.
    InHost { host: usize },
    /// Jump-table entries are redirected; no code is touched.
    Table,
    /// Every predecessor's branch into the block runs from a trampoline and
    /// is retargeted to this probe's trampoline; no code of the block is
    /// touched.
    Redirect,
}

#[derive(Clone, Debug)]
pub struct Probe {
    pub function: usize,
    pub superblock: usize,
    pub block: usize,
    pub block_addr: u64,
    pub kind: ProbeType,
    pub coverage_index: u32,
    pub detour: Detour,
    /// Instructions of the block executed from the trampoline.
    pub relocated: Range<usize>,
    /// Added because a descendant superblock could not be probed.
    pub fallback: bool,
}

#[derive(Clone, Debug)]
pub struct HostAllocation {
    pub function: usize,
    pub block: usize,
    pub addr: u64,
    /// Block bytes plus overwritable padding.
    pub region: u32,
    /// Probe indices of the hosted guests.
    pub guests: Vec<usize>,
    pub slot_offsets: Vec<u32>,
    /// Host instructions moved out of the way of the detour and the slots.
    pub relocated: Range<usize>,
    /// The host's own probe, if its superblock is probed through it.
    pub probe: Option<usize>,
}

/// A probe-less relocation of a block's tail, so that its branch into a
/// redirected block can be retargeted.
#[derive(Clone, Debug)]
pub struct Carrier {
    pub function: usize,
    pub block: usize,
    pub site: u64,
    pub relocated: Range<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TableEntry {
    Offset32 { rel_base: u64 },
    Abs64 { addend_file_offset: Option<u64> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TablePatch {
    pub jmp_addr: u64,
    pub slot: u64,
    pub entry_addr: u64,
    pub entry: TableEntry,
    pub probe: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unprobed {
    OneByteGuest,
    NoReachableHost,
    Unrelocatable,
}

#[derive(Clone, Debug)]
pub struct Unprobeable {
    pub function: usize,
    pub superblock: usize,
    pub reason: Unprobed,
    /// Predecessor superblocks queued for probing in its place.
    pub added: Vec<usize>,
    /// Leaf-node policy with siblings: no extra probes are needed.
    pub covered_by_siblings: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Skipped {
    Filtered,
    Undecodable,
    UnresolvedJump,
}

#[derive(Clone, Debug)]
pub struct PatchPlan {
    pub policy: Policy,
    pub probes: Vec<Probe>,
    pub hosts: Vec<HostAllocation>,
    pub table_patches: Vec<TablePatch>,
    pub carriers: Vec<Carrier>,
    pub unprobeable: Vec<Unprobeable>,
    /// Indices of instrumented functions.
    pub functions: Vec<usize>,
    pub skipped: Vec<(usize, Skipped)>,
    /// Real blocks in instrumented functions.
    pub total_blocks: usize,
    pub code_seg_bytes: u64,
    pub data_seg_bytes: u64,
}

impl PatchPlan {
    /// Coverage index to (function, superblock).
    pub fn probe_map(&self) -> Vec<(usize, usize)> {
        self.probes.iter().map(|p| (p.function, p.superblock)).collect()
    }

    /// Original block address to probe index, for redirected blocks.
    pub fn redirects(&self) -> BTreeMap<u64, usize> {
        self.probes
            .iter()
            .enumerate()
            .filter(|(_, p)| p.detour == Detour::Redirect)
            .map(|(i, p)| (p.block_addr, i))
            .collect()
    }

    pub fn probe_fraction(&self) -> f64 {
        if self.total_blocks == 0 {
            0.0
        } else {
            self.probes.len() as f64 / self.total_blocks as f64
        }
    }
}

/// Padding counts only behind a barrier; after a call or a conditional
/// branch the next bytes may still run.
pub fn usable_padding(b: &BasicBlock) -> u32 {
    if b.last().is_barrier() {
        b.padding
    } else {
        0
    }
}

fn effective_type(b: &BasicBlock, table_ok: bool) -> ProbeType {
    classify(&BlockShape {
        padding: usable_padding(b),
        jump_table_target: b.jump_table_target && table_ok,
        ..b.shape()
    })
}

/// Instructions relocated when `b` is probed as `kind`.
fn code_run(b: &BasicBlock, kind: ProbeType) -> Option<Range<usize>> {
    let sizes = b.sizes();
    let n = sizes.len();
    let suffix = || suffix_run(&sizes, usable_padding(b)).map(|(i, _)| i..n);
    let run = match kind {
        ProbeType::Internal => internal_run(&sizes).map(|(s, e, _)| s..e).or_else(suffix),
        ProbeType::Guest | ProbeType::JumpTab => None,
        _ => suffix(),
    }?;
    b.insts[run.clone()].iter().all(relocatable).then_some(run)
}

fn run_bytes(b: &BasicBlock, run: &Range<usize>) -> u32 {
    b.insts[run.clone()].iter().map(|i| i.size).sum()
}

#[derive(Clone, Debug)]
enum Choice {
    Code { block: usize, kind: ProbeType, run: Range<usize> },
    Table { block: usize, entries: Vec<TablePatch> },
    Guest { block: usize, slot: u64, call: bool, host: usize },
    Redirect { block: usize },
}

impl Choice {
    fn block(&self) -> usize {
        match self {
            Choice::Code { block, .. }
            | Choice::Table { block, .. }
            | Choice::Guest { block, .. }
            | Choice::Redirect { block } => *block,
        }
    }
}

enum Selection {
    Probe(Choice),
    Guests(Vec<usize>),
    Nothing,
}

struct FnPlanner<'a> {
    view: &'a ElfModuleView,
    fi: usize,
    a: &'a Analyzed,
    policy: Policy,
    window: (u64, u64),
}

impl FnPlanner<'_> {
    fn block(&self, b: usize) -> &BasicBlock {
        &self.a.cfg.blocks[b]
    }

    /// Every table slot dispatching to `b`, if all can be redirected.
    fn table_entries(&self, b: usize) -> Option<Vec<TablePatch>> {
        let addr = self.block(b).addr;
        let mut out = Vec::new();
        let relocs = self.view.relative_relocs();
        for t in self.a.tables.values().filter(|t| t.targets.contains(&addr)) {
            if !t.patchable {
                return None;
            }
            for (slot, _) in t.entries.iter().enumerate().filter(|(_, &e)| e == addr) {
                let slot = slot as u64;
                let entry_addr = t.entry_addr(slot);
                let entry = match t.entry_kind {
                    EntryKind::Offset32 => {
                        t.encode(self.window.0)?;
                        t.encode(self.window.1)?;
                        TableEntry::Offset32 { rel_base: t.rel_base }
                    }
                    EntryKind::Abs64 => {
                        let addend = relocs.get(&entry_addr).map(|r| r.addend_file_offset);
                        if self.view.is_shared_object && addend.is_none() {
                            return None;
                        }
                        TableEntry::Abs64 {
                            addend_file_offset: addend,
                        }
                    }
                    _ => return None,
                };
                self.view.vaddr_to_offset(entry_addr)?;
                out.push(TablePatch {
                    jmp_addr: t.jmp_addr,
                    slot,
                    entry_addr,
                    entry,
                    probe: usize::MAX,
                });
            }
        }
        (!out.is_empty()).then_some(out)
    }

    fn select(&self, sb: usize) -> Selection {
        let mut best: Option<((ProbeType, u32, u64), Choice)> = None;
        let mut guests = Vec::new();
        for &b in self.a.sbg.blocks(sb) {
            let blk = self.block(b);
            let mut kind = effective_type(blk, true);
            let mut cand = None;
            if kind == ProbeType::JumpTab {
                match self.table_entries(b) {
                    Some(entries) => cand = Some((0, Choice::Table { block: b, entries })),
                    None => kind = effective_type(blk, false),
                }
            }
            if kind == ProbeType::Guest {
                if blk.insts.iter().all(relocatable) {
                    guests.push(b);
                }
                continue;
            }
            if cand.is_none() {
                if let Some(run) = code_run(blk, kind) {
                    cand = Some((run_bytes(blk, &run), Choice::Code { block: b, kind, run }));
                }
            }
            if let Some((cost, choice)) = cand {
                let key = (kind, cost, blk.addr);
                if best.as_ref().map_or(true, |(k, _)| key < *k) {
                    best = Some((key, choice));
                }
            }
        }
        match best {
            Some((_, c)) => Selection::Probe(c),
            None if !guests.is_empty() => {
                guests.sort_by_key(|&b| self.block(b).addr);
                Selection::Guests(guests)
            }
            None => Selection::Nothing,
        }
    }

    /// Blocks that can host guest slots, with their own probe status.
    fn host_sites(&self, choices: &BTreeMap<usize, Choice>) -> Vec<(usize, HostSite)> {
        let probed: BTreeSet<usize> = choices
            .values()
            .filter(|c| matches!(c, Choice::Code { .. }))
            .map(Choice::block)
            .collect();
        self.a
            .cfg
            .blocks
            .iter()
            .enumerate()
            .filter(|(_, b)| effective_type(b, false) != ProbeType::Guest)
            .filter(|(_, b)| b.insts.iter().all(relocatable))
            .map(|(i, b)| {
                let site = HostSite {
                    id: 0,
                    addr: b.addr,
                    region: b.byte_size + usable_padding(b),
                    probed: probed.contains(&i),
                };
                (i, site)
            })
            .filter(|(_, h)| h.region >= 2 * DETOUR_SIZE)
            .collect()
    }

    fn guest_uses_call_slot(&self, g: usize) -> bool {
        let b = self.block(g);
        let (last, rest) = b.insts.split_last().expect("non-empty");
        last.kind.is_call() && !rest.iter().any(uses_stack_pointer)
    }

    /// A block of `sb` whose every entry is a direct branch or fallthrough
    /// from a block that can run its tail from a trampoline.
    fn redirect(&self, sb: usize, state: &mut RedirectState<'_, '_>) -> Option<Choice> {
        let cfg = &self.a.cfg;
        'blocks: for &b in self.a.sbg.blocks(sb) {
            if cfg.entries.contains(&b) || self.block(b).jump_table_target {
                continue;
            }
            let mut carriers = Vec::new();
            let mut freeze = Vec::new();
            for &pb in cfg.preds(b) {
                if pb == cfg.en() || pb == b {
                    continue 'blocks;
                }
                match state.route(self, pb) {
                    Some(Route::Relocated) => freeze.push(pb),
                    Some(Route::Carrier(run)) => {
                        freeze.push(pb);
                        carriers.push((pb, run));
                    }
                    None => continue 'blocks,
                }
            }
            if freeze.is_empty() {
                continue;
            }
            for pb in freeze {
                state.hosting.freeze(state.ids.id(state.k, pb));
            }
            for (pb, run) in carriers {
                state.carriers.insert(state.ids.id(state.k, pb), run);
            }
            return Some(Choice::Redirect { block: b });
        }
        None
    }

    /// Probes for the policy's superblocks that need no host; the rest are
    /// returned with their guest candidates.
    fn initial(&self) -> (BTreeMap<usize, Choice>, Vec<(usize, Vec<usize>)>) {
        let mut choices = BTreeMap::new();
        let mut pending = Vec::new();
        for sb in self.a.sbg.probe_set(self.policy) {
            match self.select(sb) {
                Selection::Probe(c) => {
                    choices.insert(sb, c);
                }
                Selection::Guests(g) => pending.push((sb, g)),
                Selection::Nothing => pending.push((sb, Vec::new())),
            }
        }
        (choices, pending)
    }
}

enum Route {
    /// The block's last instruction already runs from a trampoline.
    Relocated,
    /// A probe-less trampoline must relocate this run.
    Carrier(Range<usize>),
}

struct RedirectState<'h, 's> {
    k: usize,
    ids: &'s BlockIds,
    choices: &'s BTreeMap<usize, Choice>,
    hosted: &'s BTreeMap<usize, (usize, usize, u32)>,
    hosting: &'s mut Hosting<'h>,
    carriers: &'s mut BTreeMap<usize, Range<usize>>,
}

impl RedirectState<'_, '_> {
    /// How predecessor `pb`'s branch into a redirected block can be moved
    /// into a trampoline, if at all.
    fn route(&self, p: &FnPlanner<'_>, pb: usize) -> Option<Route> {
        let blk = p.block(pb);
        let last = blk.last();
        if last.kind.is_call() || matches!(last.kind, InstKind::JmpIndirect | InstKind::Ret) {
            return None;
        }
        let gid = self.ids.id(self.k, pb);
        if self.carriers.contains_key(&gid) || self.hosted.contains_key(&gid) {
            return Some(Route::Relocated);
        }
        let n = blk.insts.len();
        let host_covers = |used: u32| {
            let reach = blk.addr + u64::from(DETOUR_SIZE) * (1 + u64::from(used));
            blk.insts.iter().take_while(|i| i.addr < reach).count() == n
        };
        let used = self.hosting.guests_in(gid).unwrap_or(0);
        if used > 0 {
            return host_covers(used).then_some(Route::Relocated);
        }
        match self.choices.values().find(|c| c.block() == pb) {
            Some(Choice::Code { run, .. }) => (run.end == n).then_some(Route::Relocated),
            Some(_) => None,
            None => {
                if effective_type(blk, false) == ProbeType::Guest {
                    return None;
                }
                let (start, _) = suffix_run(&blk.sizes(), usable_padding(blk))?;
                blk.insts[start..].iter().all(relocatable).then_some(Route::Carrier(start..n))
            }
        }
    }
}

/// Module-wide block id space for hosting.
struct BlockIds {
    offsets: Vec<usize>,
    owners: Vec<(usize, usize)>,
}

impl BlockIds {
    fn new(planners: &[FnPlanner<'_>]) -> Self {
        let mut offsets = Vec::new();
        let mut owners = Vec::new();
        for (k, p) in planners.iter().enumerate() {
            offsets.push(owners.len());
            owners.extend((0..p.a.cfg.blocks.len()).map(|b| (k, b)));
        }
        BlockIds { offsets, owners }
    }

    fn id(&self, k: usize, b: usize) -> usize {
        self.offsets[k] + b
    }
}

/// Whether the function filter admits `f`.
pub fn selected(options: &PatchOptions, f: &crate::elf::FunctionDefinition) -> bool {
    let Some(filter) = &options.functions else {
        return true;
    };
    filter.iter().any(|s| {
        let by_addr = s
            .strip_prefix("0x")
            .and_then(|h| u64::from_str_radix(h, 16).ok())
            .is_some_and(|a| a == f.start);
        by_addr || f.name.as_deref() == Some(s.as_str()) || f.display_name() == *s
    })
}

/// Where trampolines will be placed, for table reach checks.
fn trampoline_window(view: &ElfModuleView) -> (u64, u64) {
    let start = match extend_layout(view, 1, 1) {
        Ok(l) => l.code_start,
        Err(_) => {
            let end = view
                .load_segments
                .iter()
                .map(|s| s.vaddr + s.mem_size)
                .max()
                .unwrap_or(0);
            (end + PAGE_SIZE - 1) & !(PAGE_SIZE - 1)
        }
    };
    (start, start + TRAMPOLINE_WINDOW)
}

/// Places probes for every instrumented function. Deterministic for a given
/// module, analysis and options, so reports can recompute the probe map.
pub fn plan(view: &ElfModuleView, analysis: &ModuleAnalysis, options: &PatchOptions) -> PatchPlan {
    let policy = options.policy.unwrap_or(Policy::AnyNode);
    let window = trampoline_window(view);
    let mut skipped = Vec::new();
    let mut planners = Vec::new();
    for (fi, f) in analysis.functions.iter().enumerate() {
        if !selected(options, &f.function) {
            skipped.push((fi, Skipped::Filtered));
            continue;
        }
        match &f.result {
            Err(_) => skipped.push((fi, Skipped::Undecodable)),
            Ok(a) if !a.cfg.unresolved_jumps().is_empty() => skipped.push((fi, Skipped::UnresolvedJump)),
            Ok(a) => planners.push(FnPlanner {
                view,
                fi,
                a,
                policy,
                window,
            }),
        }
    }

    // probes that need no host, per function in parallel
    let initial: Vec<_> = planners.par_iter().map(FnPlanner::initial).collect();
    let mut choices: Vec<BTreeMap<usize, Choice>> = Vec::with_capacity(planners.len());
    let mut queue: VecDeque<(usize, usize, Vec<usize>)> = VecDeque::new();
    for (k, (c, pending)) in initial.into_iter().enumerate() {
        choices.push(c);
        queue.extend(pending.into_iter().map(|(sb, g)| (k, sb, g)));
    }

    // guests and fallbacks, module-wide so hosts may sit in a neighbouring
    // function
    let ids = BlockIds::new(&planners);
    let hosts: Vec<HostSite> = planners
        .iter()
        .enumerate()
        .flat_map(|(k, p)| {
            let ids = &ids;
            p.host_sites(&choices[k]).into_iter().map(move |(b, mut h)| {
                h.id = ids.id(k, b);
                h
            })
        })
        .collect();
    let mut hosting = Hosting::new(&hosts);
    let mut attempted: Vec<BTreeSet<usize>> = planners
        .iter()
        .map(|p| p.a.sbg.probe_set(policy).into_iter().collect())
        .collect();
    let wanted = attempted.clone();
    let mut unprobeable = Vec::new();
    let mut hosted: BTreeMap<usize, (usize, usize, u32)> = BTreeMap::new();
    let mut carriers: BTreeMap<usize, Range<usize>> = BTreeMap::new();
    let mut deferred: Vec<(usize, usize, Unprobed)> = Vec::new();
    loop {
    while let Some((k, sb, guests)) = queue.pop_front() {
        let p = &planners[k];
        let mut reason = if guests.is_empty() {
            Unprobed::Unrelocatable
        } else {
            Unprobed::OneByteGuest
        };
        let mut placed = false;
        for g in guests {
            let blk = p.block(g);
            let site = GuestSite {
                id: ids.id(k, g),
                addr: blk.addr,
                size: blk.byte_size + usable_padding(blk),
            };
            match hosting.place(&site) {
                Ok((host, offset)) => {
                    hosted.insert(site.id, (sb, host, offset));
                    placed = true;
                    break;
                }
                Err(HostingFailure::NoReachableHost(_)) => reason = Unprobed::NoReachableHost,
                Err(HostingFailure::TooSmall(_)) => {}
            }
        }
        if !placed {
            deferred.push((k, sb, reason));
        }
    }
    if deferred.is_empty() {
        break;
    }
    // redirects are tried once every guest has had its chance at a host, so
    // that frozen hosts cost as little as possible
    for (k, sb, reason) in std::mem::take(&mut deferred) {
        let p = &planners[k];
        let mut state = RedirectState {
            k,
            ids: &ids,
            choices: &choices[k],
            hosted: &hosted,
            hosting: &mut hosting,
            carriers: &mut carriers,
        };
        if let Some(c) = p.redirect(sb, &mut state) {
            choices[k].insert(sb, c);
            continue;
        }
        let sbg = &p.a.sbg;
        let mut entry = Unprobeable {
            function: p.fi,
            superblock: sb,
            reason,
            added: Vec::new(),
            covered_by_siblings: false,
        };
        if policy == Policy::LeafNode && sbg.has_siblings(sb) {
            entry.covered_by_siblings = true;
        } else {
            for &parent in sbg.parents(sb) {
                if sbg.is_virtual(parent) || choices[k].contains_key(&parent) || !attempted[k].insert(parent) {
                    continue;
                }
                entry.added.push(parent);
                match p.select(parent) {
                    Selection::Probe(mut c) => {
                        // a carrier's detour site is taken; probe through it
                        if let Choice::Code { block, run, .. } = &mut c {
                            if let Some(r) = carriers.get(&ids.id(k, *block)) {
                                *run = r.clone();
                            }
                        }
                        choices[k].insert(parent, c);
                    }
                    Selection::Guests(g) => queue.push_back((k, parent, g)),
                    Selection::Nothing => queue.push_back((k, parent, Vec::new())),
                }
            }
        }
        unprobeable.push(entry);
    }
    }
    for (&gid, &(sb, host, offset)) in &hosted {
        let (k, g) = ids.owners[gid];
        let (hk, hb) = ids.owners[host];
        let slot = planners[hk].block(hb).addr + u64::from(offset);
        choices[k].insert(
            sb,
            Choice::Guest {
                block: g,
                slot,
                call: planners[k].guest_uses_call_slot(g),
                host,
            },
        );
    }

    let mut out = PatchPlan {
        policy,
        probes: Vec::new(),
        hosts: Vec::new(),
        table_patches: Vec::new(),
        carriers: Vec::new(),
        unprobeable,
        functions: planners.iter().map(|p| p.fi).collect(),
        skipped,
        total_blocks: planners.iter().map(|p| p.a.cfg.blocks.len()).sum(),
        code_seg_bytes: 0,
        data_seg_bytes: 0,
    };

    let allocations = hosting.into_allocations();
    let host_index: BTreeMap<usize, usize> = allocations.iter().enumerate().map(|(i, a)| (a.host, i)).collect();
    let mut probe_of_block: BTreeMap<usize, usize> = BTreeMap::new();
    let mut seen_entries = BTreeSet::new();
    for (k, p) in planners.iter().enumerate() {
        for (&sb, choice) in &choices[k] {
            let idx = out.probes.len();
            let block = choice.block();
            let blk = p.block(block);
            probe_of_block.insert(ids.id(k, block), idx);
            let (kind, detour, relocated) = match choice {
                Choice::Code { kind, run, .. } => (*kind, Detour::Jmp { site: blk.insts[run.start].addr }, run.clone()),
                Choice::Table { entries, .. } => {
                    for e in entries {
                        if seen_entries.insert(e.entry_addr) {
                            out.table_patches.push(TablePatch { probe: idx, ..*e });
                        }
                    }
                    (ProbeType::JumpTab, Detour::Table, 0..0)
                }
                Choice::Redirect { .. } => (effective_type(blk, false), Detour::Redirect, 0..0),
                Choice::Guest { slot, call, host, .. } => (
                    ProbeType::Guest,
                    Detour::Hosted {
                        host: host_index[host],
                        slot: *slot,
                        call: *call,
                    },
                    0..blk.insts.len(),
                ),
            };
            out.probes.push(Probe {
                function: p.fi,
                superblock: sb,
                block,
                block_addr: blk.addr,
                kind,
                coverage_index: idx as u32,
                detour,
                relocated,
                fallback: !wanted[k].contains(&sb),
            });
        }
    }
    for (hi, a) in allocations.into_iter().enumerate() {
        let (k, b) = ids.owners[a.host];
        let blk = planners[k].block(b);
        let reach = blk.addr + u64::from(DETOUR_SIZE) * (1 + a.guests.len() as u64);
        let n = blk.insts.iter().take_while(|i| i.addr < reach).count();
        let mut h = HostAllocation {
            function: planners[k].fi,
            block: b,
            addr: blk.addr,
            region: blk.byte_size + usable_padding(blk),
            guests: a.guests.iter().map(|g| probe_of_block[g]).collect(),
            slot_offsets: a.slot_offsets,
            relocated: 0..n,
            probe: None,
        };
        if let Some(&pi) = probe_of_block.get(&a.host) {
            let probe = &mut out.probes[pi];
            if matches!(probe.detour, Detour::Jmp { .. }) {
                probe.detour = Detour::InHost { host: hi };
                probe.relocated = h.relocated.clone();
                h.probe = Some(pi);
            }
        }
        out.hosts.push(h);
    }
    for (gid, run) in carriers {
        if probe_of_block.get(&gid).is_some_and(|&pi| out.probes[pi].relocated == run) {
            continue;
        }
        let (k, b) = ids.owners[gid];
        out.carriers.push(Carrier {
            function: planners[k].fi,
            block: b,
            site: planners[k].block(b).insts[run.start].addr,
            relocated: run,
        });
    }
    out.data_seg_bytes = (bcov_core::covdata::HEADER_SIZE + out.probes.len()) as u64;
    out
}
