//! Static instrumentation: probe planning, trampoline emission and writing
//! the patched ELF with its two new segments.

pub mod plan;
pub mod rewrite;

use std::path::{Path, PathBuf};

use bcov_core::covdata::{CoverageArray, CoverageHeader, HEADER_SIZE};
use thiserror::Error;

use crate::analysis::ModuleAnalysis;
use crate::disasm::Instruction;
use crate::elf::{extend_layout, ElfError, ElfModuleView, HeaderStrategy, NewSegment, PatchLayout, PHDR_SIZE};

pub use plan::{
    plan, Carrier, Detour, HostAllocation, PatchOptions, PatchPlan, Probe, Skipped, TableEntry, TablePatch, Unprobeable,
    Unprobed,
};
pub use rewrite::{rewrite_instruction, Asm, RewriteError};

#[derive(Debug, Error)]
pub enum PatchError {
    #[error(transparent)]
    Rewrite(#[from] RewriteError),
    #[error(transparent)]
    Elf(#[from] ElfError),
    #[error("jump-table entry at {0:#x} cannot encode its trampoline address")]
    OffsetOverflow(u64),
    #[error("guest at {0:#x} cannot reach its host slot")]
    ShortReach(u64),
    #[error("patch writes overlap at {0:#x}")]
    Overlap(u64),
    #[error("address {0:#x} is not backed by file bytes")]
    Unmapped(u64),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Owner {
    Probe(usize),
    Host(usize),
    Carrier(usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trampoline {
    pub owner: Owner,
    pub addr: u64,
    pub bytes: Vec<u8>,
}

/// Bytes written over the original image, by virtual address.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Overwrite {
    pub addr: u64,
    pub bytes: Vec<u8>,
}

#[derive(Clone, Debug)]
pub struct PatchedModule {
    pub bytes: Vec<u8>,
    pub layout: PatchLayout,
    pub trampolines: Vec<Trampoline>,
    pub writes: Vec<Overwrite>,
    /// Table entry rewrites as (file offset, bytes).
    pub file_writes: Vec<(u64, Vec<u8>)>,
}

impl PatchedModule {
    pub fn trampoline_of(&self, owner: Owner) -> Option<&Trampoline> {
        self.trampolines.iter().find(|t| t.owner == owner)
    }
}

fn insts<'a>(analysis: &'a ModuleAnalysis, function: usize, block: usize) -> &'a [Instruction] {
    let a = analysis.functions[function]
        .result
        .as_ref()
        .expect("planned functions are analyzed");
    &a.cfg.blocks[block].insts
}

/// `[store][relocated][jmp back unless the last one transfers control]`.
fn relocated_body(asm: &mut Asm, store: Option<u64>, run: &[Instruction]) -> Result<(), RewriteError> {
    if let Some(slot) = store {
        asm.store(slot)?;
    }
    for i in run {
        asm.relocate(i)?;
    }
    let last = run.last().expect("non-empty run");
    if !last.is_terminator() {
        asm.jmp(last.addr, asm.redirected(last.end()))?;
    }
    Ok(())
}

struct Emitter<'a> {
    analysis: &'a ModuleAnalysis,
    plan: &'a PatchPlan,
    data: u64,
    strict: bool,
}

impl Emitter<'_> {
    fn slot(&self, probe: usize) -> u64 {
        self.data + HEADER_SIZE as u64 + u64::from(self.plan.probes[probe].coverage_index)
    }

    fn probe(&self, asm: &mut Asm, pi: usize) -> Result<(), RewriteError> {
        let p = &self.plan.probes[pi];
        let body = insts(self.analysis, p.function, p.block);
        match p.detour {
            Detour::Jmp { .. } => relocated_body(asm, Some(self.slot(pi)), &body[p.relocated.clone()]),
            Detour::Table | Detour::Redirect => {
                asm.store(self.slot(pi))?;
                asm.jmp(p.block_addr, p.block_addr)
            }
            Detour::Hosted { slot, call: true, .. } => {
                // the slot's call pushed slot+5; the callee must see the
                // guest's own return address
                asm.store(self.slot(pi))?;
                let (last, rest) = body.split_last().expect("non-empty");
                for i in rest {
                    asm.relocate(i)?;
                }
                let adjust = (slot + 5).wrapping_sub(last.end()) as i64;
                asm.sub_stack_top(i32::try_from(adjust).map_err(|_| RewriteError::Unrelocatable(last.addr))?);
                match last.branch_target {
                    Some(t) => asm.jmp(last.addr, t),
                    None => asm.call_as_jmp(last),
                }
            }
            Detour::Hosted { call: false, .. } => relocated_body(asm, Some(self.slot(pi)), body),
            Detour::InHost { .. } => unreachable!("emitted with the host"),
        }
    }

    fn host(&self, asm: &mut Asm, hi: usize) -> Result<(), RewriteError> {
        let h = &self.plan.hosts[hi];
        let body = insts(self.analysis, h.function, h.block);
        relocated_body(asm, h.probe.map(|p| self.slot(p)), &body[h.relocated.clone()])
    }

    fn carrier(&self, asm: &mut Asm, ci: usize) -> Result<(), RewriteError> {
        let c = &self.plan.carriers[ci];
        let body = insts(self.analysis, c.function, c.block);
        relocated_body(asm, None, &body[c.relocated.clone()])
    }

    /// Redirect trampolines come first so that their addresses are known
    /// when relocated branches into their blocks are emitted.
    fn emit(&self, start: u64) -> Result<Vec<Trampoline>, RewriteError> {
        let mut out = Vec::new();
        let mut at = start;
        let probes = |redirect: bool| {
            self.plan
                .probes
                .iter()
                .enumerate()
                .filter(move |(_, p)| (p.detour == Detour::Redirect) == redirect)
                .filter(|(_, p)| !matches!(p.detour, Detour::InHost { .. }))
                .map(|(i, _)| Owner::Probe(i))
        };
        let owners = probes(true)
            .chain(probes(false))
            .chain((0..self.plan.hosts.len()).map(Owner::Host))
            .chain((0..self.plan.carriers.len()).map(Owner::Carrier));
        let mut redirects = Vec::new();
        for owner in owners {
            let mut asm = Asm::new(at, self.strict).with_redirects(redirects.clone());
            match owner {
                Owner::Probe(i) => self.probe(&mut asm, i)?,
                Owner::Host(i) => self.host(&mut asm, i)?,
                Owner::Carrier(i) => self.carrier(&mut asm, i)?,
            }
            if let Owner::Probe(i) = owner {
                if self.plan.probes[i].detour == Detour::Redirect {
                    redirects.push((self.plan.probes[i].block_addr, asm.addr));
                }
            }
            at = asm.here();
            out.push(Trampoline {
                owner,
                addr: asm.addr,
                bytes: asm.bytes,
            });
        }
        Ok(out)
    }
}

/// Total trampoline bytes for `plan`.
pub fn code_size(analysis: &ModuleAnalysis, plan: &PatchPlan) -> Result<u64, RewriteError> {
    let e = Emitter {
        analysis,
        plan,
        data: 0,
        strict: false,
    };
    Ok(e.emit(0)?.iter().map(|t| t.bytes.len() as u64).sum())
}

/// Plans probes and fills in the segment sizes.
pub fn plan_module(
    view: &ElfModuleView,
    analysis: &ModuleAnalysis,
    options: &PatchOptions,
) -> Result<PatchPlan, PatchError> {
    let mut p = plan(view, analysis, options);
    p.code_seg_bytes = code_size(analysis, &p)?;
    Ok(p)
}

fn original_writes(plan: &PatchPlan, tramps: &[Trampoline]) -> Result<Vec<Overwrite>, PatchError> {
    let tramp = |o: Owner| tramps.iter().find(|t| t.owner == o).expect("emitted").addr;
    let mut out = Vec::new();
    for (i, p) in plan.probes.iter().enumerate() {
        match p.detour {
            Detour::Jmp { site } => out.push(Overwrite {
                addr: site,
                bytes: rewrite::detour(site, tramp(Owner::Probe(i)), false)?.to_vec(),
            }),
            Detour::Hosted { slot, call, .. } => {
                let short = rewrite::short_detour(p.block_addr, slot).ok_or(PatchError::ShortReach(p.block_addr))?;
                out.push(Overwrite {
                    addr: p.block_addr,
                    bytes: short.to_vec(),
                });
                out.push(Overwrite {
                    addr: slot,
                    bytes: rewrite::detour(slot, tramp(Owner::Probe(i)), call)?.to_vec(),
                });
            }
            Detour::InHost { .. } | Detour::Table | Detour::Redirect => {}
        }
    }
    for (i, c) in plan.carriers.iter().enumerate() {
        out.push(Overwrite {
            addr: c.site,
            bytes: rewrite::detour(c.site, tramp(Owner::Carrier(i)), false)?.to_vec(),
        });
    }
    for (i, h) in plan.hosts.iter().enumerate() {
        out.push(Overwrite {
            addr: h.addr,
            bytes: rewrite::detour(h.addr, tramp(Owner::Host(i)), false)?.to_vec(),
        });
    }
    out.sort_by_key(|w| w.addr);
    for w in out.windows(2) {
        if w[0].addr + w[0].bytes.len() as u64 > w[1].addr {
            return Err(PatchError::Overlap(w[1].addr));
        }
    }
    Ok(out)
}

/// Table entry rewrites as (file offset, bytes).
fn table_writes(
    view: &ElfModuleView,
    plan: &PatchPlan,
    tramps: &[Trampoline],
) -> Result<Vec<(u64, Vec<u8>)>, PatchError> {
    let mut out = Vec::new();
    for t in &plan.table_patches {
        let target = tramps
            .iter()
            .find(|x| x.owner == Owner::Probe(t.probe))
            .expect("emitted")
            .addr;
        let off = view.vaddr_to_offset(t.entry_addr).ok_or(PatchError::Unmapped(t.entry_addr))?;
        match t.entry {
            TableEntry::Offset32 { rel_base } => {
                let v = i32::try_from(target.wrapping_sub(rel_base) as i64)
                    .map_err(|_| PatchError::OffsetOverflow(t.entry_addr))?;
                out.push((off, v.to_le_bytes().to_vec()));
            }
            TableEntry::Abs64 { addend_file_offset } => {
                out.push((off, target.to_le_bytes().to_vec()));
                if let Some(a) = addend_file_offset {
                    out.push((a, target.to_le_bytes().to_vec()));
                }
            }
        }
    }
    Ok(out)
}

fn phdr_bytes(p_type: u32, seg: &NewSegment) -> [u8; PHDR_SIZE as usize] {
    let mut b = [0u8; PHDR_SIZE as usize];
    b[0..4].copy_from_slice(&p_type.to_le_bytes());
    b[4..8].copy_from_slice(&seg.flags.to_le_bytes());
    b[8..16].copy_from_slice(&seg.offset.to_le_bytes());
    b[16..24].copy_from_slice(&seg.vaddr.to_le_bytes());
    b[24..32].copy_from_slice(&seg.vaddr.to_le_bytes());
    b[32..40].copy_from_slice(&seg.size.to_le_bytes());
    b[40..48].copy_from_slice(&seg.size.to_le_bytes());
    b[48..56].copy_from_slice(&crate::elf::PAGE_SIZE.to_le_bytes());
    b
}

const PT_LOAD: u32 = 1;
const PT_PHDR: u32 = 6;

fn put_u64(out: &mut [u8], at: usize, v: u64) {
    out[at..at + 8].copy_from_slice(&v.to_le_bytes());
}

/// Appends the two segments and rewrites the program header table.
fn write_image(view: &ElfModuleView, layout: &PatchLayout, code: &[u8], data: &[u8]) -> Vec<u8> {
    let mut out = view.file_bytes.clone();
    let old_off = view.phdrs.offset as usize;
    let count = usize::from(view.phdrs.count);
    let mut table = out[old_off..old_off + count * PHDR_SIZE as usize].to_vec();
    table.extend_from_slice(&phdr_bytes(PT_LOAD, &layout.code_seg));
    table.extend_from_slice(&phdr_bytes(PT_LOAD, &layout.data_seg));
    let (table_off, table_vaddr) = match layout.header_strategy {
        HeaderStrategy::UseReservedGap => {
            let first = view.load_segments[0];
            (view.phdrs.offset, first.vaddr - first.offset + view.phdrs.offset)
        }
        HeaderStrategy::RelocateProgramHeaders => (layout.code_seg.offset, layout.code_seg.vaddr),
    };
    for e in table.chunks_exact_mut(PHDR_SIZE as usize) {
        if u32::from_le_bytes(e[0..4].try_into().expect("4 bytes")) == PT_PHDR {
            let size = (count as u64 + 2) * PHDR_SIZE;
            put_u64(e, 8, table_off);
            put_u64(e, 16, table_vaddr);
            put_u64(e, 24, table_vaddr);
            put_u64(e, 32, size);
            put_u64(e, 40, size);
        }
    }

    out.resize(layout.code_seg.offset as usize, 0);
    let lead = (layout.code_start - layout.code_seg.vaddr) as usize;
    let mut seg = vec![0xcc; layout.code_seg.size as usize];
    seg[lead..lead + code.len()].copy_from_slice(code);
    if layout.header_strategy == HeaderStrategy::RelocateProgramHeaders {
        seg[..table.len()].copy_from_slice(&table);
    }
    out.extend_from_slice(&seg);
    out.resize(layout.data_seg.offset as usize, 0);
    out.extend_from_slice(data);
    if layout.header_strategy == HeaderStrategy::UseReservedGap {
        out[old_off..old_off + table.len()].copy_from_slice(&table);
    }

    // e_phoff at 0x20, e_phnum at 0x38
    put_u64(&mut out, 0x20, table_off);
    out[0x38..0x3a].copy_from_slice(&((count + 2) as u16).to_le_bytes());
    out
}

/// Emits trampolines for `plan` and builds the patched file image.
pub fn apply_patch(
    view: &ElfModuleView,
    analysis: &ModuleAnalysis,
    plan: &PatchPlan,
) -> Result<PatchedModule, PatchError> {
    let size = code_size(analysis, plan)?;
    let data_size = (HEADER_SIZE + plan.probes.len()) as u64;
    let layout = extend_layout(view, size.max(1), data_size)?;
    let emitter = Emitter {
        analysis,
        plan,
        data: layout.data_seg.vaddr,
        strict: true,
    };
    let trampolines = emitter.emit(layout.code_start)?;
    let code: Vec<u8> = trampolines.iter().flat_map(|t| t.bytes.iter().copied()).collect();
    debug_assert_eq!(code.len() as u64, size);

    let writes = original_writes(plan, &trampolines)?;
    let file_writes = table_writes(view, plan, &trampolines)?;

    let header = CoverageHeader::new(plan.policy, plan.probes.len() as u32, view.build_hash);
    let data = bcov_core::covdata::encode_dump(&header, &CoverageArray::zeroed(plan.probes.len()));

    let mut bytes = write_image(view, &layout, &code, &data);
    for w in &writes {
        let off = view.vaddr_to_offset(w.addr).ok_or(PatchError::Unmapped(w.addr))? as usize;
        let end = view
            .vaddr_to_offset(w.addr + w.bytes.len() as u64 - 1)
            .ok_or(PatchError::Unmapped(w.addr))? as usize;
        debug_assert_eq!(end + 1 - off, w.bytes.len());
        bytes[off..off + w.bytes.len()].copy_from_slice(&w.bytes);
    }
    for (off, b) in &file_writes {
        let off = *off as usize;
        bytes[off..off + b.len()].copy_from_slice(b);
    }
    Ok(PatchedModule {
        bytes,
        layout,
        trampolines,
        writes,
        file_writes,
    })
}

/// Applies `plan` and writes the result to `out` with execute permission.
pub fn patch_file(
    view: &ElfModuleView,
    analysis: &ModuleAnalysis,
    plan: &PatchPlan,
    out: &Path,
) -> Result<PatchedModule, PatchError> {
    let patched = apply_patch(view, analysis, plan)?;
    let io = |source| PatchError::Io {
        path: out.to_path_buf(),
        source,
    };
    std::fs::write(out, &patched.bytes).map_err(io)?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        std::fs::set_permissions(out, std::fs::Permissions::from_mode(0o755)).map_err(io)?;
    }
    Ok(patched)
}
