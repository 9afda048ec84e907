//! ELF64 x86-64 module view: segments, sections, symbols, dynamic
//! relocations, call-frame records and the layout of the two segments added
//! by the patcher.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use bcov_core::hash::fnv1a64;
use gimli::{BaseAddresses, CieOrFde, EhFrame, LittleEndian, UnwindSection};
use log::{debug, warn};
use object::elf;
use object::read::elf::{ElfFile64, ProgramHeader as _};
use object::{Object, ObjectSection, ObjectSymbol, SymbolKind};
use thiserror::Error;

use crate::lsda;

pub const PAGE_SIZE: u64 = 0x1000;
pub const PHDR_SIZE: u64 = 56;
/// Free bytes needed after the program headers to add two entries in place.
pub const RESERVED_GAP: u64 = 2 * PHDR_SIZE;

pub const R_X86_64_64: u32 = elf::R_X86_64_64.0;
pub const R_X86_64_GLOB_DAT: u32 = elf::R_X86_64_GLOB_DAT.0;
pub const R_X86_64_JUMP_SLOT: u32 = elf::R_X86_64_JUMP_SLOT.0;
pub const R_X86_64_RELATIVE: u32 = elf::R_X86_64_RELATIVE.0;

pub const PF_X: u32 = 1;
pub const PF_W: u32 = 2;
pub const PF_R: u32 = 4;

#[derive(Debug, Error)]
pub enum ElfError {
    #[error("not an ELF file")]
    NotElf,
    #[error("unsupported ELF class, byte order or machine (need ELF64 x86-64 little-endian)")]
    UnsupportedArch,
    #[error("malformed ELF headers: {0}")]
    MalformedHeaders(String),
    #[error("no function symbols and no call-frame information")]
    NoDefinitionSource,
    #[error("no room for two more program headers; relink with 112 bytes reserved after them")]
    NoHeaderSpace,
    #[error("new segments at {0:#x} fall outside the +-2 GiB reach of the code")]
    OutOfReach(u64),
    #[error("layout sizes must be positive")]
    EmptyLayout,
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LoadSegment {
    pub vaddr: u64,
    pub offset: u64,
    pub file_size: u64,
    pub mem_size: u64,
    pub flags: u32,
}

impl LoadSegment {
    pub fn is_exec(&self) -> bool {
        self.flags & PF_X != 0
    }

    pub fn is_writable(&self) -> bool {
        self.flags & PF_W != 0
    }

    pub fn contains(&self, addr: u64) -> bool {
        addr >= self.vaddr && addr < self.vaddr + self.mem_size
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Section {
    pub name: String,
    pub vaddr: u64,
    pub offset: u64,
    pub size: u64,
    /// Occupies file bytes (not NOBITS).
    pub has_data: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Symbol {
    pub name: String,
    pub vaddr: u64,
    pub size: u64,
    pub is_function: bool,
}

/// A dynamic relocation entry, with the file offset of its addend field.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DynReloc {
    pub r_offset: u64,
    pub r_type: u32,
    pub addend: i64,
    pub symbol: Option<String>,
    pub addend_file_offset: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProgramHeaderTable {
    pub offset: u64,
    pub count: u16,
}

#[derive(Clone, Debug)]
pub struct ElfModuleView {
    pub path: PathBuf,
    pub file_bytes: Vec<u8>,
    pub is_shared_object: bool,
    pub entry: u64,
    pub load_segments: Vec<LoadSegment>,
    pub sections: BTreeMap<String, Section>,
    pub symbols: Vec<Symbol>,
    pub dyn_relocs: Vec<DynReloc>,
    pub phdrs: ProgramHeaderTable,
    /// `PT_GNU_RELRO` range, read-only after relocation.
    pub relro: Option<(u64, u64)>,
    pub build_hash: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FunctionDefinition {
    pub name: Option<String>,
    pub start: u64,
    pub size: u64,
    pub aux_entries: BTreeSet<u64>,
}

impl FunctionDefinition {
    pub fn end(&self) -> u64 {
        self.start + self.size
    }

    pub fn contains(&self, addr: u64) -> bool {
        addr >= self.start && addr < self.end()
    }

    pub fn display_name(&self) -> String {
        self.name
            .clone()
            .unwrap_or_else(|| format!("sub_{:x}", self.start))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CfiFunctionRecord {
    pub fde_start: u64,
    pub fde_range: u64,
    pub lsda_ptr: Option<u64>,
    pub landing_pads: BTreeSet<u64>,
    pub call_sites: Vec<lsda::CallSite>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeaderStrategy {
    RelocateProgramHeaders,
    UseReservedGap,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NewSegment {
    pub vaddr: u64,
    pub offset: u64,
    pub size: u64,
    pub flags: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchLayout {
    pub code_seg: NewSegment,
    pub data_seg: NewSegment,
    pub header_strategy: HeaderStrategy,
    /// First byte available for trampolines; the relocated program header
    /// table, if any, sits in front of it.
    pub code_start: u64,
}

fn check_ident(bytes: &[u8]) -> Result<(), ElfError> {
    if bytes.len() < 4 || &bytes[0..4] != b"\x7fELF" {
        return Err(ElfError::NotElf);
    }
    if bytes.len() < 20 {
        return Err(ElfError::MalformedHeaders("truncated identification".into()));
    }
    let machine = u16::from_le_bytes([bytes[18], bytes[19]]);
    if bytes[4] != elf::ELFCLASS64.0 || bytes[5] != elf::ELFDATA2LSB.0 || machine != elf::EM_X86_64.0 {
        return Err(ElfError::UnsupportedArch);
    }
    Ok(())
}

pub fn load_module(path: &Path) -> Result<ElfModuleView, ElfError> {
    let bytes = std::fs::read(path).map_err(|source| ElfError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    ElfModuleView::parse(path.to_path_buf(), bytes)
}

impl ElfModuleView {
    pub fn parse(path: PathBuf, file_bytes: Vec<u8>) -> Result<Self, ElfError> {
        check_ident(&file_bytes)?;
        let malformed = |e: object::Error| ElfError::MalformedHeaders(e.to_string());
        let file = ElfFile64::<object::Endianness>::parse(&file_bytes[..]).map_err(malformed)?;
        let endian = file.endian();
        let header = file.elf_header();

        let mut load_segments = Vec::new();
        let mut relro = None;
        for ph in file.elf_program_headers() {
            if ph.p_type(endian) == elf::PT_GNU_RELRO {
                let start = ph.p_vaddr(endian);
                relro = Some((start, start + ph.p_memsz(endian)));
            }
            if ph.p_type(endian) == elf::PT_LOAD {
                load_segments.push(LoadSegment {
                    vaddr: ph.p_vaddr(endian),
                    offset: ph.p_offset(endian),
                    file_size: ph.p_filesz(endian),
                    mem_size: ph.p_memsz(endian),
                    flags: ph.p_flags(endian).0,
                });
            }
        }
        load_segments.sort_by_key(|s| s.vaddr);
        for w in load_segments.windows(2) {
            if w[0].vaddr + w[0].mem_size > w[1].vaddr {
                return Err(ElfError::MalformedHeaders("overlapping load segments".into()));
            }
        }

        let mut sections = BTreeMap::new();
        for s in file.sections() {
            let Ok(name) = s.name() else { continue };
            if name.is_empty() {
                continue;
            }
            let (offset, has_data) = match s.file_range() {
                Some((off, _)) => (off, true),
                None => (0, false),
            };
            sections.insert(
                name.to_string(),
                Section {
                    name: name.to_string(),
                    vaddr: s.address(),
                    offset,
                    size: s.size(),
                    has_data,
                },
            );
        }

        let mut symbols = Vec::new();
        for sym in file.symbols() {
            let Ok(name) = sym.name() else { continue };
            if name.is_empty() || sym.is_undefined() {
                continue;
            }
            symbols.push(Symbol {
                name: name.to_string(),
                vaddr: sym.address(),
                size: sym.size(),
                is_function: sym.kind() == SymbolKind::Text,
            });
        }

        let dyn_relocs = parse_dyn_relocs(&file, &sections, &file_bytes);

        let phdrs = ProgramHeaderTable {
            offset: header.e_phoff.get(endian),
            count: header.e_phnum.get(endian),
        };
        Ok(ElfModuleView {
            path,
            is_shared_object: header.e_type.get(endian) == elf::ET_DYN,
            entry: header.e_entry.get(endian),
            load_segments,
            sections,
            symbols,
            dyn_relocs,
            phdrs,
            relro,
            build_hash: fnv1a64(&file_bytes),
            file_bytes,
        })
    }

    /// Serializes the view; an unmodified view reproduces the input file.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.file_bytes.clone()
    }

    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.get(name)
    }

    pub fn segment_of(&self, addr: u64) -> Option<&LoadSegment> {
        self.load_segments.iter().find(|s| s.contains(addr))
    }

    /// Contents fixed once relocations are applied.
    pub fn is_read_only(&self, addr: u64) -> bool {
        self.relro.is_some_and(|(a, b)| addr >= a && addr < b)
            || self.segment_of(addr).is_some_and(|s| !s.is_writable())
    }

    /// Inside an allocated section (non-allocated sections have address 0).
    pub fn in_section(&self, addr: u64) -> bool {
        self.sections
            .values()
            .any(|s| s.vaddr != 0 && addr >= s.vaddr && addr < s.vaddr + s.size)
    }

    pub fn is_executable(&self, addr: u64) -> bool {
        self.segment_of(addr).is_some_and(|s| s.is_exec())
    }

    /// File offset of a virtual address backed by file bytes.
    pub fn vaddr_to_offset(&self, addr: u64) -> Option<u64> {
        self.load_segments
            .iter()
            .find(|s| addr >= s.vaddr && addr < s.vaddr + s.file_size)
            .map(|s| addr - s.vaddr + s.offset)
    }

    pub fn read(&self, addr: u64, len: usize) -> Option<&[u8]> {
        let seg = self
            .load_segments
            .iter()
            .find(|s| addr >= s.vaddr && addr < s.vaddr + s.file_size)?;
        if addr + len as u64 > seg.vaddr + seg.file_size {
            return None;
        }
        let off = (addr - seg.vaddr + seg.offset) as usize;
        self.file_bytes.get(off..off + len)
    }

    pub fn read_u64(&self, addr: u64) -> Option<u64> {
        self.read(addr, 8)
            .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    /// Load bias of the first segment: vaddr minus file offset.
    pub fn image_base(&self) -> u64 {
        self.load_segments
            .first()
            .map_or(0, |s| s.vaddr.wrapping_sub(s.offset))
    }

    pub fn text_range(&self) -> Option<(u64, u64)> {
        self.section(".text").map(|s| (s.vaddr, s.vaddr + s.size))
    }

    /// RELATIVE relocations keyed by the address they patch.
    pub fn relative_relocs(&self) -> BTreeMap<u64, &DynReloc> {
        self.dyn_relocs
            .iter()
            .filter(|r| r.r_type == R_X86_64_RELATIVE)
            .map(|r| (r.r_offset, r))
            .collect()
    }

    /// GOT slot address to imported symbol name.
    pub fn got_imports(&self) -> BTreeMap<u64, String> {
        self.dyn_relocs
            .iter()
            .filter(|r| r.r_type == R_X86_64_JUMP_SLOT || r.r_type == R_X86_64_GLOB_DAT)
            .filter_map(|r| r.symbol.clone().map(|s| (r.r_offset, s)))
            .collect()
    }

    pub fn imported_names(&self) -> BTreeSet<String> {
        self.got_imports().into_values().collect()
    }

    /// Whether the module takes part in C++ exception unwinding.
    pub fn uses_cxx_unwinding(&self) -> bool {
        self.imported_names()
            .iter()
            .any(|n| n.starts_with("__cxa_") || n.starts_with("__gxx_personality") || n.starts_with("_Unwind_"))
    }
}

fn parse_dyn_relocs(
    file: &ElfFile64<object::Endianness>,
    sections: &BTreeMap<String, Section>,
    bytes: &[u8],
) -> Vec<DynReloc> {
    let endian = file.endian();
    let dynsym = file.elf_dynamic_symbol_table();
    let mut out = Vec::new();
    for name in [".rela.dyn", ".rela.plt"] {
        let Some(sec) = sections.get(name) else { continue };
        if !sec.has_data {
            continue;
        }
        let start = sec.offset as usize;
        let end = start + sec.size as usize;
        let Some(data) = bytes.get(start..end) else { continue };
        for (i, e) in data.chunks_exact(24).enumerate() {
            let r_offset = u64::from_le_bytes(e[0..8].try_into().expect("8 bytes"));
            let r_info = u64::from_le_bytes(e[8..16].try_into().expect("8 bytes"));
            let addend = i64::from_le_bytes(e[16..24].try_into().expect("8 bytes"));
            let sym_index = (r_info >> 32) as usize;
            let symbol = (sym_index != 0)
                .then(|| {
                    let sym = dynsym.symbol(object::SymbolIndex(sym_index)).ok()?;
                    let name = dynsym.symbol_name(endian, sym).ok()?;
                    Some(String::from_utf8_lossy(name).into_owned())
                })
                .flatten();
            out.push(DynReloc {
                r_offset,
                r_type: (r_info & 0xffff_ffff) as u32,
                addend,
                symbol,
                addend_file_offset: (start + i * 24 + 16) as u64,
            });
        }
    }
    out
}

/// FDE records of `.eh_frame`, with decoded LSDAs.
pub fn read_cfi_records(view: &ElfModuleView) -> Vec<CfiFunctionRecord> {
    let Some(eh) = view.section(".eh_frame").filter(|s| s.has_data) else {
        return Vec::new();
    };
    let Some(data) = view
        .file_bytes
        .get(eh.offset as usize..(eh.offset + eh.size) as usize)
    else {
        return Vec::new();
    };
    let section = EhFrame::new(data, LittleEndian);
    let mut bases = BaseAddresses::default().set_eh_frame(eh.vaddr);
    if let Some(text) = view.section(".text") {
        bases = bases.set_text(text.vaddr);
    }
    if let Some(got) = view.section(".got") {
        bases = bases.set_got(got.vaddr);
    }
    let mut out = Vec::new();
    let mut entries = section.entries(&bases);
    loop {
        match entries.next() {
            Ok(None) => break,
            Ok(Some(CieOrFde::Cie(_))) => {}
            Ok(Some(CieOrFde::Fde(partial))) => {
                let fde = match partial.parse(EhFrame::cie_from_offset) {
                    Ok(f) => f,
                    Err(e) => {
                        warn!("skipping malformed FDE: {e}");
                        continue;
                    }
                };
                let lsda_ptr = match fde.lsda() {
                    Some(gimli::Pointer::Direct(a)) => Some(a),
                    Some(gimli::Pointer::Indirect(a)) => view.read_u64(a),
                    None => None,
                };
                let mut rec = CfiFunctionRecord {
                    fde_start: fde.initial_address(),
                    fde_range: fde.len(),
                    lsda_ptr,
                    landing_pads: BTreeSet::new(),
                    call_sites: Vec::new(),
                };
                if let Some(ptr) = lsda_ptr {
                    match decode_lsda_at(view, ptr, rec.fde_start) {
                        Ok(table) => {
                            let end = rec.fde_start + rec.fde_range;
                            for cs in &table.call_sites {
                                if let Some(lp) = cs.landing_pad {
                                    if lp >= rec.fde_start && lp < end {
                                        rec.landing_pads.insert(lp);
                                    } else {
                                        warn!("landing pad {lp:#x} outside FDE at {:#x}", rec.fde_start);
                                    }
                                }
                            }
                            rec.call_sites = table.call_sites;
                        }
                        Err(e) => warn!("skipping LSDA at {ptr:#x}: {e}"),
                    }
                }
                out.push(rec);
            }
            Err(e) => {
                warn!("stopping .eh_frame walk: {e}");
                break;
            }
        }
    }
    out.sort_by_key(|r| r.fde_start);
    out
}

fn decode_lsda_at(view: &ElfModuleView, ptr: u64, func_start: u64) -> Result<lsda::Lsda, lsda::LsdaError> {
    let seg = view
        .load_segments
        .iter()
        .find(|s| ptr >= s.vaddr && ptr < s.vaddr + s.file_size)
        .ok_or(lsda::LsdaError::OutOfBounds)?;
    let off = (ptr - seg.vaddr + seg.offset) as usize;
    let end = (seg.offset + seg.file_size) as usize;
    lsda::parse(&view.file_bytes[off..end], ptr, func_start)
}

/// Landing pads grouped by the start of the function whose FDE holds them.
pub fn collect_landing_pads(view: &ElfModuleView) -> BTreeMap<u64, BTreeSet<u64>> {
    let mut out: BTreeMap<u64, BTreeSet<u64>> = BTreeMap::new();
    for rec in read_cfi_records(view) {
        if !rec.landing_pads.is_empty() {
            out.entry(rec.fde_start).or_default().extend(rec.landing_pads);
        }
    }
    out
}

/// Function definitions from `.text` symbols, or from FDEs when the symbol
/// table is absent. Overlapping or empty definitions are dropped.
pub fn read_function_definitions(view: &ElfModuleView) -> Result<Vec<FunctionDefinition>, ElfError> {
    let (text_lo, text_hi) = view.text_range().unwrap_or((0, 0));
    let in_text = |a: u64, z: u64| a >= text_lo && a + z <= text_hi;
    let mut candidates: Vec<FunctionDefinition> = view
        .symbols
        .iter()
        .filter(|s| s.is_function && in_text(s.vaddr, s.size))
        .map(|s| FunctionDefinition {
            name: Some(s.name.clone()),
            start: s.vaddr,
            size: s.size,
            aux_entries: BTreeSet::new(),
        })
        .collect();
    if candidates.is_empty() {
        candidates = read_cfi_records(view)
            .into_iter()
            .filter(|r| in_text(r.fde_start, r.fde_range))
            .map(|r| FunctionDefinition {
                name: None,
                start: r.fde_start,
                size: r.fde_range,
                aux_entries: BTreeSet::new(),
            })
            .collect();
        if candidates.is_empty() {
            return Err(ElfError::NoDefinitionSource);
        }
    }
    candidates.sort_by(|a, b| (a.start, a.name.as_deref()).cmp(&(b.start, b.name.as_deref())));
    let mut out: Vec<FunctionDefinition> = Vec::new();
    for f in candidates {
        if f.size == 0 {
            debug!("dropping empty definition {} at {:#x}", f.display_name(), f.start);
            continue;
        }
        if let Some(last) = out.last() {
            if f.start < last.end() {
                warn!(
                    "dropping {} at {:#x}: overlaps {}",
                    f.display_name(),
                    f.start,
                    last.display_name()
                );
                continue;
            }
        }
        out.push(f);
    }
    Ok(out)
}

fn page_up(x: u64) -> u64 {
    (x + PAGE_SIZE - 1) & !(PAGE_SIZE - 1)
}

/// Free bytes after the program header table, up to the next file content.
pub fn header_gap(view: &ElfModuleView) -> u64 {
    let end = view.phdrs.offset + u64::from(view.phdrs.count) * PHDR_SIZE;
    let next_section = view
        .sections
        .values()
        .filter(|s| s.has_data && s.size > 0 && s.offset >= end)
        .map(|s| s.offset)
        .min();
    let next_segment = view
        .load_segments
        .iter()
        .map(|s| s.offset)
        .filter(|&o| o >= end)
        .min();
    let next = match (next_section, next_segment) {
        (Some(a), Some(b)) => a.min(b),
        (a, b) => a.or(b).unwrap_or(view.file_bytes.len() as u64),
    };
    next.saturating_sub(end)
}

/// Maximum distance between any original code byte and any byte of the new
/// segments that pc-relative rel32 operands can bridge.
pub const REACH: u64 = (1 << 31) - 1;

pub fn extend_layout(view: &ElfModuleView, code_size: u64, data_size: u64) -> Result<PatchLayout, ElfError> {
    if code_size == 0 || data_size == 0 {
        return Err(ElfError::EmptyLayout);
    }
    if view.load_segments.is_empty() {
        return Err(ElfError::NoHeaderSpace);
    }
    let base = view.image_base();
    let first_load = view.load_segments[0];
    let phdr_end = view.phdrs.offset + u64::from(view.phdrs.count) * PHDR_SIZE;
    let phdrs_in_first_load =
        view.phdrs.offset >= first_load.offset && phdr_end <= first_load.offset + first_load.file_size;
    let header_strategy = if phdrs_in_first_load && header_gap(view) >= RESERVED_GAP {
        HeaderStrategy::UseReservedGap
    } else {
        HeaderStrategy::RelocateProgramHeaders
    };

    let max_end = view
        .load_segments
        .iter()
        .map(|s| s.vaddr + s.mem_size)
        .max()
        .expect("non-empty");
    let code_off = page_up(view.file_bytes.len() as u64).max(page_up(max_end).wrapping_sub(base));
    let phdr_bytes = match header_strategy {
        HeaderStrategy::UseReservedGap => 0,
        HeaderStrategy::RelocateProgramHeaders => (u64::from(view.phdrs.count) + 2) * PHDR_SIZE,
    };
    let lead = (phdr_bytes + 15) & !15;
    let code_total = lead + code_size;
    let code_seg = NewSegment {
        vaddr: code_off.wrapping_add(base),
        offset: code_off,
        size: code_total,
        flags: PF_R | PF_X,
    };
    let data_off = page_up(code_off + code_total);
    let data_seg = NewSegment {
        vaddr: data_off.wrapping_add(base),
        offset: data_off,
        size: data_size,
        flags: PF_R | PF_W,
    };
    let lowest_code = view
        .load_segments
        .iter()
        .filter(|s| s.is_exec())
        .map(|s| s.vaddr)
        .min()
        .unwrap_or(first_load.vaddr);
    let far = data_seg.vaddr + data_seg.size;
    if far - lowest_code > REACH {
        return Err(ElfError::OutOfReach(far));
    }
    Ok(PatchLayout {
        code_seg,
        data_seg,
        header_strategy,
        code_start: code_seg.vaddr + lead,
    })
}
