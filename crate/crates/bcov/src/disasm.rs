//! Linear-sweep decoding of function bodies.

use std::collections::BTreeMap;

use bcov_core::InstKind;
use iced_x86::{Code, ConstantOffsets, Decoder, DecoderOptions, FlowControl, Mnemonic, OpKind};
use thiserror::Error;

use crate::elf::{ElfModuleView, FunctionDefinition};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DisasmError {
    #[error("undecodable byte at {0:#x}")]
    UndecodableByte(u64),
    #[error("function at {0:#x} is not backed by executable file bytes")]
    NotMapped(u64),
}

#[derive(Clone, Debug)]
pub struct Instruction {
    pub addr: u64,
    pub size: u32,
    pub bytes: Vec<u8>,
    pub kind: InstKind,
    pub rip_relative: bool,
    pub branch_target: Option<u64>,
    pub decoded: iced_x86::Instruction,
    pub offsets: ConstantOffsets,
}

impl Instruction {
    pub fn end(&self) -> u64 {
        self.addr + u64::from(self.size)
    }

    /// `hlt` or `ud2`: execution never continues past it.
    pub fn is_halt(&self) -> bool {
        matches!(self.decoded.mnemonic(), Mnemonic::Hlt | Mnemonic::Ud2)
    }

    /// Ends a basic block.
    pub fn is_terminator(&self) -> bool {
        self.kind != InstKind::Other || self.is_halt()
    }

    /// Control never falls through to the next instruction.
    pub fn is_barrier(&self) -> bool {
        matches!(self.kind, InstKind::Ret | InstKind::JmpDirect | InstKind::JmpIndirect) || self.is_halt()
    }

    /// Address read by a `[rip+disp]` operand.
    pub fn rip_target(&self) -> Option<u64> {
        self.rip_relative.then(|| self.decoded.ip_rel_memory_address())
    }
}

fn kind_of(inst: &iced_x86::Instruction) -> InstKind {
    match inst.flow_control() {
        FlowControl::Return => InstKind::Ret,
        FlowControl::ConditionalBranch => InstKind::CondJmp,
        FlowControl::UnconditionalBranch => InstKind::JmpDirect,
        FlowControl::IndirectBranch => InstKind::JmpIndirect,
        FlowControl::Call if inst.mnemonic() == Mnemonic::Call => InstKind::CallDirect,
        FlowControl::IndirectCall => InstKind::CallIndirect,
        _ => InstKind::Other,
    }
}

pub fn is_padding(inst: &iced_x86::Instruction) -> bool {
    matches!(inst.mnemonic(), Mnemonic::Nop | Mnemonic::Int3)
}

fn make(decoder: &Decoder<'_>, inst: iced_x86::Instruction, bytes: &[u8]) -> Instruction {
    let kind = kind_of(&inst);
    let branch_target = match inst.op0_kind() {
        OpKind::NearBranch64 | OpKind::NearBranch32 | OpKind::NearBranch16
            if matches!(kind, InstKind::CallDirect | InstKind::JmpDirect | InstKind::CondJmp) =>
        {
            Some(inst.near_branch_target())
        }
        _ => None,
    };
    Instruction {
        addr: inst.ip(),
        size: inst.len() as u32,
        bytes: bytes.to_vec(),
        kind,
        rip_relative: inst.is_ip_rel_memory_operand(),
        branch_target,
        offsets: decoder.get_constant_offsets(&inst),
        decoded: inst,
    }
}

/// Decodes one instruction at `addr` from `bytes` (which start at `addr`).
pub fn decode_one(bytes: &[u8], addr: u64) -> Result<Instruction, DisasmError> {
    let mut decoder = Decoder::with_ip(64, bytes, addr, DecoderOptions::NONE);
    let inst = decoder.decode();
    if inst.code() == Code::INVALID {
        return Err(DisasmError::UndecodableByte(addr));
    }
    Ok(make(&decoder, inst, &bytes[..inst.len()]))
}

/// Decodes `[f.start, f.end)` by linear sweep. Padding candidates (no-op
/// family or `int3` right after a barrier) past the end are decoded too, up
/// to `pad_limit` (normally the next function start); the CFG builder
/// decides which of them are padding.
pub fn decode_function(
    view: &ElfModuleView,
    f: &FunctionDefinition,
    pad_limit: u64,
) -> Result<Vec<Instruction>, DisasmError> {
    let seg = view
        .load_segments
        .iter()
        .find(|s| s.is_exec() && f.start >= s.vaddr && f.start < s.vaddr + s.file_size)
        .ok_or(DisasmError::NotMapped(f.start))?;
    let seg_end = seg.vaddr + seg.file_size;
    let body_end = f.end().min(seg_end);
    let limit = pad_limit.max(body_end).min(seg_end);
    let data = view
        .read(f.start, (limit - f.start) as usize)
        .ok_or(DisasmError::NotMapped(f.start))?;
    let mut decoder = Decoder::with_ip(64, data, f.start, DecoderOptions::NONE);
    let mut out: Vec<Instruction> = Vec::new();
    let mut after_barrier = false;
    while decoder.can_decode() {
        let pos = decoder.position();
        let addr = f.start + pos as u64;
        let inst = decoder.decode();
        let ok = inst.code() != Code::INVALID;
        let pad = ok && after_barrier && is_padding(&inst);
        if addr >= body_end || (ok && addr + inst.len() as u64 > body_end) {
            if pad && addr + inst.len() as u64 <= limit {
                out.push(make(&decoder, inst, &data[pos..pos + inst.len()]));
                continue;
            }
            if addr >= body_end {
                break;
            }
            return Err(DisasmError::UndecodableByte(addr));
        }
        if !ok {
            return Err(DisasmError::UndecodableByte(addr));
        }
        let i = make(&decoder, inst, &data[pos..pos + inst.len()]);
        if !pad {
            after_barrier = i.is_barrier();
        }
        out.push(i);
    }
    Ok(out)
}

/// Names of PLT stubs in `.plt`, `.plt.sec` and `.plt.got`, found by decoding
/// each 16-byte stub to its GOT slot.
pub fn plt_names(view: &ElfModuleView) -> BTreeMap<u64, String> {
    let got = view.got_imports();
    let mut out = BTreeMap::new();
    for name in [".plt", ".plt.sec", ".plt.got"] {
        let Some(sec) = view.section(name).filter(|s| s.has_data) else { continue };
        let Some(data) = view.read(sec.vaddr, sec.size as usize) else { continue };
        for (i, chunk) in data.chunks(16).enumerate() {
            let stub = sec.vaddr + 16 * i as u64;
            let mut decoder = Decoder::with_ip(64, chunk, stub, DecoderOptions::NONE);
            while decoder.can_decode() {
                let inst = decoder.decode();
                if inst.code() == Code::INVALID {
                    break;
                }
                if inst.flow_control() == FlowControl::IndirectBranch && inst.is_ip_rel_memory_operand() {
                    if let Some(sym) = got.get(&inst.ip_rel_memory_address()) {
                        out.insert(stub, sym.clone());
                    }
                    break;
                }
            }
        }
    }
    out
}
