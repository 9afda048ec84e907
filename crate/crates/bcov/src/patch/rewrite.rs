//! Re-encoding of original instructions at trampoline addresses.
//!
//! Every form emitted here has a size that does not depend on addresses, so
//! trampolines can be sized before the new segments are placed.

use bcov_core::InstKind;
use iced_x86::{ConditionCode, Mnemonic, OpKind, Register};
use thiserror::Error;

use crate::disasm::Instruction;

/// `mov byte [rip+disp32], 1`.
pub const STORE_SIZE: usize = 7;
pub const JMP_SIZE: usize = 5;

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum RewriteError {
    #[error("{addr:#x}: target {target:#x} is out of rel32 reach from {from:#x}")]
    Unencodable { addr: u64, from: u64, target: u64 },
    #[error("{0:#x}: instruction cannot be relocated")]
    Unrelocatable(u64),
}

fn full(r: Register) -> Register {
    r.full_register()
}

fn is_loop_family(m: Mnemonic) -> bool {
    matches!(
        m,
        Mnemonic::Loop | Mnemonic::Loope | Mnemonic::Loopne | Mnemonic::Jrcxz | Mnemonic::Jecxz
    )
}

/// Byte index of the opcode, past legacy prefixes and REX.
fn opcode_index(bytes: &[u8]) -> usize {
    let mut i = 0;
    while i < bytes.len()
        && matches!(
            bytes[i],
            0x26 | 0x2e | 0x36 | 0x3e | 0x64 | 0x65 | 0x66 | 0x67 | 0xf0 | 0xf2 | 0xf3
        )
    {
        i += 1;
    }
    if i < bytes.len() && (0x40..=0x4f).contains(&bytes[i]) {
        i += 1;
    }
    i
}

/// Whether `inst` can be moved into a trampoline.
pub fn relocatable(inst: &Instruction) -> bool {
    let d = &inst.decoded;
    match inst.kind {
        InstKind::CondJmp => d.condition_code() != ConditionCode::None || is_loop_family(d.mnemonic()),
        InstKind::CallIndirect => {
            let i = opcode_index(&inst.bytes);
            let ok_opcode =
                inst.bytes.get(i) == Some(&0xff) && inst.bytes.get(i + 1).is_some_and(|m| (m >> 3) & 7 == 2);
            let reg_rsp = d.op0_kind() == OpKind::Register && full(d.op0_register()) == Register::RSP;
            ok_opcode && !reg_rsp
        }
        InstKind::CallDirect | InstKind::JmpDirect => inst.branch_target.is_some(),
        _ => !matches!(
            d.op0_kind(),
            OpKind::NearBranch16 | OpKind::NearBranch32 | OpKind::NearBranch64
        ),
    }
}

/// Whether `inst` reads or writes the stack pointer, explicitly or not.
pub fn uses_stack_pointer(inst: &Instruction) -> bool {
    let mut factory = iced_x86::InstructionInfoFactory::new();
    let info = factory.info(&inst.decoded);
    info.used_registers().iter().any(|u| full(u.register()) == Register::RSP)
        || info
            .used_memory()
            .iter()
            .any(|m| full(m.base()) == Register::RSP || full(m.index()) == Register::RSP)
}

/// Append-only code buffer that knows the address of its next byte.
#[derive(Clone, Debug)]
pub struct Asm {
    pub addr: u64,
    pub bytes: Vec<u8>,
    /// Report out-of-reach operands instead of encoding zero.
    strict: bool,
    /// Branch targets replaced in relocated code, (original, new).
    redirects: Vec<(u64, u64)>,
}

impl Asm {
    pub fn new(addr: u64, strict: bool) -> Self {
        Asm {
            addr,
            bytes: Vec::new(),
            strict,
            redirects: Vec::new(),
        }
    }

    /// Relocated branches and fallthroughs to `from` go to `to` instead.
    pub fn with_redirects(mut self, redirects: Vec<(u64, u64)>) -> Self {
        self.redirects = redirects;
        self
    }

    /// Where relocated control flow to `target` should go.
    pub fn redirected(&self, target: u64) -> u64 {
        self.redirects
            .iter()
            .find(|&&(from, _)| from == target)
            .map_or(target, |&(_, to)| to)
    }

    pub fn here(&self) -> u64 {
        self.addr + self.bytes.len() as u64
    }

    fn rel32(&self, owner: u64, end: u64, target: u64) -> Result<i32, RewriteError> {
        match i32::try_from(target.wrapping_sub(end) as i64) {
            Ok(v) => Ok(v),
            Err(_) if !self.strict => Ok(0),
            Err(_) => Err(RewriteError::Unencodable {
                addr: owner,
                from: end,
                target,
            }),
        }
    }

    pub fn raw(&mut self, b: &[u8]) {
        self.bytes.extend_from_slice(b);
    }

    fn branch(&mut self, owner: u64, opcode: &[u8], target: u64) -> Result<(), RewriteError> {
        let end = self.here() + opcode.len() as u64 + 4;
        let rel = self.rel32(owner, end, target)?;
        self.raw(opcode);
        self.raw(&rel.to_le_bytes());
        Ok(())
    }

    pub fn jmp(&mut self, owner: u64, target: u64) -> Result<(), RewriteError> {
        self.branch(owner, &[0xe9], target)
    }

    pub fn call(&mut self, owner: u64, target: u64) -> Result<(), RewriteError> {
        self.branch(owner, &[0xe8], target)
    }

    /// `j<cc> rel32`; `cc` is the x86 condition nibble.
    pub fn jcc(&mut self, owner: u64, cc: u8, target: u64) -> Result<(), RewriteError> {
        self.branch(owner, &[0x0f, 0x80 | cc], target)
    }

    /// `mov byte [rip+disp32], 1` setting the byte at `slot`.
    pub fn store(&mut self, slot: u64) -> Result<(), RewriteError> {
        let end = self.here() + STORE_SIZE as u64;
        let rel = self.rel32(slot, end, slot)?;
        self.raw(&[0xc6, 0x05]);
        self.raw(&rel.to_le_bytes());
        self.raw(&[0x01]);
        Ok(())
    }

    /// `sub qword [rsp], imm`, 5 bytes with an 8-bit immediate, 8 otherwise.
    pub fn sub_stack_top(&mut self, imm: i32) {
        match i8::try_from(imm) {
            Ok(b) => self.raw(&[0x48, 0x83, 0x2c, 0x24, b as u8]),
            Err(_) => {
                self.raw(&[0x48, 0x81, 0x2c, 0x24]);
                self.raw(&imm.to_le_bytes());
            }
        }
    }

    /// Copies `inst`, fixing a `[rip+disp]` operand for the new address.
    fn copy(&mut self, inst: &Instruction) -> Result<(), RewriteError> {
        let mut b = inst.bytes.clone();
        if inst.rip_relative {
            let off = inst.offsets.displacement_offset();
            let end = self.here() + b.len() as u64;
            let rel = self.rel32(inst.addr, end, inst.decoded.ip_rel_memory_address())?;
            b[off..off + 4].copy_from_slice(&rel.to_le_bytes());
        }
        self.raw(&b);
        Ok(())
    }

    /// Re-encodes an indirect `call r/m64` as `jmp r/m64` for use after the
    /// return address has been pushed; stack-relative operands move by 8.
    pub fn call_as_jmp(&mut self, inst: &Instruction) -> Result<(), RewriteError> {
        if !relocatable(inst) || inst.kind != InstKind::CallIndirect {
            return Err(RewriteError::Unrelocatable(inst.addr));
        }
        let d = &inst.decoded;
        let b = &inst.bytes;
        let op = opcode_index(b);
        let modrm = b[op + 1];
        let mut out = b[..=op].to_vec();
        out.push((modrm & 0xc7) | (4 << 3));
        let stack_based = d.op0_kind() == OpKind::Memory && full(d.memory_base()) == Register::RSP;
        if stack_based {
            // rsp as a base always needs a SIB byte
            let sib = b[op + 2];
            let disp_at = op + 3;
            let (disp, rest) = match modrm >> 6 {
                0 => (0i64, disp_at),
                1 => (i64::from(b[disp_at] as i8), disp_at + 1),
                _ => (
                    i64::from(i32::from_le_bytes(b[disp_at..disp_at + 4].try_into().expect("4 bytes"))),
                    disp_at + 4,
                ),
            };
            let disp = disp + 8;
            let last = out.len() - 1;
            match i8::try_from(disp) {
                Ok(d8) => {
                    out[last] = (out[last] & 0x3f) | 0x40;
                    out.push(sib);
                    out.push(d8 as u8);
                }
                Err(_) => {
                    let d32 = i32::try_from(disp).map_err(|_| RewriteError::Unrelocatable(inst.addr))?;
                    out[last] = (out[last] & 0x3f) | 0x80;
                    out.push(sib);
                    out.extend_from_slice(&d32.to_le_bytes());
                }
            }
            out.extend_from_slice(&b[rest..]);
        } else {
            out.extend_from_slice(&b[op + 2..]);
            if inst.rip_relative {
                let off = inst.offsets.displacement_offset();
                let end = self.here() + out.len() as u64;
                let rel = self.rel32(inst.addr, end, d.ip_rel_memory_address())?;
                out[off..off + 4].copy_from_slice(&rel.to_le_bytes());
            }
        }
        self.raw(&out);
        Ok(())
    }

    /// Emits `inst` relocated to the current address with identical effect.
    ///
    /// Conditional branches become `j<cc> rel32` plus a `jmp` to the
    /// original fallthrough. Calls become `call L; L: sub qword [rsp], imm32;
    /// jmp target`, so the callee returns to the original return address.
    pub fn relocate(&mut self, inst: &Instruction) -> Result<(), RewriteError> {
        if !relocatable(inst) {
            return Err(RewriteError::Unrelocatable(inst.addr));
        }
        let d = &inst.decoded;
        match inst.kind {
            InstKind::JmpDirect => self.jmp(inst.addr, self.redirected(inst.branch_target.expect("checked"))),
            InstKind::CondJmp => {
                let target = self.redirected(inst.branch_target.expect("conditional branches are direct"));
                let cc = d.condition_code();
                if cc != ConditionCode::None {
                    self.jcc(inst.addr, cc as u8 - 1, target)?;
                } else {
                    // loop/jrcxz only have rel8: hop over a jmp to the fallthrough
                    let mut b = inst.bytes.clone();
                    *b.last_mut().expect("non-empty") = 2;
                    self.raw(&b);
                    self.raw(&[0xeb, JMP_SIZE as u8]);
                    self.jmp(inst.addr, target)?;
                }
                self.jmp(inst.addr, self.redirected(inst.end()))
            }
            InstKind::CallDirect | InstKind::CallIndirect => {
                self.raw(&[0xe8, 0, 0, 0, 0]);
                let pushed = self.here();
                let imm = i32::try_from(pushed.wrapping_sub(inst.end()) as i64);
                let imm = match imm {
                    Ok(v) => v,
                    Err(_) if !self.strict => 0,
                    Err(_) => {
                        return Err(RewriteError::Unencodable {
                            addr: inst.addr,
                            from: pushed,
                            target: inst.end(),
                        })
                    }
                };
                self.raw(&[0x48, 0x81, 0x2c, 0x24]);
                self.raw(&imm.to_le_bytes());
                match inst.kind {
                    InstKind::CallDirect => self.jmp(inst.addr, inst.branch_target.expect("checked")),
                    _ => self.call_as_jmp(inst),
                }
            }
            _ => self.copy(inst),
        }
    }
}

/// Relocates one instruction to `new_addr`.
pub fn rewrite_instruction(inst: &Instruction, new_addr: u64) -> Result<Vec<u8>, RewriteError> {
    let mut asm = Asm::new(new_addr, true);
    asm.relocate(inst)?;
    Ok(asm.bytes)
}

/// The 5-byte `jmp rel32` or `call rel32` at `from` reaching `to`.
pub fn detour(from: u64, to: u64, call: bool) -> Result<[u8; 5], RewriteError> {
    let mut asm = Asm::new(from, true);
    if call {
        asm.call(from, to)?;
    } else {
        asm.jmp(from, to)?;
    }
    Ok(asm.bytes.try_into().expect("5 bytes"))
}

/// `jmp rel8` at `from` reaching `to`.
pub fn short_detour(from: u64, to: u64) -> Option<[u8; 2]> {
    let rel = i8::try_from(to.wrapping_sub(from + 2) as i64).ok()?;
    Some([0xeb, rel as u8])
}
