//! Concrete micro-execution of slice instructions.
//!
//! Supports the integer subset that switch and computed-goto dispatch code
//! uses. Memory is the module image (with RELATIVE relocations applied at
//! link-time addresses) plus zero pages allocated on demand.

use std::collections::HashMap;
use std::sync::Arc;

use iced_x86::{ConditionCode, Instruction, Mnemonic, OpKind, Register};

use crate::elf::ElfModuleView;

const PAGE: u64 = 0x1000;
/// Scratch stack pointer given to every trial.
pub const STACK_TOP: u64 = 0x7ffe_0000_0000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmuError {
    Unsupported(Mnemonic),
    BadOperand,
}

/// Read-only page image of a module.
#[derive(Debug, Default)]
pub struct Image {
    pages: HashMap<u64, Box<[u8]>>,
}

impl Image {
    pub fn new(view: &ElfModuleView) -> Self {
        let mut img = Image::default();
        for seg in &view.load_segments {
            let data = view
                .file_bytes
                .get(seg.offset as usize..(seg.offset + seg.file_size) as usize)
                .unwrap_or(&[]);
            for (i, &b) in data.iter().enumerate() {
                img.poke(seg.vaddr + i as u64, b);
            }
        }
        for r in view.relative_relocs().values() {
            for (i, b) in (r.addend as u64).to_le_bytes().into_iter().enumerate() {
                img.poke(r.r_offset + i as u64, b);
            }
        }
        img
    }

    fn poke(&mut self, addr: u64, b: u8) {
        let page = self
            .pages
            .entry(addr & !(PAGE - 1))
            .or_insert_with(|| vec![0u8; PAGE as usize].into_boxed_slice());
        page[(addr & (PAGE - 1)) as usize] = b;
    }

    pub fn byte(&self, addr: u64) -> u8 {
        self.pages
            .get(&(addr & !(PAGE - 1)))
            .map_or(0, |p| p[(addr & (PAGE - 1)) as usize])
    }

    pub fn read(&self, addr: u64, size: u32) -> u64 {
        let mut v = 0u64;
        for i in 0..size {
            v |= u64::from(self.byte(addr.wrapping_add(u64::from(i)))) << (8 * i);
        }
        v
    }
}

#[derive(Clone, Copy, Debug, Default)]
struct Flags {
    cf: bool,
    zf: bool,
    sf: bool,
    of: bool,
    pf: bool,
}

/// Memory read performed by the last executed instruction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MemRead {
    pub addr: u64,
    pub size: u32,
    pub value: u64,
}

pub struct Machine {
    image: Arc<Image>,
    overlay: HashMap<u64, Box<[u8]>>,
    regs: [u64; 16],
    flags: Flags,
    pub last_read: Option<MemRead>,
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

fn reg_index(r: Register) -> Option<usize> {
    let full = r.full_register();
    let i = (full as u32).wrapping_sub(Register::RAX as u32) as usize;
    (i < 16).then_some(i)
}

fn is_high8(r: Register) -> bool {
    matches!(r, Register::AH | Register::BH | Register::CH | Register::DH)
}

fn is_cmovcc(m: Mnemonic) -> bool {
    use Mnemonic::*;
    matches!(
        m,
        Cmova | Cmovae | Cmovb | Cmovbe | Cmove | Cmovne | Cmovg | Cmovge | Cmovl | Cmovle | Cmovs | Cmovns | Cmovo
            | Cmovno | Cmovp | Cmovnp
    )
}

fn is_setcc(m: Mnemonic) -> bool {
    use Mnemonic::*;
    matches!(
        m,
        Seta | Setae | Setb | Setbe | Sete | Setne | Setg | Setge | Setl | Setle | Sets | Setns | Seto | Setno | Setp
            | Setnp
    )
}

impl Machine {
    pub fn new(image: Arc<Image>) -> Self {
        let mut m = Machine {
            image,
            overlay: HashMap::new(),
            regs: [0; 16],
            flags: Flags::default(),
            last_read: None,
        };
        m.regs[4] = STACK_TOP;
        m.regs[5] = STACK_TOP;
        m
    }

    pub fn byte(&self, addr: u64) -> u8 {
        match self.overlay.get(&(addr & !(PAGE - 1))) {
            Some(p) => p[(addr & (PAGE - 1)) as usize],
            None => self.image.byte(addr),
        }
    }

    pub fn load(&self, addr: u64, size: u32) -> u64 {
        let mut v = 0u64;
        for i in 0..size {
            v |= u64::from(self.byte(addr.wrapping_add(u64::from(i)))) << (8 * i);
        }
        v
    }

    pub fn store(&mut self, addr: u64, size: u32, value: u64) {
        for i in 0..size {
            let a = addr.wrapping_add(u64::from(i));
            let base = a & !(PAGE - 1);
            if !self.overlay.contains_key(&base) {
                let copy = match self.image.pages.get(&base) {
                    Some(p) => p.clone(),
                    None => vec![0u8; PAGE as usize].into_boxed_slice(),
                };
                self.overlay.insert(base, copy);
            }
            let page = self.overlay.get_mut(&base).expect("inserted");
            page[(a & (PAGE - 1)) as usize] = (value >> (8 * i)) as u8;
        }
    }

    pub fn reg(&self, r: Register) -> u64 {
        let Some(i) = reg_index(r) else { return 0 };
        let v = self.regs[i];
        if is_high8(r) {
            return (v >> 8) & 0xff;
        }
        v & mask(r.size() as u32 * 8)
    }

    pub fn set_reg(&mut self, r: Register, value: u64) {
        let Some(i) = reg_index(r) else { return };
        let old = self.regs[i];
        self.regs[i] = if is_high8(r) {
            (old & !0xff00) | ((value & 0xff) << 8)
        } else {
            match r.size() {
                1 => (old & !0xff) | (value & 0xff),
                2 => (old & !0xffff) | (value & 0xffff),
                4 => value & 0xffff_ffff,
                _ => value,
            }
        };
    }

    pub fn effective_address(&self, inst: &Instruction) -> u64 {
        if inst.is_ip_rel_memory_operand() {
            return inst.ip_rel_memory_address();
        }
        let mut ea = inst.memory_displacement64();
        if inst.memory_base() != Register::None {
            ea = ea.wrapping_add(self.reg(inst.memory_base()));
        }
        if inst.memory_index() != Register::None {
            ea = ea.wrapping_add(self.reg(inst.memory_index()).wrapping_mul(u64::from(inst.memory_index_scale())));
        }
        ea
    }

    fn op_bits(inst: &Instruction, op: u32) -> u32 {
        match inst.op_kind(op) {
            OpKind::Register => inst.op_register(op).size() as u32 * 8,
            OpKind::Memory => inst.memory_size().size() as u32 * 8,
            OpKind::Immediate8 => 8,
            OpKind::Immediate16 => 16,
            OpKind::Immediate32 | OpKind::Immediate8to32 => 32,
            _ => 64,
        }
    }

    fn read_op(&mut self, inst: &Instruction, op: u32) -> Result<u64, EmuError> {
        match inst.op_kind(op) {
            OpKind::Register => Ok(self.reg(inst.op_register(op))),
            OpKind::Memory => {
                let addr = self.effective_address(inst);
                let size = inst.memory_size().size() as u32;
                let value = self.load(addr, size);
                self.last_read = Some(MemRead { addr, size, value });
                Ok(value)
            }
            OpKind::Immediate8
            | OpKind::Immediate16
            | OpKind::Immediate32
            | OpKind::Immediate64
            | OpKind::Immediate8to16
            | OpKind::Immediate8to32
            | OpKind::Immediate8to64
            | OpKind::Immediate32to64 => Ok(inst.immediate(op)),
            _ => Err(EmuError::BadOperand),
        }
    }

    fn write_op(&mut self, inst: &Instruction, op: u32, value: u64) -> Result<(), EmuError> {
        match inst.op_kind(op) {
            OpKind::Register => {
                self.set_reg(inst.op_register(op), value);
                Ok(())
            }
            OpKind::Memory => {
                let addr = self.effective_address(inst);
                self.store(addr, inst.memory_size().size() as u32, value);
                Ok(())
            }
            _ => Err(EmuError::BadOperand),
        }
    }

    fn set_logic_flags(&mut self, r: u64, bits: u32) {
        let r = r & mask(bits);
        self.flags = Flags {
            cf: false,
            of: false,
            zf: r == 0,
            sf: (r >> (bits - 1)) & 1 == 1,
            pf: (r as u8).count_ones() % 2 == 0,
        };
    }

    fn set_add_flags(&mut self, a: u64, b: u64, r: u64, bits: u32, carry_in: bool) {
        let m = mask(bits);
        let (a, b, r) = (a & m, b & m, r & m);
        let wide = u128::from(a) + u128::from(b) + u128::from(carry_in);
        let sign = |v: u64| (v >> (bits - 1)) & 1 == 1;
        self.flags = Flags {
            cf: wide > u128::from(m),
            of: sign(a) == sign(b) && sign(r) != sign(a),
            zf: r == 0,
            sf: sign(r),
            pf: (r as u8).count_ones() % 2 == 0,
        };
    }

    fn set_sub_flags(&mut self, a: u64, b: u64, r: u64, bits: u32) {
        let m = mask(bits);
        let (a, b, r) = (a & m, b & m, r & m);
        let sign = |v: u64| (v >> (bits - 1)) & 1 == 1;
        self.flags = Flags {
            cf: a < b,
            of: sign(a) != sign(b) && sign(r) != sign(a),
            zf: r == 0,
            sf: sign(r),
            pf: (r as u8).count_ones() % 2 == 0,
        };
    }

    pub fn condition(&self, cc: ConditionCode) -> bool {
        let f = self.flags;
        match cc {
            ConditionCode::o => f.of,
            ConditionCode::no => !f.of,
            ConditionCode::b => f.cf,
            ConditionCode::ae => !f.cf,
            ConditionCode::e => f.zf,
            ConditionCode::ne => !f.zf,
            ConditionCode::be => f.cf || f.zf,
            ConditionCode::a => !f.cf && !f.zf,
            ConditionCode::s => f.sf,
            ConditionCode::ns => !f.sf,
            ConditionCode::p => f.pf,
            ConditionCode::np => !f.pf,
            ConditionCode::l => f.sf != f.of,
            ConditionCode::ge => f.sf == f.of,
            ConditionCode::le => f.zf || f.sf != f.of,
            ConditionCode::g => !f.zf && f.sf == f.of,
            ConditionCode::None => true,
        }
    }

    /// Executes one non-branching instruction.
    pub fn step(&mut self, inst: &Instruction) -> Result<(), EmuError> {
        self.last_read = None;
        let bits = Self::op_bits(inst, 0);
        match inst.mnemonic() {
            Mnemonic::Nop | Mnemonic::Endbr64 => {}
            Mnemonic::Mov => {
                let v = self.read_op(inst, 1)?;
                self.write_op(inst, 0, v)?;
            }
            Mnemonic::Movzx => {
                let v = self.read_op(inst, 1)?;
                self.write_op(inst, 0, v)?;
            }
            Mnemonic::Movsx | Mnemonic::Movsxd => {
                let src_bits = Self::op_bits(inst, 1);
                let v = sext(self.read_op(inst, 1)?, src_bits);
                self.write_op(inst, 0, v & mask(bits))?;
            }
            Mnemonic::Lea => {
                let v = self.effective_address(inst);
                self.write_op(inst, 0, v & mask(bits))?;
            }
            Mnemonic::Cdqe => self.set_reg(Register::RAX, sext(self.reg(Register::EAX), 32)),
            Mnemonic::Cwde => self.set_reg(Register::EAX, sext(self.reg(Register::AX), 16)),
            Mnemonic::Cdq => {
                let hi = if self.reg(Register::EAX) >> 31 & 1 == 1 { u64::MAX } else { 0 };
                self.set_reg(Register::EDX, hi);
            }
            Mnemonic::Cqo => {
                let hi = if self.reg(Register::RAX) >> 63 == 1 { u64::MAX } else { 0 };
                self.set_reg(Register::RDX, hi);
            }
            Mnemonic::Add | Mnemonic::Adc => {
                let a = self.read_op(inst, 0)?;
                let b = self.read_op(inst, 1)? & mask(bits);
                let c = inst.mnemonic() == Mnemonic::Adc && self.flags.cf;
                let r = a.wrapping_add(b).wrapping_add(u64::from(c)) & mask(bits);
                self.set_add_flags(a, b, r, bits, c);
                self.write_op(inst, 0, r)?;
            }
            Mnemonic::Sub | Mnemonic::Cmp => {
                let a = self.read_op(inst, 0)?;
                let b = self.read_op(inst, 1)? & mask(bits);
                let r = a.wrapping_sub(b) & mask(bits);
                self.set_sub_flags(a, b, r, bits);
                if inst.mnemonic() == Mnemonic::Sub {
                    self.write_op(inst, 0, r)?;
                }
            }
            Mnemonic::Inc | Mnemonic::Dec => {
                let a = self.read_op(inst, 0)?;
                let cf = self.flags.cf;
                let r = if inst.mnemonic() == Mnemonic::Inc {
                    let r = a.wrapping_add(1) & mask(bits);
                    self.set_add_flags(a, 1, r, bits, false);
                    r
                } else {
                    let r = a.wrapping_sub(1) & mask(bits);
                    self.set_sub_flags(a, 1, r, bits);
                    r
                };
                self.flags.cf = cf;
                self.write_op(inst, 0, r)?;
            }
            Mnemonic::Neg => {
                let a = self.read_op(inst, 0)?;
                let r = 0u64.wrapping_sub(a) & mask(bits);
                self.set_sub_flags(0, a, r, bits);
                self.write_op(inst, 0, r)?;
            }
            Mnemonic::Not => {
                let a = self.read_op(inst, 0)?;
                self.write_op(inst, 0, !a & mask(bits))?;
            }
            Mnemonic::And | Mnemonic::Or | Mnemonic::Xor | Mnemonic::Test => {
                let a = self.read_op(inst, 0)?;
                let b = self.read_op(inst, 1)? & mask(bits);
                let r = match inst.mnemonic() {
                    Mnemonic::Or => a | b,
                    Mnemonic::Xor => a ^ b,
                    _ => a & b,
                } & mask(bits);
                self.set_logic_flags(r, bits);
                if inst.mnemonic() != Mnemonic::Test {
                    self.write_op(inst, 0, r)?;
                }
            }
            Mnemonic::Shl | Mnemonic::Shr | Mnemonic::Sar => {
                let a = self.read_op(inst, 0)?;
                let count = if inst.op_count() > 1 { self.read_op(inst, 1)? } else { 1 };
                let count = (count & if bits == 64 { 63 } else { 31 }) as u32;
                if count != 0 {
                    let r = match inst.mnemonic() {
                        Mnemonic::Shl => a.checked_shl(count).unwrap_or(0),
                        Mnemonic::Shr => (a & mask(bits)).checked_shr(count).unwrap_or(0),
                        _ => (sext(a, bits) as i64).checked_shr(count).unwrap_or(if sext(a, bits) >> 63 == 1 { -1 } else { 0 }) as u64,
                    } & mask(bits);
                    self.set_logic_flags(r, bits);
                    self.write_op(inst, 0, r)?;
                }
            }
            Mnemonic::Imul if inst.op_count() >= 2 => {
                let (a, b) = if inst.op_count() == 3 {
                    (self.read_op(inst, 1)?, self.read_op(inst, 2)?)
                } else {
                    (self.read_op(inst, 0)?, self.read_op(inst, 1)?)
                };
                let wide = i128::from(sext(a, bits) as i64) * i128::from(sext(b, bits) as i64);
                let r = (wide as u64) & mask(bits);
                let overflow = i128::from(sext(r, bits) as i64) != wide;
                self.flags.cf = overflow;
                self.flags.of = overflow;
                self.write_op(inst, 0, r)?;
            }
            Mnemonic::Push => {
                let v = self.read_op(inst, 0)?;
                let sp = self.reg(Register::RSP).wrapping_sub(8);
                self.set_reg(Register::RSP, sp);
                self.store(sp, 8, v);
            }
            Mnemonic::Pop => {
                let sp = self.reg(Register::RSP);
                let v = self.load(sp, 8);
                self.set_reg(Register::RSP, sp.wrapping_add(8));
                self.write_op(inst, 0, v)?;
            }
            Mnemonic::Xchg => {
                let a = self.read_op(inst, 0)?;
                let b = self.read_op(inst, 1)?;
                self.write_op(inst, 0, b)?;
                self.write_op(inst, 1, a)?;
            }
            m if is_cmovcc(m) => {
                let v = self.read_op(inst, 1)?;
                if self.condition(inst.condition_code()) {
                    self.write_op(inst, 0, v)?;
                } else if bits == 32 {
                    // 32-bit cmov zero-extends even when not taken
                    let old = self.read_op(inst, 0)?;
                    self.write_op(inst, 0, old)?;
                }
            }
            m if is_setcc(m) => {
                let v = u64::from(self.condition(inst.condition_code()));
                self.write_op(inst, 0, v)?;
            }
            m => return Err(EmuError::Unsupported(m)),
        }
        Ok(())
    }

    /// Target of an indirect jmp, reading memory for `jmp [mem]`.
    pub fn jump_target(&mut self, inst: &Instruction) -> Result<u64, EmuError> {
        self.last_read = None;
        self.read_op(inst, 0)
    }
}
