//! Exhaustive-emulation oracle for jump tables, independent of the library's
//! slicing and micro-execution. For every indirect jmp in a function it
//! finds the closest bounding instruction before it (`cmp r, imm` consumed
//! by an unsigned jcc, or `and r, imm`), then emulates the function's
//! instructions in address order once per admitted index value, forcing
//! the index register at its last definition before the bound, and records
//! where the jmp goes.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use iced_x86::{Code, ConditionCode, Decoder, DecoderOptions, Instruction, Mnemonic, OpKind, Register};
use object::{Object, ObjectSegment, ObjectSymbol, RelocationFlags};

pub struct Image {
    bytes: BTreeMap<u64, u8>,
    pub symbols: Vec<(String, u64, u64)>,
}

impl Image {
    pub fn load(path: &Path) -> Image {
        let data = std::fs::read(path).expect("read module");
        let file = object::File::parse(&*data).expect("parse module");
        let mut bytes = BTreeMap::new();
        for seg in file.segments() {
            let content = seg.data().expect("segment data");
            for (i, &b) in content.iter().enumerate() {
                bytes.insert(seg.address() + i as u64, b);
            }
        }
        if let Some(relocs) = file.dynamic_relocations() {
            for (off, r) in relocs {
                if let RelocationFlags::Elf { r_type } = r.flags() {
                    if r_type == object::elf::R_X86_64_RELATIVE {
                        for (i, b) in (r.addend() as u64).to_le_bytes().into_iter().enumerate() {
                            bytes.insert(off + i as u64, b);
                        }
                    }
                }
            }
        }
        let mut symbols: Vec<(String, u64, u64)> = file
            .symbols()
            .chain(file.dynamic_symbols())
            .filter(|s| s.kind() == object::SymbolKind::Text && s.size() > 0)
            .filter_map(|s| Some((s.name().ok()?.to_string(), s.address(), s.size())))
            .collect();
        symbols.sort_by_key(|s| s.1);
        symbols.dedup_by_key(|s| s.1);
        Image { bytes, symbols }
    }

    pub fn function(&self, name: &str) -> Option<(u64, u64)> {
        self.symbols.iter().find(|s| s.0 == name).map(|s| (s.1, s.2))
    }

    fn read(&self, overlay: &HashMap<u64, u8>, addr: u64, size: usize) -> u64 {
        let mut v = 0u64;
        for i in 0..size {
            let a = addr.wrapping_add(i as u64);
            let b = overlay.get(&a).or_else(|| self.bytes.get(&a)).copied().unwrap_or(0);
            v |= u64::from(b) << (8 * i);
        }
        v
    }

    pub fn decode(&self, start: u64, size: u64) -> Vec<Instruction> {
        let code: Vec<u8> = (start..start + size).map(|a| self.bytes.get(&a).copied().unwrap_or(0)).collect();
        let mut d = Decoder::with_ip(64, &code, start, DecoderOptions::NONE);
        let mut out = Vec::new();
        while d.can_decode() {
            out.push(d.decode());
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OracleTable {
    pub jmp_addr: u64,
    /// Target for each admitted index value, in index order.
    pub entries: Vec<u64>,
}

struct Bound {
    /// Instruction after which the index is forced; `None` forces it on entry.
    force_after: Option<usize>,
    reg: Register,
    count: u64,
}

fn find_bound(insts: &[Instruction], jmp: usize) -> Option<Bound> {
    for i in (0..jmp).rev() {
        let ins = &insts[i];
        let imm_op = ins.op_count() == 2 && ins.op0_kind() == OpKind::Register && is_imm(ins.op1_kind());
        if ins.mnemonic() == Mnemonic::And && imm_op {
            let mask = ins.immediate(1) & size_mask(ins.op0_register());
            return ((mask + 1).is_power_of_two()).then_some(Bound {
                force_after: Some(i),
                reg: ins.op0_register(),
                count: mask + 1,
            });
        }
        if ins.mnemonic() == Mnemonic::Cmp && imm_op {
            // the consuming jcc may follow after flag-preserving instructions
            let jcc = insts[i + 1..jmp].iter().find(|n| n.rflags_modified() != 0 || n.condition_code() != ConditionCode::None)?;
            let imm = ins.immediate(1) & size_mask(ins.op0_register());
            let count = match jcc.condition_code() {
                ConditionCode::a | ConditionCode::be => imm + 1,
                ConditionCode::ae | ConditionCode::b => imm,
                _ => continue,
            };
            let reg = ins.op0_register();
            let def = (0..i).rev().find(|&k| writes(&insts[k], reg));
            return Some(Bound {
                force_after: def,
                reg,
                count,
            });
        }
    }
    None
}

fn writes(ins: &Instruction, reg: Register) -> bool {
    ins.op_count() > 0
        && ins.op0_kind() == OpKind::Register
        && ins.op0_register().full_register() == reg.full_register()
        && !matches!(ins.mnemonic(), Mnemonic::Cmp | Mnemonic::Test | Mnemonic::Push)
}

fn is_imm(k: OpKind) -> bool {
    matches!(
        k,
        OpKind::Immediate8 | OpKind::Immediate8to32 | OpKind::Immediate8to64 | OpKind::Immediate32 | OpKind::Immediate32to64
    )
}

fn size_mask(r: Register) -> u64 {
    match r.size() {
        8 => u64::MAX,
        n => (1u64 << (8 * n)) - 1,
    }
}

struct Machine<'a> {
    image: &'a Image,
    regs: HashMap<Register, u64>,
    mem: HashMap<u64, u8>,
}

impl Machine<'_> {
    fn get(&self, r: Register) -> u64 {
        if r == Register::RIP || r == Register::None {
            return 0;
        }
        let full = self.regs.get(&r.full_register()).copied().unwrap_or(0);
        if matches!(r, Register::AH | Register::CH | Register::DH | Register::BH) {
            return (full >> 8) & 0xff;
        }
        full & size_mask(r)
    }

    fn set(&mut self, r: Register, v: u64) {
        let full = r.full_register();
        let old = self.regs.get(&full).copied().unwrap_or(0);
        let new = if matches!(r, Register::AH | Register::CH | Register::DH | Register::BH) {
            (old & !0xff00) | ((v & 0xff) << 8)
        } else {
            match r.size() {
                8 => v,
                4 => v & 0xffff_ffff,
                n => {
                    let m = size_mask(r);
                    let _ = n;
                    (old & !m) | (v & m)
                }
            }
        };
        self.regs.insert(full, new);
    }

    fn addr(&self, ins: &Instruction) -> u64 {
        if ins.is_ip_rel_memory_operand() {
            return ins.ip_rel_memory_address();
        }
        self.get(ins.memory_base())
            .wrapping_add(self.get(ins.memory_index()).wrapping_mul(u64::from(ins.memory_index_scale())))
            .wrapping_add(ins.memory_displacement64())
    }

    fn operand(&self, ins: &Instruction, i: u32) -> u64 {
        match ins.op_kind(i) {
            OpKind::Register => self.get(ins.op_register(i)),
            OpKind::Memory => self.image.read(&self.mem, self.addr(ins), ins.memory_size().size()),
            k if is_imm(k) => ins.immediate(i),
            _ => 0,
        }
    }

    fn write(&mut self, ins: &Instruction, v: u64) {
        match ins.op0_kind() {
            OpKind::Register => self.set(ins.op0_register(), v),
            OpKind::Memory => {
                let a = self.addr(ins);
                for i in 0..ins.memory_size().size() {
                    self.mem.insert(a.wrapping_add(i as u64), (v >> (8 * i)) as u8);
                }
            }
            _ => {}
        }
    }

    fn step(&mut self, ins: &Instruction) {
        let sext = |v: u64, bytes: usize| -> u64 {
            let shift = 64 - 8 * bytes as u32;
            (((v << shift) as i64) >> shift) as u64
        };
        match ins.mnemonic() {
            Mnemonic::Mov => {
                let v = self.operand(ins, 1);
                self.write(ins, v)
            }
            Mnemonic::Movzx => {
                let v = self.operand(ins, 1);
                self.write(ins, v)
            }
            Mnemonic::Movsx | Mnemonic::Movsxd => {
                let src = match ins.op1_kind() {
                    OpKind::Memory => ins.memory_size().size(),
                    _ => ins.op1_register().size(),
                };
                let v = sext(self.operand(ins, 1), src);
                self.write(ins, v)
            }
            Mnemonic::Cdqe => {
                let v = sext(self.get(Register::EAX), 4);
                self.set(Register::RAX, v)
            }
            Mnemonic::Lea => {
                let a = self.addr(ins);
                self.write(ins, a)
            }
            Mnemonic::Add | Mnemonic::Sub | Mnemonic::And | Mnemonic::Or | Mnemonic::Xor | Mnemonic::Shl | Mnemonic::Shr => {
                let a = self.operand(ins, 0);
                let b = self.operand(ins, 1);
                let v = match ins.mnemonic() {
                    Mnemonic::Add => a.wrapping_add(b),
                    Mnemonic::Sub => a.wrapping_sub(b),
                    Mnemonic::And => a & b,
                    Mnemonic::Or => a | b,
                    Mnemonic::Xor if ins.op0_kind() == OpKind::Register && ins.op0_register() == ins.op1_register() => 0,
                    Mnemonic::Xor => a ^ b,
                    Mnemonic::Shl => a.wrapping_shl(b as u32 & 63),
                    _ => a.wrapping_shr(b as u32 & 63),
                };
                self.write(ins, v)
            }
            _ => {}
        }
    }

    fn jump_target(&self, ins: &Instruction) -> u64 {
        match ins.op0_kind() {
            OpKind::Register => self.get(ins.op0_register()),
            OpKind::Memory => self.image.read(&self.mem, self.addr(ins), 8),
            _ => ins.near_branch_target(),
        }
    }
}

fn is_indirect_jmp(ins: &Instruction) -> bool {
    matches!(ins.code(), Code::Jmp_rm64) || (ins.mnemonic() == Mnemonic::Jmp && ins.op0_kind() == OpKind::Register)
}

/// Indirect jmps in the function with their emulated table, if bounded.
pub fn function_tables(image: &Image, start: u64, size: u64) -> Vec<(u64, Option<OracleTable>)> {
    let insts = image.decode(start, size);
    let mut out = Vec::new();
    for (j, ins) in insts.iter().enumerate() {
        if !is_indirect_jmp(ins) {
            continue;
        }
        let Some(bound) = find_bound(&insts, j) else {
            out.push((ins.ip(), None));
            continue;
        };
        let mut entries = Vec::new();
        for v in 0..bound.count {
            let mut m = Machine {
                image,
                regs: HashMap::new(),
                mem: HashMap::new(),
            };
            if bound.force_after.is_none() {
                m.set(bound.reg.full_register(), v);
            }
            for (k, i) in insts[..j].iter().enumerate() {
                m.step(i);
                if Some(k) == bound.force_after {
                    m.set(bound.reg.full_register(), v);
                }
            }
            entries.push(m.jump_target(ins));
        }
        let in_function = entries.iter().all(|&t| t >= start && t < start + size);
        out.push((ins.ip(), in_function.then_some(OracleTable { jmp_addr: ins.ip(), entries })));
    }
    out
}

/// Compares recovered tables against the oracle and the manifest for one
/// fixture. Returns one message per disagreement.
pub fn check_fixture(fx: &bcov_fixtures::Fixture) -> Vec<String> {
    let mut errs = Vec::new();
    let view = bcov::elf::load_module(&fx.path).expect("load module");
    let analysis = bcov::analysis::analyze(&view).expect("analyze");
    let ours: BTreeMap<u64, &bcov::jumptab::JumpTable> = analysis.tables().map(|t| (t.jmp_addr, t)).collect();
    let image = Image::load(&fx.path);
    let mut oracle: BTreeMap<u64, (String, OracleTable)> = BTreeMap::new();
    for (name, start, size) in &image.symbols {
        for (_, t) in function_tables(&image, *start, *size) {
            if let Some(t) = t {
                oracle.insert(t.jmp_addr, (name.clone(), t));
            }
        }
    }
    let fx_name = fx.name();
    for decl in &fx.spec.expected.jump_tables {
        let sites: Vec<&OracleTable> = oracle.values().filter(|(f, _)| *f == decl.function).map(|(_, t)| t).collect();
        if sites.len() != decl.sites {
            errs.push(format!(
                "{fx_name}: oracle finds {} table sites in {}, source declares {}",
                sites.len(),
                decl.function,
                decl.sites
            ));
        }
        for o in sites {
            if o.entries.len() != decl.entry_count {
                errs.push(format!(
                    "{fx_name}: oracle admits {} entries at {:#x}, source declares {}",
                    o.entries.len(),
                    o.jmp_addr,
                    decl.entry_count
                ));
            }
            let Some(t) = ours.get(&o.jmp_addr) else {
                errs.push(format!("{fx_name}: declared table at {:#x} not recovered", o.jmp_addr));
                continue;
            };
            let kind = serde_json::to_value(t.entry_kind).unwrap();
            let bound = serde_json::to_value(t.bound_kind).unwrap();
            if kind != decl.kind.as_str() || bound != decl.bound_kind.as_str() {
                errs.push(format!(
                    "{fx_name}: table at {:#x} is {kind}/{bound}, source declares {}/{}",
                    o.jmp_addr, decl.kind, decl.bound_kind
                ));
            }
        }
    }
    for (addr, t) in &ours {
        match oracle.get(addr) {
            None => errs.push(format!("{fx_name}: table at {addr:#x} has no oracle counterpart (false positive)")),
            Some((f, o)) => {
                if !fx.spec.expected.jump_tables.iter().any(|d| &d.function == f) {
                    errs.push(format!("{fx_name}: table at {addr:#x} in undeclared function {f}"));
                }
                if t.entry_count != o.entries.len() as u64 || t.entries != o.entries {
                    errs.push(format!(
                        "{fx_name}: table at {addr:#x} has {} entries, oracle {}; targets differ: {}",
                        t.entry_count,
                        o.entries.len(),
                        t.entries != o.entries
                    ));
                }
                let oracle_targets: std::collections::BTreeSet<u64> = o.entries.iter().copied().collect();
                if t.targets != oracle_targets {
                    errs.push(format!("{fx_name}: target set at {addr:#x} differs from oracle"));
                }
            }
        }
    }
    errs
}
