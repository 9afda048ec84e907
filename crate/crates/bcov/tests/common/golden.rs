//! Byte-level checks of detours and trampolines on two hand-written layouts.
//! Addresses are derived from the fixture, shapes are pinned.

use bcov::elf::ElfModuleView;
use bcov::patch::{Detour, Owner, PatchedModule};
use bcov_core::covdata::HEADER_SIZE;
use bcov_core::Policy;
use iced_x86::{Code, Decoder, DecoderOptions, Instruction, Mnemonic, OpKind};

fn function_insts(view: &ElfModuleView, name: &str) -> Vec<Instruction> {
    let sym = view.symbols.iter().find(|s| s.name == name).expect("function symbol");
    let off = view.vaddr_to_offset(sym.vaddr).unwrap() as usize;
    let bytes = &view.file_bytes[off..off + sym.size as usize];
    let mut d = Decoder::with_ip(64, bytes, sym.vaddr, DecoderOptions::NONE);
    let mut v = Vec::new();
    while d.can_decode() {
        v.push(d.decode());
    }
    v
}

fn decode(bytes: &[u8], ip: u64) -> Vec<Instruction> {
    let mut d = Decoder::with_ip(64, bytes, ip, DecoderOptions::NONE);
    let mut v = Vec::new();
    while d.can_decode() {
        v.push(d.decode());
    }
    v
}

fn write_at(p: &PatchedModule, addr: u64) -> &[u8] {
    &p.writes.iter().find(|w| w.addr == addr).expect("write at address").bytes
}

fn rel32_target(at: u64, bytes: &[u8]) -> u64 {
    let rel = i32::from_le_bytes(bytes[1..5].try_into().unwrap());
    at.wrapping_add(5).wrapping_add(rel as i64 as u64)
}

/// `mov byte [rip+x], 1` hitting the probe's coverage byte.
fn assert_store(ins: &Instruction, p: &PatchedModule, index: u32) {
    assert_eq!(ins.code(), Code::Mov_rm8_imm8);
    assert_eq!(ins.len(), 7);
    assert!(ins.is_ip_rel_memory_operand());
    assert_eq!(ins.immediate(1), 1);
    assert_eq!(
        ins.ip_rel_memory_address(),
        p.layout.data_seg.vaddr + HEADER_SIZE as u64 + u64::from(index)
    );
}

pub fn pair_detour() {
    let fx = super::fixture("fig2");
    let dir = tempfile::tempdir().unwrap();
    for policy in super::POLICIES {
        let m = super::load(&fx.path, policy);
        let p = super::patch_into(&m, &dir.path().join("fig2"));
        let insts = function_insts(&m.view, "fig2");
        let sete = insts.iter().position(|i| i.mnemonic() == Mnemonic::Sete).unwrap();
        let (cmp, sete, jmp) = (&insts[sete - 1], &insts[sete], &insts[sete + 1]);
        assert_eq!(jmp.code(), Code::Jmp_rel8_64);
        // the pair sete + short jmp is exactly five bytes
        assert_eq!(sete.len() + jmp.len(), 5);

        let (pi, probe) = m
            .plan
            .probes
            .iter()
            .enumerate()
            .find(|(_, pr)| pr.block_addr == cmp.ip())
            .expect("probe on the compare block");
        assert_eq!(probe.detour, Detour::Jmp { site: sete.ip() });

        let detour = write_at(&p, sete.ip());
        assert_eq!(detour.len(), 5);
        assert_eq!(detour[0], 0xe9);
        let t = p.trampoline_of(Owner::Probe(pi)).unwrap();
        assert_eq!(rel32_target(sete.ip(), detour), t.addr);

        let body = decode(&t.bytes, t.addr);
        assert_eq!(body.len(), 3, "{policy:?}");
        assert_store(&body[0], &p, probe.coverage_index);
        let off = m.view.vaddr_to_offset(sete.ip()).unwrap() as usize;
        assert_eq!(&t.bytes[7..10], &m.view.file_bytes[off..off + 3]);
        assert_eq!(body[2].code(), Code::Jmp_rel32_64);
        assert_eq!(body[2].near_branch_target(), jmp.near_branch_target());
        assert_eq!(t.bytes.len(), 7 + 3 + 5);

        // the patched file carries the detour in place of the pair
        let out = std::fs::read(dir.path().join("fig2")).unwrap();
        assert_eq!(&out[off..off + 5], detour);
    }
}

pub fn hosted_call_slot() {
    let fx = super::fixture("fig5");
    let dir = tempfile::tempdir().unwrap();
    let m = super::load(&fx.path, Policy::AnyNode);
    let p = super::patch_into(&m, &dir.path().join("fig5"));
    let insts = function_insts(&m.view, "fig5");
    let call = insts.iter().find(|i| i.mnemonic() == Mnemonic::Call).unwrap();
    assert_eq!(call.len(), 3);
    let ret_addr = call.next_ip();

    let (pi, probe) = m
        .plan
        .probes
        .iter()
        .enumerate()
        .find(|(_, pr)| pr.block_addr == call.ip())
        .expect("probe on the call block");
    let Detour::Hosted { host, slot, call: true } = probe.detour else {
        panic!("call block is not a call-slot guest: {:?}", probe.detour);
    };
    let h = &m.plan.hosts[host];
    assert_eq!(slot, h.addr + 5);
    assert!(h.slot_offsets.contains(&5));

    // guest: 2-byte jmp to the slot; slot: call to the trampoline
    let short = write_at(&p, call.ip());
    assert_eq!(short.len(), 2);
    assert_eq!(short[0], 0xeb);
    assert_eq!(call.ip().wrapping_add(2).wrapping_add(short[1] as i8 as i64 as u64), slot);
    let slot_bytes = write_at(&p, slot);
    assert_eq!(slot_bytes[0], 0xe8);
    let t = p.trampoline_of(Owner::Probe(pi)).unwrap();
    assert_eq!(rel32_target(slot, slot_bytes), t.addr);

    let body = decode(&t.bytes, t.addr);
    assert_store(&body[0], &p, probe.coverage_index);
    let sub = body
        .iter()
        .find(|i| i.mnemonic() == Mnemonic::Sub && i.op0_kind() == OpKind::Memory)
        .expect("return-address adjustment");
    assert_eq!(sub.memory_base(), iced_x86::Register::RSP);
    // the pushed return address (after the slot's call) becomes the original one
    let pushed = slot + 5;
    assert_eq!(pushed.wrapping_sub(sub.immediate(1)), ret_addr);
    // the relocated call becomes a jmp through the same memory operand
    let last = body.last().unwrap();
    assert_eq!(last.mnemonic(), Mnemonic::Jmp);
    assert_eq!(last.memory_base(), call.memory_base());
    assert_eq!(last.memory_displacement64(), call.memory_displacement64());
}

pub fn host_trampolines() {
    let fx = super::fixture("fig5");
    let dir = tempfile::tempdir().unwrap();
    let m = super::load(&fx.path, Policy::AnyNode);
    let p = super::patch_into(&m, &dir.path().join("fig5"));
    for (hi, h) in m.plan.hosts.iter().enumerate() {
        let head = write_at(&p, h.addr);
        assert_eq!(head[0], 0xe9);
        let t = p.trampoline_of(Owner::Host(hi)).unwrap();
        assert_eq!(rel32_target(h.addr, head), t.addr);
        let body = decode(&t.bytes, t.addr);
        if let Some(pi) = h.probe {
            assert_store(&body[0], &p, m.plan.probes[pi].coverage_index);
        }
        // every slot lies inside the host's region
        for off in &h.slot_offsets {
            assert!(*off >= 5 && off + 5 <= h.region, "{off} in {}", h.region);
        }
    }
}
