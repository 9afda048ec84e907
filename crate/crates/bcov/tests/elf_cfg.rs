//! Module view and CFG recovery checked against binutils and a linear-sweep
//! leader oracle.

mod common;

use std::collections::BTreeSet;
use std::process::Command;

use bcov::analysis::analyze;
use bcov::elf::{collect_landing_pads, load_module, ElfError, ElfModuleView};
use iced_x86::{Decoder, DecoderOptions, FlowControl};

fn tool(args: &[&str]) -> String {
    let out = Command::new(args[0]).args(&args[1..]).output().expect("binutils");
    assert!(out.status.success(), "{args:?}");
    String::from_utf8(out.stdout).unwrap()
}

fn hex(s: &str) -> u64 {
    u64::from_str_radix(s.trim_start_matches("0x"), 16).unwrap()
}

#[test]
fn load_segments_match_readelf() {
    for fx in common::corpus() {
        let view = load_module(&fx.path).unwrap();
        let text = tool(&["readelf", "-lW", fx.path.to_str().unwrap()]);
        let loads: Vec<(u64, u64, u64, u64, bool, bool)> = text
            .lines()
            .map(str::split_whitespace)
            .filter_map(|mut w| {
                (w.next()? == "LOAD").then_some(())?;
                let f: Vec<&str> = w.collect();
                let flags = f[5..f.len() - 1].concat();
                Some((hex(f[0]), hex(f[1]), hex(f[3]), hex(f[4]), flags.contains('W'), flags.contains('E')))
            })
            .collect();
        let ours: Vec<_> = view
            .load_segments
            .iter()
            .map(|s| (s.offset, s.vaddr, s.file_size, s.mem_size, s.is_writable(), s.is_exec()))
            .collect();
        assert_eq!(ours, loads, "{}", fx.name());
        let entry = text.lines().find_map(|l| l.strip_prefix("Entry point ")).unwrap();
        assert_eq!(view.entry, hex(entry.trim()), "{}", fx.name());
    }
}

#[test]
fn function_definitions_cover_symbols_or_frames() {
    for fx in common::corpus() {
        let view = load_module(&fx.path).unwrap();
        let m = analyze(&view).unwrap();
        let starts: BTreeSet<u64> = m.functions.iter().map(|f| f.function.start).collect();
        let path = fx.path.to_str().unwrap();
        // sized text symbols, or FDE ranges inside .text when stripped
        let text = view.sections.get(".text").expect(".text");
        let expected: BTreeSet<u64> = if fx.spec.strip {
            tool(&["readelf", "--debug-dump=frames", path])
                .lines()
                .filter_map(|l| l.split("pc=").nth(1))
                .map(|r| hex(r.split("..").next().unwrap()))
                .filter(|&a| a >= text.vaddr && a < text.vaddr + text.size)
                .collect()
        } else {
            tool(&["nm", "-S", "--defined-only", path])
                .lines()
                .filter_map(|l| {
                    let w: Vec<&str> = l.split_whitespace().collect();
                    (w.len() == 4 && matches!(w[2], "T" | "t") && hex(w[1]) > 0).then(|| hex(w[0]))
                })
                .collect()
        };
        assert!(!expected.is_empty(), "{}", fx.name());
        let missing: Vec<_> = expected.difference(&starts).collect();
        assert!(missing.is_empty(), "{}: {missing:x?}", fx.name());
    }
}

#[test]
fn rejects_non_elf_input() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x");
    std::fs::write(&p, b"#!/bin/sh\necho hi\n").unwrap();
    assert!(matches!(load_module(&p), Err(ElfError::NotElf)));
    let mut bytes = std::fs::read(common::fixture("branch").path).unwrap();
    bytes[18] = 0x03; // EM_386
    std::fs::write(&p, &bytes).unwrap();
    assert!(matches!(load_module(&p), Err(ElfError::UnsupportedArch)));
}

#[test]
fn nonreturn_functions_match_manifests() {
    for fx in common::corpus() {
        let view = load_module(&fx.path).unwrap();
        let m = analyze(&view).unwrap();
        let ours: BTreeSet<String> = m
            .functions
            .iter()
            .filter(|f| m.callgraph.nonreturn.contains(&f.function.start))
            .filter_map(|f| f.function.name.clone())
            // compiler-split cold parts end in throws or aborts
            .filter(|n| !n.ends_with(".cold"))
            .collect();
        let expected: BTreeSet<String> = fx.spec.expected.nonreturn.iter().cloned().collect();
        if fx.spec.strip {
            assert!(ours.is_empty());
            continue;
        }
        assert_eq!(ours, expected, "{}", fx.name());
    }
}

#[test]
fn landing_pads_match_manifests() {
    for fx in common::corpus() {
        let view = load_module(&fx.path).unwrap();
        let pads: BTreeSet<u64> = collect_landing_pads(&view).into_values().flatten().collect();
        for (name, &count) in &fx.spec.expected.landing_pads {
            let sym = view.symbols.iter().find(|s| &s.name == name).expect("symbol");
            let inside = pads.iter().filter(|&&p| p >= sym.vaddr && p < sym.vaddr + sym.size).count();
            assert_eq!(inside, count, "{} {name}", fx.name());
        }
        // landing pads start blocks
        let m = analyze(&view).unwrap();
        for p in &pads {
            let starts = m.analyzed().any(|a| a.cfg.blocks.iter().any(|b| b.addr == *p));
            assert!(starts, "{} pad {p:#x}", fx.name());
        }
    }
}

/// Leaders from a linear sweep: function start, in-function branch targets
/// and the instruction after any control transfer.
fn sweep(view: &ElfModuleView, start: u64, size: u64) -> (BTreeSet<u64>, BTreeSet<u64>) {
    let off = view.vaddr_to_offset(start).unwrap() as usize;
    let bytes = &view.file_bytes[off..off + size as usize];
    let mut d = Decoder::with_ip(64, bytes, start, DecoderOptions::NONE);
    let mut targets = BTreeSet::from([start]);
    let mut after = BTreeSet::new();
    while d.can_decode() {
        let i = d.decode();
        match i.flow_control() {
            FlowControl::Next | FlowControl::Interrupt => {}
            fc => {
                if matches!(fc, FlowControl::ConditionalBranch | FlowControl::UnconditionalBranch) {
                    let t = i.near_branch_target();
                    if t >= start && t < start + size {
                        targets.insert(t);
                    }
                }
                after.insert(i.next_ip());
            }
        }
    }
    (targets, after)
}

#[test]
fn blocks_agree_with_linear_sweep_leaders() {
    for fx in common::corpus() {
        let view = load_module(&fx.path).unwrap();
        let m = analyze(&view).unwrap();
        let pads: BTreeSet<u64> = collect_landing_pads(&view).into_values().flatten().collect();
        for f in &m.functions {
            let Ok(a) = &f.result else { continue };
            let (targets, after) = sweep(&view, f.function.start, f.function.size);
            let tables: BTreeSet<u64> = a.tables.values().flat_map(|t| t.targets.iter().copied()).collect();
            let ours: BTreeSet<u64> = a.cfg.blocks.iter().chain(&a.cfg.unreachable).map(|b| b.addr).collect();
            for t in &targets {
                assert!(ours.contains(t), "{} {}: branch target {t:#x} starts no block", fx.name(), f.function.display_name());
            }
            for b in &ours {
                let explained = targets.contains(b)
                    || after.contains(b)
                    || tables.contains(b)
                    || pads.contains(b)
                    || f.function.aux_entries.contains(b);
                assert!(explained, "{} {}: unexplained leader {b:#x}", fx.name(), f.function.display_name());
            }
            // blocks tile their instructions without overlap
            let mut blocks: Vec<_> = a.cfg.blocks.iter().map(|b| (b.addr, b.byte_size)).collect();
            blocks.sort();
            for w in blocks.windows(2) {
                assert!(w[0].0 + u64::from(w[0].1) <= w[1].0, "{} overlap at {:#x}", fx.name(), w[1].0);
            }
        }
    }
}

#[test]
fn dot_output_names_every_block() {
    let fx = common::fixture("branch");
    let view = load_module(&fx.path).unwrap();
    let m = analyze(&view).unwrap();
    for a in m.analyzed() {
        let dot = a.cfg.to_dot();
        assert!(dot.starts_with("digraph"));
        assert!(dot.trim_end().ends_with('}'));
        for b in &a.cfg.blocks {
            assert!(dot.contains(&format!("b_{:x} ", b.addr)), "{dot}");
        }
    }
}
