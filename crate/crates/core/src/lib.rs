//! Allocation-only building blocks for binary-level coverage analysis.
//!
//! Everything in this crate is a pure function of its inputs: flow graphs,
//! dominator trees, superblock dominator graphs and the probe sets derived
//! from them, the probe-type ordering used to pick a block inside a
//! superblock, greedy detour hosting, and the coverage data codec.
//! IO, ELF parsing, disassembly and patching live in the `bcov` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod covdata;
pub mod dominators;
pub mod graph;
pub mod hash;
pub mod hosting;
pub mod probe;
pub mod scc;
pub mod superblock;

pub use covdata::{CovDataError, CoverageArray, CoverageHeader, Policy};
pub use dominators::{DomDirection, DominatorTree};
pub use graph::Digraph;
pub use probe::{BlockShape, InstKind, ProbeType};
pub use superblock::{FlowGraph, SuperblockGraph};
