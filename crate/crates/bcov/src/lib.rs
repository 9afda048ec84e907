//! Static coverage instrumentation for x86-64 ELF modules: analysis,
//! patching, reporting and verification.

pub mod analysis;
pub mod cfg;
pub mod disasm;
pub mod elf;
pub mod jumptab;
pub mod lsda;
pub mod patch;
pub mod report;
pub mod verify;
