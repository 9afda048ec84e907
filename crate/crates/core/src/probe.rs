//! Basic block classification for probe selection.
//!
//! Variants of [`ProbeType`] are declared in ascending order of expected
//! relocation overhead, so the derived `Ord` is the selection order.

/// Size of a `jmp rel32` / `call rel32` detour.
pub const DETOUR_SIZE: u32 = 5;
/// Size of a `jmp rel8` used by a guest to reach its host slot.
pub const SHORT_DETOUR_SIZE: u32 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InstKind {
    CallDirect,
    CallIndirect,
    JmpDirect,
    JmpIndirect,
    CondJmp,
    Ret,
    Other,
}

impl InstKind {
    pub fn is_call(self) -> bool {
        matches!(self, InstKind::CallDirect | InstKind::CallIndirect)
    }

    pub fn is_jmp(self) -> bool {
        matches!(self, InstKind::JmpDirect | InstKind::JmpIndirect)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ProbeType {
    Return,
    LongJump,
    LongCall,
    JumpTab,
    ShortCall,
    ShortJump,
    Internal,
    LongCond,
    ShortCond,
    Guest,
}

impl ProbeType {
    pub fn as_str(self) -> &'static str {
        match self {
            ProbeType::Return => "return",
            ProbeType::LongJump => "long-jump",
            ProbeType::LongCall => "long-call",
            ProbeType::JumpTab => "jump-tab",
            ProbeType::ShortCall => "short-call",
            ProbeType::ShortJump => "short-jump",
            ProbeType::Internal => "internal",
            ProbeType::LongCond => "long-cond",
            ProbeType::ShortCond => "short-cond",
            ProbeType::Guest => "guest",
        }
    }
}

/// The facts about a block that decide its probe type.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockShape {
    pub byte_size: u32,
    pub padding: u32,
    /// Kind and size of the last instruction when it transfers control.
    pub terminator: Option<(InstKind, u32)>,
    /// Every way into the block goes through a patchable jump table.
    pub jump_table_target: bool,
}

pub fn classify(shape: &BlockShape) -> ProbeType {
    if shape.byte_size + shape.padding < DETOUR_SIZE {
        return ProbeType::Guest;
    }
    if shape.jump_table_target {
        return ProbeType::JumpTab;
    }
    let long = |size: u32| size >= DETOUR_SIZE;
    match shape.terminator {
        Some((InstKind::Ret, _)) => ProbeType::Return,
        Some((InstKind::JmpDirect | InstKind::JmpIndirect, size)) => {
            if long(size) {
                ProbeType::LongJump
            } else {
                ProbeType::ShortJump
            }
        }
        Some((InstKind::CallDirect | InstKind::CallIndirect, size)) => {
            if long(size) {
                ProbeType::LongCall
            } else {
                ProbeType::ShortCall
            }
        }
        Some((InstKind::CondJmp, size)) => {
            if long(size) {
                ProbeType::LongCond
            } else {
                ProbeType::ShortCond
            }
        }
        Some((InstKind::Other, _)) | None => ProbeType::Internal,
    }
}

/// Smallest suffix of `sizes` that, together with trailing padding, has room
/// for a detour. Returns the index of its first instruction and the number
/// of instruction bytes that must be relocated.
pub fn suffix_run(sizes: &[u32], padding: u32) -> Option<(usize, u32)> {
    let mut total = 0u32;
    for i in (0..sizes.len()).rev() {
        total += sizes[i];
        if total + padding >= DETOUR_SIZE {
            return Some((i, total));
        }
    }
    None
}

/// Cheapest window of consecutive instructions covering at least a detour.
/// Returns `(first, end_exclusive, bytes)`; ties go to the earliest window.
pub fn internal_run(sizes: &[u32]) -> Option<(usize, usize, u32)> {
    let mut best: Option<(usize, usize, u32)> = None;
    for start in 0..sizes.len() {
        let mut total = 0;
        for end in start..sizes.len() {
            total += sizes[end];
            if total >= DETOUR_SIZE {
                if best.map_or(true, |(_, _, b)| total < b) {
                    best = Some((start, end + 1, total));
                }
                break;
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(s: u32, p: u32, t: Option<(InstKind, u32)>) -> BlockShape {
        BlockShape {
            byte_size: s,
            padding: p,
            terminator: t,
            jump_table_target: false,
        }
    }

    #[test]
    fn order_follows_relocation_overhead() {
        use ProbeType::*;
        let order = [
            Return, LongJump, LongCall, JumpTab, ShortCall, ShortJump, Internal, LongCond, ShortCond,
            Guest,
        ];
        assert!(order.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn ret_with_padding_is_return() {
        assert_eq!(classify(&shape(1, 4, Some((InstKind::Ret, 1)))), ProbeType::Return);
    }

    #[test]
    fn three_byte_indirect_call_is_guest() {
        assert_eq!(
            classify(&shape(3, 0, Some((InstKind::CallIndirect, 3)))),
            ProbeType::Guest
        );
    }

    #[test]
    fn rel8_jmp_block_is_short_jump() {
        assert_eq!(
            classify(&shape(10, 0, Some((InstKind::JmpDirect, 2)))),
            ProbeType::ShortJump
        );
        assert_eq!(
            classify(&shape(10, 0, Some((InstKind::JmpDirect, 5)))),
            ProbeType::LongJump
        );
    }

    #[test]
    fn conditional_forms() {
        assert_eq!(classify(&shape(8, 0, Some((InstKind::CondJmp, 6)))), ProbeType::LongCond);
        assert_eq!(classify(&shape(8, 0, Some((InstKind::CondJmp, 2)))), ProbeType::ShortCond);
        assert_eq!(classify(&shape(8, 0, None)), ProbeType::Internal);
    }

    #[test]
    fn table_targets_beat_terminators_but_not_guests() {
        let mut s = shape(8, 0, Some((InstKind::Ret, 1)));
        s.jump_table_target = true;
        assert_eq!(classify(&s), ProbeType::JumpTab);
        let mut g = shape(1, 0, Some((InstKind::Ret, 1)));
        g.jump_table_target = true;
        assert_eq!(classify(&g), ProbeType::Guest);
    }

    #[test]
    fn runs() {
        // sete (3) + jmp rel8 (2) with no padding relocates both
        assert_eq!(suffix_run(&[5, 3, 2], 0), Some((1, 5)));
        // ret with 4 bytes of padding relocates only the ret
        assert_eq!(suffix_run(&[3, 1], 4), Some((1, 1)));
        assert_eq!(suffix_run(&[1, 1], 0), None);
        assert_eq!(internal_run(&[2, 7, 3, 3]), Some((2, 4, 6)));
        assert_eq!(internal_run(&[5, 1]), Some((0, 1, 5)));
        assert_eq!(internal_run(&[1, 1, 1]), None);
    }
}
