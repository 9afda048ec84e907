//! Itanium C++ ABI language-specific data area (`.gcc_except_table`).
//!
//! Only the header and the call-site table are decoded; action and type
//! tables are not needed to find landing pads.

use thiserror::Error;

const DW_EH_PE_OMIT: u8 = 0xff;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LsdaError {
    #[error("LSDA runs past the end of its segment")]
    OutOfBounds,
    #[error("unsupported pointer encoding {0:#x}")]
    Encoding(u8),
    #[error("LEB128 value overflows 64 bits")]
    Leb,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CallSite {
    pub start: u64,
    pub len: u64,
    pub landing_pad: Option<u64>,
    pub action: u64,
}

impl CallSite {
    pub fn contains(&self, addr: u64) -> bool {
        addr >= self.start && addr < self.start + self.len
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lsda {
    pub lp_start: u64,
    pub call_sites: Vec<CallSite>,
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
    /// Virtual address of `data[0]`.
    addr: u64,
}

impl Reader<'_> {
    fn u8(&mut self) -> Result<u8, LsdaError> {
        let b = *self.data.get(self.pos).ok_or(LsdaError::OutOfBounds)?;
        self.pos += 1;
        Ok(b)
    }

    fn fixed<const N: usize>(&mut self) -> Result<[u8; N], LsdaError> {
        let bytes = self
            .data
            .get(self.pos..self.pos + N)
            .ok_or(LsdaError::OutOfBounds)?;
        self.pos += N;
        Ok(bytes.try_into().expect("length checked"))
    }

    fn uleb(&mut self) -> Result<u64, LsdaError> {
        let mut result = 0u64;
        let mut shift = 0;
        loop {
            let b = self.u8()?;
            if shift >= 64 && b & 0x7f != 0 {
                return Err(LsdaError::Leb);
            }
            if shift < 64 {
                result |= u64::from(b & 0x7f) << shift;
            }
            shift += 7;
            if b & 0x80 == 0 {
                return Ok(result);
            }
        }
    }

    fn sleb(&mut self) -> Result<i64, LsdaError> {
        let mut result = 0i64;
        let mut shift = 0;
        loop {
            let b = self.u8()?;
            if shift < 64 {
                result |= i64::from(b & 0x7f) << shift;
            }
            shift += 7;
            if b & 0x80 == 0 {
                if shift < 64 && b & 0x40 != 0 {
                    result |= -1i64 << shift;
                }
                return Ok(result);
            }
        }
    }

    fn encoded(&mut self, enc: u8) -> Result<u64, LsdaError> {
        let field_addr = self.addr + self.pos as u64;
        let raw = match enc & 0x0f {
            0x00 => u64::from_le_bytes(self.fixed::<8>()?),
            0x01 => self.uleb()?,
            0x02 => u64::from(u16::from_le_bytes(self.fixed::<2>()?)),
            0x03 => u64::from(u32::from_le_bytes(self.fixed::<4>()?)),
            0x04 => u64::from_le_bytes(self.fixed::<8>()?),
            0x09 => self.sleb()? as u64,
            0x0a => i64::from(i16::from_le_bytes(self.fixed::<2>()?)) as u64,
            0x0b => i64::from(i32::from_le_bytes(self.fixed::<4>()?)) as u64,
            0x0c => i64::from_le_bytes(self.fixed::<8>()?) as u64,
            _ => return Err(LsdaError::Encoding(enc)),
        };
        match enc & 0x70 {
            0x00 => Ok(raw),
            0x10 => Ok(field_addr.wrapping_add(raw)),
            _ => Err(LsdaError::Encoding(enc)),
        }
    }
}

/// Parses the LSDA starting at `data[0]`, located at virtual address `addr`,
/// for the function starting at `func_start`.
pub fn parse(data: &[u8], addr: u64, func_start: u64) -> Result<Lsda, LsdaError> {
    let mut r = Reader { data, pos: 0, addr };
    let lp_enc = r.u8()?;
    let lp_start = if lp_enc == DW_EH_PE_OMIT {
        func_start
    } else {
        r.encoded(lp_enc)?
    };
    let tt_enc = r.u8()?;
    if tt_enc != DW_EH_PE_OMIT {
        r.uleb()?;
    }
    let cs_enc = r.u8()?;
    let cs_len = r.uleb()? as usize;
    let cs_end = r.pos.checked_add(cs_len).ok_or(LsdaError::OutOfBounds)?;
    if cs_end > data.len() {
        return Err(LsdaError::OutOfBounds);
    }
    let mut call_sites = Vec::new();
    while r.pos < cs_end {
        let start = r.encoded(cs_enc)?;
        let len = r.encoded(cs_enc)?;
        let lp = r.encoded(cs_enc)?;
        let action = r.uleb()?;
        call_sites.push(CallSite {
            start: lp_start.wrapping_add(start),
            len,
            landing_pad: (lp != 0).then(|| lp_start.wrapping_add(lp)),
            action,
        });
    }
    Ok(Lsda {
        lp_start,
        call_sites,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uleb_call_site_table() {
        // lpstart omitted, ttype udata4 with offset 0x10, call sites uleb128
        let data = [
            0xff, 0x9b, 0x10, 0x01, 0x08, // header, table length 8
            0x05, 0x0a, 0x20, 0x01, // [f+5, f+15) -> f+0x20, action 1
            0x14, 0x03, 0x00, 0x00, // [f+0x14, f+0x17) no pad
        ];
        let lsda = parse(&data, 0x5000, 0x1000).unwrap();
        assert_eq!(lsda.lp_start, 0x1000);
        assert_eq!(lsda.call_sites.len(), 2);
        assert_eq!(lsda.call_sites[0].start, 0x1005);
        assert_eq!(lsda.call_sites[0].landing_pad, Some(0x1020));
        assert!(lsda.call_sites[0].contains(0x100e));
        assert_eq!(lsda.call_sites[1].landing_pad, None);
    }

    #[test]
    fn udata4_entries_and_explicit_lpstart() {
        let mut data = vec![0x03];
        data.extend_from_slice(&0x2000u32.to_le_bytes());
        data.extend_from_slice(&[0xff, 0x03, 13]);
        data.extend_from_slice(&4u32.to_le_bytes());
        data.extend_from_slice(&8u32.to_le_bytes());
        data.extend_from_slice(&0x40u32.to_le_bytes());
        data.push(0);
        let lsda = parse(&data, 0, 0x1000).unwrap();
        assert_eq!(lsda.call_sites[0].start, 0x2004);
        assert_eq!(lsda.call_sites[0].landing_pad, Some(0x2040));
    }

    #[test]
    fn truncated_and_bad_encoding() {
        assert_eq!(parse(&[0xff, 0xff, 0x01, 0x08, 0x00], 0, 0), Err(LsdaError::OutOfBounds));
        assert_eq!(parse(&[0xff, 0xff, 0x07, 0x01, 0x00], 0, 0), Err(LsdaError::Encoding(7)));
    }
}
