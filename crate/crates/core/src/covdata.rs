//! Coverage data segment image and dump codec.
//!
//! Layout, all fields little-endian:
//!
//! ```text
//! offset  size  field
//!      0     8  magic "BCOVDATA"
//!      8     2  version (1)
//!     10     1  policy (1 = leaf-node, 2 = any-node)
//!     11     5  reserved, zero
//!     16     4  probe_count
//!     20     8  build_hash
//!     28     N  one byte per probe, 0 or 1
//! ```

use alloc::vec;
use alloc::vec::Vec;

pub const MAGIC: [u8; 8] = *b"BCOVDATA";
pub const VERSION: u16 = 1;
pub const HEADER_SIZE: usize = 28;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Policy {
    LeafNode = 1,
    AnyNode = 2,
}

impl Policy {
    pub fn from_byte(b: u8) -> Option<Policy> {
        match b {
            1 => Some(Policy::LeafNode),
            2 => Some(Policy::AnyNode),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Policy::LeafNode => "leaf",
            Policy::AnyNode => "any",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum CovDataError {
    #[error("bad magic, not a coverage dump")]
    BadMagic,
    #[error("unsupported coverage data version {0}")]
    VersionMismatch(u16),
    #[error("unknown policy byte {0}")]
    BadPolicy(u8),
    #[error("truncated coverage data: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("coverage headers differ")]
    HeaderMismatch,
    #[error("no dumps to merge")]
    Empty,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CoverageHeader {
    pub version: u16,
    pub policy: Policy,
    pub probe_count: u32,
    pub build_hash: u64,
}

impl CoverageHeader {
    pub fn new(policy: Policy, probe_count: u32, build_hash: u64) -> Self {
        CoverageHeader {
            version: VERSION,
            policy,
            probe_count,
            build_hash,
        }
    }

    pub fn encode(&self) -> [u8; HEADER_SIZE] {
        let mut out = [0u8; HEADER_SIZE];
        out[0..8].copy_from_slice(&MAGIC);
        out[8..10].copy_from_slice(&self.version.to_le_bytes());
        out[10] = self.policy as u8;
        out[16..20].copy_from_slice(&self.probe_count.to_le_bytes());
        out[20..28].copy_from_slice(&self.build_hash.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CovDataError> {
        if bytes.len() < 8 || bytes[0..8] != MAGIC {
            return Err(CovDataError::BadMagic);
        }
        if bytes.len() < HEADER_SIZE {
            return Err(CovDataError::Truncated {
                need: HEADER_SIZE,
                have: bytes.len(),
            });
        }
        let version = u16::from_le_bytes([bytes[8], bytes[9]]);
        if version != VERSION {
            return Err(CovDataError::VersionMismatch(version));
        }
        let policy = Policy::from_byte(bytes[10]).ok_or(CovDataError::BadPolicy(bytes[10]))?;
        let probe_count = u32::from_le_bytes(bytes[16..20].try_into().expect("4 bytes"));
        let build_hash = u64::from_le_bytes(bytes[20..28].try_into().expect("8 bytes"));
        Ok(CoverageHeader {
            version,
            policy,
            probe_count,
            build_hash,
        })
    }

    /// Size of the full image: header plus one byte per probe.
    pub fn image_size(&self) -> usize {
        HEADER_SIZE + self.probe_count as usize
    }
}

/// One byte per probed superblock; nonzero means executed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CoverageArray(pub Vec<u8>);

impl CoverageArray {
    pub fn zeroed(len: usize) -> Self {
        CoverageArray(vec![0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_set(&self, index: usize) -> bool {
        self.0.get(index).is_some_and(|b| b & 1 != 0)
    }

    pub fn set(&mut self, index: usize) {
        self.0[index] = 1;
    }

    pub fn hits(&self) -> impl Iterator<Item = usize> + '_ {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, b)| *b & 1 != 0)
            .map(|(i, _)| i)
    }
}

pub fn encode_dump(header: &CoverageHeader, array: &CoverageArray) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_SIZE + array.len());
    out.extend_from_slice(&header.encode());
    out.extend_from_slice(&array.0);
    out
}

/// Parses a dump; trailing bytes beyond `probe_count` are ignored.
pub fn decode_dump(bytes: &[u8]) -> Result<(CoverageHeader, CoverageArray), CovDataError> {
    let header = CoverageHeader::decode(bytes)?;
    let need = header.image_size();
    if bytes.len() < need {
        return Err(CovDataError::Truncated {
            need,
            have: bytes.len(),
        });
    }
    Ok((header, CoverageArray(bytes[HEADER_SIZE..need].to_vec())))
}

/// Element-wise OR of dumps that share an identical header.
pub fn merge(
    dumps: &[(CoverageHeader, CoverageArray)],
) -> Result<(CoverageHeader, CoverageArray), CovDataError> {
    let (first_header, first) = dumps.first().ok_or(CovDataError::Empty)?;
    let mut out = first.clone();
    for (h, a) in &dumps[1..] {
        if h != first_header || a.len() != out.len() {
            return Err(CovDataError::HeaderMismatch);
        }
        for (o, b) in out.0.iter_mut().zip(&a.0) {
            *o |= *b;
        }
    }
    Ok((*first_header, out))
}
