//! Canonical byte layout of a ledger block.
//!
//! All integers are big-endian:
//!
//! ```text
//! index u64 | prev_hash [u8; 32] | payload_count u32
//!   | payload_count x (device u64 | seq u64 | window_start u64 | window_end u64 | energy_uj u64)
//!   | created_at u64 | addr_len u16 | addr bytes
//! ```
//!
//! Every variable-length part is length-prefixed, so two different blocks can
//! never share an encoding.

use thiserror::Error;

use crate::ledger::BlockHash;
use crate::types::{
    microjoules_to_joules, AddressError, DeviceId, MeterSample, NetworkAddress, SimTime,
};

pub const SAMPLE_ENCODED_LEN: usize = 40;
/// Size of an encoding with no samples and an empty address.
pub const MIN_ENCODED_LEN: usize = 8 + 32 + 4 + 8 + 2;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("unexpected end of input at byte {offset} (needed {needed} more)")]
    Truncated { offset: usize, needed: usize },
    #[error("{0} trailing bytes after block")]
    Trailing(usize),
    #[error("aggregator address is not valid UTF-8")]
    AddressUtf8,
    #[error("invalid aggregator address: {0}")]
    Address(#[from] AddressError),
}

/// Serializes the hashed fields of a block.
///
/// Panics if the payload holds more than `u32::MAX` samples.
pub fn canonical_serialize(
    index: u64,
    prev_hash: &BlockHash,
    payload: &[MeterSample],
    created_at: SimTime,
    aggregator: &NetworkAddress,
) -> Vec<u8> {
    let count = u32::try_from(payload.len()).expect("block payload exceeds u32::MAX samples");
    let addr = aggregator.as_str().as_bytes();
    let mut out =
        Vec::with_capacity(MIN_ENCODED_LEN + payload.len() * SAMPLE_ENCODED_LEN + addr.len());
    out.extend_from_slice(&index.to_be_bytes());
    out.extend_from_slice(prev_hash.as_bytes());
    out.extend_from_slice(&count.to_be_bytes());
    for s in payload {
        out.extend_from_slice(&s.device.0.to_be_bytes());
        out.extend_from_slice(&s.seq.to_be_bytes());
        out.extend_from_slice(&s.window_start.as_micros().to_be_bytes());
        out.extend_from_slice(&s.window_end.as_micros().to_be_bytes());
        out.extend_from_slice(&s.energy_microjoules().to_be_bytes());
    }
    out.extend_from_slice(&created_at.as_micros().to_be_bytes());
    // NetworkAddress guarantees the length fits in u16.
    out.extend_from_slice(&(addr.len() as u16).to_be_bytes());
    out.extend_from_slice(addr);
    out
}

/// Fields recovered from a canonical encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockFields {
    pub index: u64,
    pub prev_hash: BlockHash,
    pub payload: Vec<MeterSample>,
    pub created_at: SimTime,
    pub aggregator: NetworkAddress,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        let remaining = self.buf.len() - self.pos;
        if remaining < n {
            return Err(DecodeError::Truncated {
                offset: self.pos,
                needed: n - remaining,
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u16(&mut self) -> Result<u16, DecodeError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }
}

/// Inverse of [`canonical_serialize`]. The whole input must be consumed.
pub fn decode_canonical(bytes: &[u8]) -> Result<BlockFields, DecodeError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let index = r.u64()?;
    let prev_hash = BlockHash(r.take(32)?.try_into().unwrap());
    let count = r.u32()? as usize;
    // Bound the allocation by what the input can actually hold.
    let available = (bytes.len() - r.pos) / SAMPLE_ENCODED_LEN;
    let mut payload = Vec::with_capacity(count.min(available));
    for _ in 0..count {
        payload.push(MeterSample {
            device: DeviceId(r.u64()?),
            seq: r.u64()?,
            window_start: SimTime::from_micros(r.u64()?),
            window_end: SimTime::from_micros(r.u64()?),
            energy: microjoules_to_joules(r.u64()?),
        });
    }
    let created_at = SimTime::from_micros(r.u64()?);
    let addr_len = r.u16()? as usize;
    let addr = std::str::from_utf8(r.take(addr_len)?).map_err(|_| DecodeError::AddressUtf8)?;
    let aggregator = NetworkAddress::new(addr)?;
    if r.pos != bytes.len() {
        return Err(DecodeError::Trailing(bytes.len() - r.pos));
    }
    Ok(BlockFields {
        index,
        prev_hash,
        payload,
        created_at,
        aggregator,
    })
}
