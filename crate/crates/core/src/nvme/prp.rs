//! PRP (Physical Region Page) data pointer walking.
//!
//! PRP1 may carry an offset into its page; every following entry is page
//! aligned. When the transfer needs more than two pages, PRP2 points to a
//! single PRP list page (no list chaining: the transfer limit keeps every
//! command within one list).

use crate::host::{DeviceId, DmaFault, Host};

pub const PAGE: u64 = 4096;
const ENTRIES_PER_LIST: u64 = PAGE / 8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PrpError {
    /// Misaligned list entry or a transfer needing a chained list.
    InvalidField,
    Fault(DmaFault),
}

/// One contiguous host-physical piece of a transfer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub addr: u64,
    pub len: u64,
}

/// Largest transfer the controller accepts (MDTS = 9, 2 MiB). Any transfer of
/// this size fits in PRP1 plus one list page, whatever PRP1's offset.
pub const MAX_TRANSFER: u64 = PAGE * ENTRIES_PER_LIST;
pub const MDTS: u8 = 9;

pub fn segments(
    host: &mut Host,
    device: DeviceId,
    prp1: u64,
    prp2: u64,
    len: u64,
) -> Result<Vec<Segment>, PrpError> {
    if len == 0 {
        return Ok(Vec::new());
    }
    if prp1 % 4 != 0 {
        return Err(PrpError::InvalidField);
    }
    let first = (PAGE - prp1 % PAGE).min(len);
    let mut segs = vec![Segment {
        addr: prp1,
        len: first,
    }];
    let mut remaining = len - first;
    if remaining == 0 {
        return Ok(segs);
    }
    if remaining <= PAGE {
        if prp2 % PAGE != 0 {
            return Err(PrpError::InvalidField);
        }
        segs.push(Segment {
            addr: prp2,
            len: remaining,
        });
        return Ok(segs);
    }
    let pages = remaining.div_ceil(PAGE);
    if pages > ENTRIES_PER_LIST || prp2 % 8 != 0 {
        return Err(PrpError::InvalidField);
    }
    // The list must not cross its page.
    if prp2 % PAGE + pages * 8 > PAGE {
        return Err(PrpError::InvalidField);
    }
    let list = host
        .dma_read(device, prp2, (pages * 8) as usize)
        .map_err(PrpError::Fault)?;
    for entry in list.chunks_exact(8) {
        let addr = u64::from_le_bytes(entry.try_into().unwrap());
        if addr % PAGE != 0 {
            return Err(PrpError::InvalidField);
        }
        let n = remaining.min(PAGE);
        segs.push(Segment { addr, len: n });
        remaining -= n;
    }
    Ok(segs)
}

/// Gathers a transfer from host memory. Stops at the first faulting segment.
pub fn gather(host: &mut Host, device: DeviceId, segs: &[Segment]) -> Result<Vec<u8>, DmaFault> {
    let mut out = Vec::with_capacity(segs.iter().map(|s| s.len as usize).sum());
    for s in segs {
        out.extend_from_slice(&host.dma_read(device, s.addr, s.len as usize)?);
    }
    Ok(out)
}

/// Scatters `data` into host memory along `segs`.
pub fn scatter(
    host: &mut Host,
    device: DeviceId,
    segs: &[Segment],
    data: &[u8],
) -> Result<(), DmaFault> {
    let mut off = 0usize;
    for s in segs {
        let n = s.len as usize;
        host.dma_write(device, s.addr, &data[off..off + n])?;
        off += n;
    }
    Ok(())
}
