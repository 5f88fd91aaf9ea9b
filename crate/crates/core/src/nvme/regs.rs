//! BAR0 register map (NVMe over PCIe transport layout).

pub const CAP: u64 = 0x00;
pub const VS: u64 = 0x08;
pub const INTMS: u64 = 0x0C;
pub const INTMC: u64 = 0x10;
pub const CC: u64 = 0x14;
pub const CSTS: u64 = 0x1C;
pub const NSSR: u64 = 0x20;
pub const AQA: u64 = 0x24;
pub const ASQ: u64 = 0x28;
pub const ACQ: u64 = 0x30;
pub const DOORBELL_BASE: u64 = 0x1000;

/// CAP.DSTRD = 0: doorbells are 4 bytes apart, 8 bytes per queue pair.
pub const DSTRD: u32 = 0;
pub const DOORBELL_STRIDE: u64 = 4 << DSTRD;

pub const VERSION_1_4: u32 = 0x0001_0400;

pub const CC_EN: u32 = 1 << 0;
pub const CC_SHN_SHIFT: u32 = 14;
pub const CC_SHN_MASK: u32 = 0b11 << CC_SHN_SHIFT;
pub const CC_IOSQES_SHIFT: u32 = 16;
pub const CC_IOCQES_SHIFT: u32 = 20;

pub const CSTS_RDY: u32 = 1 << 0;
pub const CSTS_CFS: u32 = 1 << 1;
pub const CSTS_SHST_SHIFT: u32 = 2;
pub const CSTS_SHST_MASK: u32 = 0b11 << CSTS_SHST_SHIFT;

/// PCI class code of an NVM Express I/O controller: base 0x01, sub 0x08, prog-if 0x02.
pub const CLASS_NVME: u32 = 0x01_08_02;
/// Generic DMA controller (base 0x08, sub 0x01).
pub const CLASS_DMA_CONTROLLER: u32 = 0x08_01_00;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShutdownStatus {
    Normal = 0b00,
    Processing = 0b01,
    Complete = 0b10,
}

/// Register width of the 64-bit registers; every other register is 32 bits.
pub fn is_64bit(offset: u64) -> bool {
    matches!(offset, CAP | ASQ | ACQ)
}

pub fn is_read_only(offset: u64) -> bool {
    matches!(offset, CAP | VS | CSTS) || offset == CAP + 4
}

/// Build a CAP value.
pub fn cap(mqes_zero_based: u16, timeout_500ms: u8) -> u64 {
    let css_nvm = 1u64 << 37;
    mqes_zero_based as u64
        | (1 << 16) // CQR: queues must be physically contiguous
        | ((timeout_500ms as u64) << 24)
        | ((DSTRD as u64) << 32)
        | css_nvm
}

pub fn cap_mqes(cap: u64) -> u16 {
    cap as u16
}

pub fn cap_timeout_ms(cap: u64) -> u64 {
    ((cap >> 24) & 0xFF) * 500
}

/// Doorbell target decoded from an offset inside the doorbell region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Doorbell {
    SqTail(u16),
    CqHead(u16),
}

pub fn decode_doorbell(offset: u64) -> Option<Doorbell> {
    if offset < DOORBELL_BASE {
        return None;
    }
    let idx = (offset - DOORBELL_BASE) / DOORBELL_STRIDE;
    if (offset - DOORBELL_BASE) % DOORBELL_STRIDE != 0 {
        return None;
    }
    let qid = (idx / 2) as u16;
    Some(if idx % 2 == 0 {
        Doorbell::SqTail(qid)
    } else {
        Doorbell::CqHead(qid)
    })
}

pub fn sq_tail_doorbell(qid: u16) -> u64 {
    DOORBELL_BASE + (2 * qid as u64) * DOORBELL_STRIDE
}

pub fn cq_head_doorbell(qid: u16) -> u64 {
    DOORBELL_BASE + (2 * qid as u64 + 1) * DOORBELL_STRIDE
}
