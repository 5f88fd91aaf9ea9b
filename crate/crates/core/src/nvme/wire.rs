//! 64-byte submission and 16-byte completion queue entries.

use serde::Serialize;

pub const SQE_SIZE: usize = 64;
pub const CQE_SIZE: usize = 16;

pub mod admin_opcode {
    pub const DELETE_IO_SQ: u8 = 0x00;
    pub const CREATE_IO_SQ: u8 = 0x01;
    pub const GET_LOG_PAGE: u8 = 0x02;
    pub const DELETE_IO_CQ: u8 = 0x04;
    pub const CREATE_IO_CQ: u8 = 0x05;
    pub const IDENTIFY: u8 = 0x06;
    pub const SET_FEATURES: u8 = 0x09;
    pub const GET_FEATURES: u8 = 0x0A;
}

pub mod io_opcode {
    pub const FLUSH: u8 = 0x00;
    pub const WRITE: u8 = 0x01;
    pub const READ: u8 = 0x02;
}

pub const FEATURE_NUM_QUEUES: u8 = 0x07;

/// Status field (bits 15:1 of the completion status word, phase excluded).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct Status(pub u16);

impl Status {
    const fn generic(sc: u8) -> Status {
        Status(sc as u16)
    }
    const fn command_specific(sc: u8) -> Status {
        Status((1 << 8) | sc as u16)
    }

    pub const SUCCESS: Status = Status::generic(0x00);
    pub const INVALID_OPCODE: Status = Status::generic(0x01);
    pub const INVALID_FIELD: Status = Status::generic(0x02);
    pub const DATA_TRANSFER_ERROR: Status = Status::generic(0x04);
    pub const INTERNAL_ERROR: Status = Status::generic(0x06);
    pub const INVALID_NAMESPACE: Status = Status::generic(0x0B);
    pub const LBA_OUT_OF_RANGE: Status = Status::generic(0x80);

    pub const COMPLETION_QUEUE_INVALID: Status = Status::command_specific(0x00);
    pub const INVALID_QUEUE_ID: Status = Status::command_specific(0x01);
    pub const INVALID_QUEUE_SIZE: Status = Status::command_specific(0x02);
    pub const INVALID_QUEUE_DELETION: Status = Status::command_specific(0x0C);

    pub fn code(self) -> u8 {
        self.0 as u8
    }

    pub fn code_type(self) -> u8 {
        ((self.0 >> 8) & 0x7) as u8
    }

    pub fn is_success(self) -> bool {
        self.0 & 0x7FF == 0
    }

    pub fn name(self) -> &'static str {
        match self {
            Status::SUCCESS => "success",
            Status::INVALID_OPCODE => "invalid-opcode",
            Status::INVALID_FIELD => "invalid-field",
            Status::DATA_TRANSFER_ERROR => "data-transfer-error",
            Status::INTERNAL_ERROR => "internal-error",
            Status::INVALID_NAMESPACE => "invalid-namespace",
            Status::LBA_OUT_OF_RANGE => "lba-out-of-range",
            Status::COMPLETION_QUEUE_INVALID => "completion-queue-invalid",
            Status::INVALID_QUEUE_ID => "invalid-queue-id",
            Status::INVALID_QUEUE_SIZE => "invalid-queue-size",
            Status::INVALID_QUEUE_DELETION => "invalid-queue-deletion",
            _ => "other",
        }
    }
}

impl std::fmt::Display for Status {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} (sct={} sc={:#04x})", self.name(), self.code_type(), self.code())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SubmissionEntry {
    pub opcode: u8,
    pub cid: u16,
    pub nsid: u32,
    pub prp1: u64,
    pub prp2: u64,
    pub cdw10: u32,
    pub cdw11: u32,
    pub cdw12: u32,
    pub cdw13: u32,
    pub cdw14: u32,
    pub cdw15: u32,
}

fn u32_at(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

fn u64_at(b: &[u8], off: usize) -> u64 {
    u64::from_le_bytes(b[off..off + 8].try_into().unwrap())
}

impl SubmissionEntry {
    pub fn encode(&self) -> [u8; SQE_SIZE] {
        let mut b = [0u8; SQE_SIZE];
        let dw0 = self.opcode as u32 | ((self.cid as u32) << 16);
        b[0..4].copy_from_slice(&dw0.to_le_bytes());
        b[4..8].copy_from_slice(&self.nsid.to_le_bytes());
        b[24..32].copy_from_slice(&self.prp1.to_le_bytes());
        b[32..40].copy_from_slice(&self.prp2.to_le_bytes());
        for (i, dw) in [
            self.cdw10, self.cdw11, self.cdw12, self.cdw13, self.cdw14, self.cdw15,
        ]
        .iter()
        .enumerate()
        {
            b[40 + 4 * i..44 + 4 * i].copy_from_slice(&dw.to_le_bytes());
        }
        b
    }

    pub fn decode(b: &[u8]) -> Self {
        assert_eq!(b.len(), SQE_SIZE);
        let dw0 = u32_at(b, 0);
        Self {
            opcode: dw0 as u8,
            cid: (dw0 >> 16) as u16,
            nsid: u32_at(b, 4),
            prp1: u64_at(b, 24),
            prp2: u64_at(b, 32),
            cdw10: u32_at(b, 40),
            cdw11: u32_at(b, 44),
            cdw12: u32_at(b, 48),
            cdw13: u32_at(b, 52),
            cdw14: u32_at(b, 56),
            cdw15: u32_at(b, 60),
        }
    }

    /// Starting LBA of an IO command (cdw10 low, cdw11 high).
    pub fn slba(&self) -> u64 {
        self.cdw10 as u64 | ((self.cdw11 as u64) << 32)
    }

    /// Block count of an IO command (stored zero-based in cdw12[15:0]).
    pub fn nlb(&self) -> u32 {
        (self.cdw12 & 0xFFFF) + 1
    }

    pub fn io(opcode: u8, cid: u16, slba: u64, blocks: u32, prp1: u64, prp2: u64) -> Self {
        assert!((1..=65536).contains(&blocks));
        Self {
            opcode,
            cid,
            nsid: 1,
            prp1,
            prp2,
            cdw10: slba as u32,
            cdw11: (slba >> 32) as u32,
            cdw12: blocks - 1,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompletionEntry {
    pub result: u32,
    pub sq_head: u16,
    pub sq_id: u16,
    pub cid: u16,
    pub status: Status,
    pub phase: bool,
}

impl CompletionEntry {
    pub fn encode(&self) -> [u8; CQE_SIZE] {
        let mut b = [0u8; CQE_SIZE];
        b[0..4].copy_from_slice(&self.result.to_le_bytes());
        let dw2 = self.sq_head as u32 | ((self.sq_id as u32) << 16);
        b[8..12].copy_from_slice(&dw2.to_le_bytes());
        let sw = ((self.status.0 & 0x7FFF) << 1) | self.phase as u16;
        let dw3 = self.cid as u32 | ((sw as u32) << 16);
        b[12..16].copy_from_slice(&dw3.to_le_bytes());
        b
    }

    pub fn decode(b: &[u8]) -> Self {
        assert_eq!(b.len(), CQE_SIZE);
        let dw2 = u32_at(b, 8);
        let dw3 = u32_at(b, 12);
        let sw = (dw3 >> 16) as u16;
        Self {
            result: u32_at(b, 0),
            sq_head: dw2 as u16,
            sq_id: (dw2 >> 16) as u16,
            cid: dw3 as u16,
            status: Status(sw >> 1),
            phase: sw & 1 == 1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sqe_layout() {
        let e = SubmissionEntry::io(io_opcode::WRITE, 0xBEEF, 0x1_0000_0002, 8, 0x1000, 0x2000);
        let b = e.encode();
        assert_eq!(b.len(), 64);
        assert_eq!(b[0], 0x01);
        assert_eq!(&b[2..4], &0xBEEFu16.to_le_bytes());
        assert_eq!(&b[24..32], &0x1000u64.to_le_bytes());
        assert_eq!(&b[40..44], &2u32.to_le_bytes());
        assert_eq!(&b[44..48], &1u32.to_le_bytes());
        assert_eq!(&b[48..50], &7u16.to_le_bytes());
        let d = SubmissionEntry::decode(&b);
        assert_eq!(d.slba(), 0x1_0000_0002);
        assert_eq!(d.nlb(), 8);
    }

    #[test]
    fn cqe_phase_is_bit_16_of_dw3() {
        let c = CompletionEntry {
            result: 0,
            sq_head: 3,
            sq_id: 1,
            cid: 9,
            status: Status::LBA_OUT_OF_RANGE,
            phase: true,
        };
        let b = c.encode();
        assert_eq!(b.len(), 16);
        assert_eq!(b[14] & 1, 1);
        assert_eq!(u16::from_le_bytes([b[14], b[15]]) >> 1, 0x80);
    }

    proptest! {
        #[test]
        fn sqe_roundtrip(op: u8, cid: u16, nsid: u32, prp1: u64, prp2: u64, dws: [u32; 6]) {
            let e = SubmissionEntry {
                opcode: op, cid, nsid, prp1, prp2,
                cdw10: dws[0], cdw11: dws[1], cdw12: dws[2], cdw13: dws[3], cdw14: dws[4], cdw15: dws[5],
            };
            prop_assert_eq!(SubmissionEntry::decode(&e.encode()), e);
        }

        #[test]
        fn cqe_roundtrip(result: u32, sq_head: u16, sq_id: u16, cid: u16, st in 0u16..0x8000, phase: bool) {
            let c = CompletionEntry { result, sq_head, sq_id, cid, status: Status(st), phase };
            prop_assert_eq!(CompletionEntry::decode(&c.encode()), c);
        }
    }
}
