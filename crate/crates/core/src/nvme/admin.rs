use serde_json::json;

use super::prp;
use super::queue::{CompletionQueue, QueueKind, SubmissionQueue};
use super::wire::{admin_opcode as op, Status, SubmissionEntry, FEATURE_NUM_QUEUES};
use super::Controller;
use crate::event::Actor;
use crate::host::Host;

const IDENTIFY_LEN: usize = 4096;

fn ascii_field(dst: &mut [u8], s: &str) {
    dst.fill(b' ');
    let n = s.len().min(dst.len());
    dst[..n].copy_from_slice(&s.as_bytes()[..n]);
}

impl Controller {
    pub(super) fn identify_controller(&self) -> Vec<u8> {
        let mut d = vec![0u8; IDENTIFY_LEN];
        d[0..2].copy_from_slice(&0x1b36u16.to_le_bytes());
        d[2..4].copy_from_slice(&0x1b36u16.to_le_bytes());
        ascii_field(&mut d[4..24], &self.cfg.serial);
        ascii_field(&mut d[24..64], &self.cfg.model);
        ascii_field(&mut d[64..72], &self.cfg.firmware);
        d[77] = prp::MDTS;
        d[80..84].copy_from_slice(&super::regs::VERSION_1_4.to_le_bytes());
        d[512] = 0x66; // SQES: 64-byte entries
        d[513] = 0x44; // CQES: 16-byte entries
        d[516..520].copy_from_slice(&1u32.to_le_bytes()); // NN
        d
    }

    pub(super) fn identify_namespace(&self) -> Vec<u8> {
        let mut d = vec![0u8; IDENTIFY_LEN];
        let blocks = self.store.block_count();
        d[0..8].copy_from_slice(&blocks.to_le_bytes());
        d[8..16].copy_from_slice(&blocks.to_le_bytes());
        d[16..24].copy_from_slice(&blocks.to_le_bytes());
        d[25] = 0; // NLBAF: one format
        d[26] = 0; // FLBAS: format 0
        let lbads = self.store.block_size().trailing_zeros();
        d[128..132].copy_from_slice(&(lbads << 16).to_le_bytes());
        d
    }

    fn transfer_out(&mut self, host: &mut Host, e: &SubmissionEntry, data: &[u8]) -> Status {
        let dev = self.cfg.device;
        match prp::segments(host, dev, e.prp1, e.prp2, data.len() as u64) {
            Ok(segs) => match prp::scatter(host, dev, &segs, data) {
                Ok(()) => Status::SUCCESS,
                Err(_) => Status::DATA_TRANSFER_ERROR,
            },
            Err(prp::PrpError::InvalidField) => Status::INVALID_FIELD,
            Err(prp::PrpError::Fault(_)) => Status::DATA_TRANSFER_ERROR,
        }
    }

    /// Reads the whole queue region once so a queue placed where the device
    /// cannot reach fails at creation instead of on first use.
    fn probe_queue(&mut self, host: &mut Host, base: u64, bytes: u64) -> bool {
        host.dma_read(self.cfg.device, base, bytes as usize).is_ok()
    }

    pub(super) fn execute_admin(&mut self, host: &mut Host, e: &SubmissionEntry) -> Option<(Status, u32)> {
        let (status, result) = match e.opcode {
            op::IDENTIFY => {
                let cns = e.cdw10 & 0xFF;
                let data = match cns {
                    0 if e.nsid == 1 => Some(self.identify_namespace()),
                    0 => None,
                    1 => Some(self.identify_controller()),
                    2 => {
                        let mut d = vec![0u8; IDENTIFY_LEN];
                        d[0..4].copy_from_slice(&1u32.to_le_bytes());
                        Some(d)
                    }
                    _ => None,
                };
                match data {
                    Some(d) => (self.transfer_out(host, e, &d), 0),
                    None if cns == 0 => (Status::INVALID_NAMESPACE, 0),
                    None => (Status::INVALID_FIELD, 0),
                }
            }
            op::CREATE_IO_CQ => (self.create_cq(host, e), 0),
            op::CREATE_IO_SQ => (self.create_sq(host, e), 0),
            op::DELETE_IO_SQ => {
                let qid = e.cdw10 as u16;
                if qid == 0 || self.sqs.remove(&qid).is_none() {
                    (Status::INVALID_QUEUE_ID, 0)
                } else {
                    (Status::SUCCESS, 0)
                }
            }
            op::DELETE_IO_CQ => {
                let qid = e.cdw10 as u16;
                if qid == 0 || !self.cqs.contains_key(&qid) {
                    (Status::INVALID_QUEUE_ID, 0)
                } else if self.sqs.values().any(|sq| sq.cqid == qid) {
                    (Status::INVALID_QUEUE_DELETION, 0)
                } else {
                    self.cqs.remove(&qid);
                    (Status::SUCCESS, 0)
                }
            }
            op::SET_FEATURES => {
                if e.cdw10 as u8 == FEATURE_NUM_QUEUES {
                    let nsqr = e.cdw11 as u16;
                    let ncqr = (e.cdw11 >> 16) as u16;
                    if nsqr == 0xFFFF || ncqr == 0xFFFF {
                        (Status::INVALID_FIELD, 0)
                    } else {
                        let max = self.cfg.max_io_queues - 1;
                        self.granted_queues = (nsqr.min(max), ncqr.min(max));
                        (Status::SUCCESS, self.num_queues_result())
                    }
                } else {
                    (Status::INVALID_FIELD, 0)
                }
            }
            op::GET_FEATURES => {
                if e.cdw10 as u8 == FEATURE_NUM_QUEUES {
                    (Status::SUCCESS, self.num_queues_result())
                } else {
                    (Status::INVALID_FIELD, 0)
                }
            }
            op::GET_LOG_PAGE => {
                let dwords = ((e.cdw10 >> 16) & 0xFFF) as usize + 1;
                let data = vec![0u8; dwords * 4];
                (self.transfer_out(host, e, &data), 0)
            }
            _ => (Status::INVALID_OPCODE, 0),
        };
        host.log.push(
            Actor::Device,
            "admin",
            json!({ "opcode": e.opcode, "cid": e.cid, "status": status.name() }),
        );
        if e.opcode == op::CREATE_IO_SQ && status.is_success() {
            self.with_malice(host, |m, ctx| m.on_device_event(ctx, "io-queue-created"));
        }
        Some((status, result))
    }

    fn num_queues_result(&self) -> u32 {
        self.granted_queues.0 as u32 | (self.granted_queues.1 as u32) << 16
    }

    fn queue_params(&self, e: &SubmissionEntry) -> Result<(u16, u16), Status> {
        let qid = e.cdw10 as u16;
        let size = (e.cdw10 >> 16) as u32 + 1;
        if qid == 0 || qid > self.cfg.max_io_queues {
            return Err(Status::INVALID_QUEUE_ID);
        }
        if size < 2 || size > self.cfg.max_queue_entries as u32 {
            return Err(Status::INVALID_QUEUE_SIZE);
        }
        // Physically contiguous queues only (CAP.CQR).
        if e.cdw11 & 1 == 0 || e.prp1 % prp::PAGE != 0 {
            return Err(Status::INVALID_FIELD);
        }
        Ok((qid, size as u16))
    }

    fn create_cq(&mut self, host: &mut Host, e: &SubmissionEntry) -> Status {
        let (qid, size) = match self.queue_params(e) {
            Ok(p) => p,
            Err(s) => return s,
        };
        if self.cqs.contains_key(&qid) {
            return Status::INVALID_QUEUE_ID;
        }
        let ien = e.cdw11 & 2 != 0;
        let cq = CompletionQueue::new(qid, e.prp1, size, ien);
        if !self.probe_queue(host, cq.base, cq.bytes()) {
            return Status::INTERNAL_ERROR;
        }
        self.cqs.insert(qid, cq);
        Status::SUCCESS
    }

    fn create_sq(&mut self, host: &mut Host, e: &SubmissionEntry) -> Status {
        let (qid, size) = match self.queue_params(e) {
            Ok(p) => p,
            Err(s) => return s,
        };
        if self.sqs.contains_key(&qid) {
            return Status::INVALID_QUEUE_ID;
        }
        let cqid = (e.cdw11 >> 16) as u16;
        if cqid == 0 || !self.cqs.contains_key(&cqid) {
            return Status::COMPLETION_QUEUE_INVALID;
        }
        let sq = SubmissionQueue::new(qid, cqid, QueueKind::Io, e.prp1, size);
        if !self.probe_queue(host, sq.base, sq.bytes()) {
            return Status::INTERNAL_ERROR;
        }
        self.sqs.insert(qid, sq);
        Status::SUCCESS
    }
}
