use serde_json::json;

use super::prp;
use super::wire::{io_opcode as op, Status, SubmissionEntry};
use super::Controller;
use crate::backend::BackendError;
use crate::event::Actor;
use crate::host::Host;

impl Controller {
    /// Executes an IO command. `None` means the command was discarded because
    /// the backend is dead, so no completion is posted.
    pub(super) fn execute_io(&mut self, host: &mut Host, e: &SubmissionEntry) -> Option<(Status, u32)> {
        let status = match e.opcode {
            op::FLUSH => {
                if e.nsid != 1 && e.nsid != 0xFFFF_FFFF {
                    Status::INVALID_NAMESPACE
                } else {
                    match self.store.flush() {
                        Ok(()) => Status::SUCCESS,
                        Err(BackendError::DeviceDead) => return None,
                        Err(_) => Status::INTERNAL_ERROR,
                    }
                }
            }
            op::READ | op::WRITE => self.read_write(host, e)?,
            _ => Status::INVALID_OPCODE,
        };
        host.log.push(
            Actor::Device,
            "io",
            json!({
                "op": match e.opcode { op::READ => "read", op::WRITE => "write", op::FLUSH => "flush", _ => "other" },
                "lba": e.slba(),
                "count": e.nlb(),
                "cid": e.cid,
                "status": status.name(),
            }),
        );
        Some((status, 0))
    }

    fn read_write(&mut self, host: &mut Host, e: &SubmissionEntry) -> Option<Status> {
        if e.nsid != 1 {
            return Some(Status::INVALID_NAMESPACE);
        }
        let (lba, count) = (e.slba(), e.nlb() as u64);
        if lba.checked_add(count).is_none_or(|end| end > self.store.block_count()) {
            return Some(Status::LBA_OUT_OF_RANGE);
        }
        let len = count * self.store.block_size() as u64;
        if len > prp::MAX_TRANSFER {
            return Some(Status::INVALID_FIELD);
        }
        let dev = self.cfg.device;
        let segs = match prp::segments(host, dev, e.prp1, e.prp2, len) {
            Ok(s) => s,
            Err(prp::PrpError::InvalidField) => return Some(Status::INVALID_FIELD),
            Err(prp::PrpError::Fault(_)) => return Some(Status::DATA_TRANSFER_ERROR),
        };
        if self.store.is_dead() {
            return None;
        }
        if e.opcode == op::WRITE {
            let data = match prp::gather(host, dev, &segs) {
                Ok(d) => d,
                Err(_) => return Some(Status::DATA_TRANSFER_ERROR),
            };
            self.with_malice(host, |m, ctx| m.on_write(ctx, lba, &data));
            match self.store.write_blocks(lba, count, &data) {
                Ok(()) => Some(Status::SUCCESS),
                Err(BackendError::DeviceDead) => None,
                Err(_) => Some(Status::INTERNAL_ERROR),
            }
        } else {
            let mut data = match self.store.read_blocks(lba, count) {
                Ok(d) => d,
                Err(BackendError::DeviceDead) => return None,
                Err(_) => return Some(Status::INTERNAL_ERROR),
            };
            self.with_malice(host, |m, ctx| m.on_read(ctx, lba, &mut data));
            if self.store.is_dead() {
                return None;
            }
            match prp::scatter(host, dev, &segs, &data) {
                Ok(()) => Some(Status::SUCCESS),
                Err(_) => Some(Status::DATA_TRANSFER_ERROR),
            }
        }
    }
}
