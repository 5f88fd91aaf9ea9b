//! Minimal NVMe host driver: controller bring-up, queue management, polled
//! IO through PRPs in the data-buffer region, and controlled shutdown.

use std::collections::BTreeMap;

use serde_json::json;
use thiserror::Error;

use super::{Host, RegionKind};
use crate::event::{Actor, SimTime};
use crate::nvme::prp::{MAX_TRANSFER, PAGE};
use crate::nvme::regs::{self, ShutdownStatus};
use crate::nvme::wire::{admin_opcode, io_opcode, CompletionEntry, Status, SubmissionEntry, CQE_SIZE, FEATURE_NUM_QUEUES, SQE_SIZE};
use crate::nvme::Controller;

#[derive(Debug, Clone)]
pub struct DriverConfig {
    pub ready_timeout: SimTime,
    pub poll_interval: SimTime,
    pub io_timeout: SimTime,
    pub shutdown_timeout: SimTime,
    pub admin_depth: u16,
    pub io_depth: u16,
}

impl Default for DriverConfig {
    fn default() -> Self {
        Self {
            ready_timeout: SimTime::from_millis(500),
            poll_interval: SimTime::from_millis(1),
            io_timeout: SimTime::from_millis(1000),
            shutdown_timeout: SimTime::from_millis(5000),
            admin_depth: 32,
            io_depth: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum DriverState {
    Unbound,
    /// Bound to a device that never became ready. The device stays enabled.
    BoundNotReady,
    Ready,
    Dead,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitOutcome {
    Ready,
    NotReadyTimeout,
    NotBound,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IoError {
    #[error("driver not ready ({0:?})")]
    NotReady(DriverState),
    #[error("device returned {0}")]
    Status(Status),
    #[error("command timed out")]
    Timeout,
    #[error("device is dead")]
    DeviceDead,
    #[error("submission queue {0} is full")]
    QueueFull(u16),
    #[error("no queue {0}")]
    NoQueue(u16),
    #[error("buffer length {0} is not a whole number of blocks")]
    BadLength(usize),
    #[error("out of queue memory")]
    NoMemory,
}

/// Host-side view of one queue pair.
#[derive(Debug, Clone)]
pub struct HostQueue {
    pub qid: u16,
    pub sq_base: u64,
    pub cq_base: u64,
    pub sq_size: u16,
    pub cq_size: u16,
    pub sq_tail: u16,
    /// Device consumption point, learned from completions.
    pub sq_head: u16,
    pub cq_head: u16,
    pub phase: bool,
    next_cid: u16,
}

impl HostQueue {
    fn new(qid: u16, sq_base: u64, cq_base: u64, sq_size: u16, cq_size: u16) -> Self {
        Self {
            qid,
            sq_base,
            cq_base,
            sq_size,
            cq_size,
            sq_tail: 0,
            sq_head: 0,
            cq_head: 0,
            phase: true,
            next_cid: 0,
        }
    }

    pub fn is_full(&self) -> bool {
        (self.sq_tail + 1) % self.sq_size == self.sq_head
    }
}

#[derive(Debug)]
pub struct Driver {
    pub cfg: DriverConfig,
    state: DriverState,
    queues: BTreeMap<u16, HostQueue>,
    alloc_next: u64,
    model: String,
    block_size: u32,
    block_count: u64,
}

fn round_page(n: u64) -> u64 {
    n.div_ceil(PAGE) * PAGE
}

impl Driver {
    pub fn new(cfg: DriverConfig) -> Self {
        Self {
            cfg,
            state: DriverState::Unbound,
            queues: BTreeMap::new(),
            alloc_next: 0,
            model: String::new(),
            block_size: 0,
            block_count: 0,
        }
    }

    pub fn state(&self) -> DriverState {
        self.state
    }

    pub fn model(&self) -> &str {
        &self.model
    }

    pub fn block_size(&self) -> u32 {
        self.block_size
    }

    pub fn block_count(&self) -> u64 {
        self.block_count
    }

    pub fn queue(&self, qid: u16) -> Option<&HostQueue> {
        self.queues.get(&qid)
    }

    fn queue_area(host: &Host) -> std::ops::Range<u64> {
        host.mem
            .region(&RegionKind::QueueArea)
            .expect("host memory has no queue area")
            .range
            .clone()
    }

    /// Scratch page for identify data and PRP lists: the last page of the
    /// queue area. Queues are bump-allocated from the start.
    fn scratch(host: &Host) -> u64 {
        Self::queue_area(host).end - PAGE
    }

    fn alloc(&mut self, host: &Host, bytes: u64) -> Result<u64, IoError> {
        let area = Self::queue_area(host);
        let base = area.start + self.alloc_next;
        let end = base + round_page(bytes);
        // Two pages at the end are reserved for scratch and PRP lists.
        if end > area.end - 2 * PAGE {
            return Err(IoError::NoMemory);
        }
        self.alloc_next += round_page(bytes);
        Ok(base)
    }

    fn prp_list_page(host: &Host) -> u64 {
        Self::queue_area(host).end - 2 * PAGE
    }

    fn csts(&self, host: &mut Host, ctrl: &mut Controller) -> u32 {
        ctrl.mmio_read(host, regs::CSTS, 4) as u32
    }

    fn wait(&self, host: &mut Host, ctrl: &mut Controller) {
        host.advance(self.cfg.poll_interval);
        ctrl.tick(host);
        host.run_actor();
        while host.take_interrupt().is_some() {}
    }

    /// Brings the controller up. On a never-ready device the driver stays
    /// bound and the device stays enabled; the outcome is reported once.
    pub fn init(&mut self, host: &mut Host, ctrl: &mut Controller) -> InitOutcome {
        self.queues.clear();
        self.alloc_next = 0;
        if ctrl.class_code() != regs::CLASS_NVME {
            self.state = DriverState::Unbound;
            host.log.push(
                Actor::Host,
                "driver-not-bound",
                json!({ "class_code": format!("{:06x}", ctrl.class_code()) }),
            );
            return InitOutcome::NotBound;
        }
        host.set_device_enabled(ctrl.device(), true);
        if ctrl.mmio_read(host, regs::CC, 4) as u32 & regs::CC_EN != 0 {
            ctrl.mmio_write(host, regs::CC, 4, 0);
        }
        let depth = self.cfg.admin_depth;
        let (asq, acq) = match (
            self.alloc(host, depth as u64 * SQE_SIZE as u64),
            self.alloc(host, depth as u64 * CQE_SIZE as u64),
        ) {
            (Ok(a), Ok(b)) => (a, b),
            _ => panic!("queue area too small for admin queues"),
        };
        host.mem.fill(asq..asq + PAGE, 0);
        host.mem.fill(acq..acq + PAGE, 0);
        let aqa = (depth as u64 - 1) | ((depth as u64 - 1) << 16);
        ctrl.mmio_write(host, regs::AQA, 4, aqa);
        ctrl.mmio_write(host, regs::ASQ, 8, asq);
        ctrl.mmio_write(host, regs::ACQ, 8, acq);
        let cc = regs::CC_EN | (6 << regs::CC_IOSQES_SHIFT) | (4 << regs::CC_IOCQES_SHIFT);
        ctrl.mmio_write(host, regs::CC, 4, cc as u64);
        let deadline = host.clock.saturating_add(self.cfg.ready_timeout);
        while self.csts(host, ctrl) & regs::CSTS_RDY == 0 {
            if host.clock >= deadline {
                self.state = DriverState::BoundNotReady;
                host.log.push(
                    Actor::Host,
                    "driver-bound-not-ready",
                    json!({
                        "timeout_ms": self.cfg.ready_timeout.as_millis(),
                        "device_enabled": host.device_enabled(ctrl.device()),
                    }),
                );
                return InitOutcome::NotReadyTimeout;
            }
            self.wait(host, ctrl);
        }
        self.queues
            .insert(0, HostQueue::new(0, asq, acq, depth, depth));
        self.state = DriverState::Ready;
        if let Err(e) = self.identify(host, ctrl) {
            host.log.push(Actor::Host, "driver-init-failed", json!({ "error": e.to_string() }));
            self.state = DriverState::Dead;
            return InitOutcome::NotReadyTimeout;
        }
        let r = self
            .admin(host, ctrl, SubmissionEntry {
                opcode: admin_opcode::SET_FEATURES,
                cdw10: FEATURE_NUM_QUEUES as u32,
                cdw11: 0,
                ..Default::default()
            })
            .and_then(|_| self.create_io_pair(host, ctrl, 1, self.cfg.io_depth, self.cfg.io_depth));
        if let Err(e) = r {
            host.log.push(Actor::Host, "driver-init-failed", json!({ "error": e.to_string() }));
            self.state = DriverState::Dead;
            return InitOutcome::NotReadyTimeout;
        }
        host.log.push(
            Actor::Host,
            "driver-ready",
            json!({ "model": self.model, "blocks": self.block_count, "block_size": self.block_size }),
        );
        InitOutcome::Ready
    }

    fn identify(&mut self, host: &mut Host, ctrl: &mut Controller) -> Result<(), IoError> {
        let buf = Self::scratch(host);
        self.admin(host, ctrl, SubmissionEntry {
            opcode: admin_opcode::IDENTIFY,
            prp1: buf,
            cdw10: 1,
            ..Default::default()
        })?;
        let mn = host.mem.read(buf + 24, 40);
        self.model = String::from_utf8_lossy(mn).trim_end().to_string();
        self.admin(host, ctrl, SubmissionEntry {
            opcode: admin_opcode::IDENTIFY,
            nsid: 1,
            prp1: buf,
            cdw10: 0,
            ..Default::default()
        })?;
        self.block_count = host.mem.read_u64(buf);
        let lbaf = u32::from_le_bytes(host.mem.read(buf + 128, 4).try_into().unwrap());
        self.block_size = 1 << ((lbaf >> 16) & 0xFF);
        Ok(())
    }

    /// Creates IO CQ `qid` then IO SQ `qid` bound to it.
    pub fn create_io_pair(
        &mut self,
        host: &mut Host,
        ctrl: &mut Controller,
        qid: u16,
        sq_size: u16,
        cq_size: u16,
    ) -> Result<(), IoError> {
        let cq = self.alloc(host, cq_size as u64 * CQE_SIZE as u64)?;
        let sq = self.alloc(host, sq_size as u64 * SQE_SIZE as u64)?;
        host.mem.fill(cq..cq + round_page(cq_size as u64 * CQE_SIZE as u64), 0);
        self.admin(host, ctrl, SubmissionEntry {
            opcode: admin_opcode::CREATE_IO_CQ,
            prp1: cq,
            cdw10: qid as u32 | ((cq_size as u32 - 1) << 16),
            cdw11: 0b11,
            ..Default::default()
        })?;
        self.admin(host, ctrl, SubmissionEntry {
            opcode: admin_opcode::CREATE_IO_SQ,
            prp1: sq,
            cdw10: qid as u32 | ((sq_size as u32 - 1) << 16),
            cdw11: 1 | ((qid as u32) << 16),
            ..Default::default()
        })?;
        self.queues
            .insert(qid, HostQueue::new(qid, sq, cq, sq_size, cq_size));
        Ok(())
    }

    /// Writes `entry` into the next SQ slot without ringing. Assigns a cid
    /// unless one is preset (nonzero). Returns the cid used.
    pub fn submit(&mut self, host: &mut Host, qid: u16, mut entry: SubmissionEntry) -> Result<u16, IoError> {
        let q = self.queues.get_mut(&qid).ok_or(IoError::NoQueue(qid))?;
        if q.is_full() {
            return Err(IoError::QueueFull(qid));
        }
        if entry.cid == 0 {
            q.next_cid = q.next_cid.wrapping_add(1).max(1);
            entry.cid = q.next_cid;
        }
        let addr = q.sq_base + q.sq_tail as u64 * SQE_SIZE as u64;
        host.mem.write(addr, &entry.encode());
        q.sq_tail = (q.sq_tail + 1) % q.sq_size;
        Ok(entry.cid)
    }

    /// Publishes every submitted entry by writing the SQ tail doorbell.
    pub fn ring(&mut self, host: &mut Host, ctrl: &mut Controller, qid: u16) -> Result<(), IoError> {
        let q = self.queues.get(&qid).ok_or(IoError::NoQueue(qid))?;
        ctrl.mmio_write(host, regs::sq_tail_doorbell(qid), 4, q.sq_tail as u64);
        Ok(())
    }

    /// Consumes every completion whose phase matches, then writes the CQ
    /// head doorbell once if anything was consumed.
    pub fn reap(&mut self, host: &mut Host, ctrl: &mut Controller, qid: u16) -> Result<Vec<CompletionEntry>, IoError> {
        let q = self.queues.get_mut(&qid).ok_or(IoError::NoQueue(qid))?;
        let mut out = Vec::new();
        loop {
            let addr = q.cq_base + q.cq_head as u64 * CQE_SIZE as u64;
            let cqe = CompletionEntry::decode(host.mem.read(addr, CQE_SIZE));
            if cqe.phase != q.phase {
                break;
            }
            q.sq_head = cqe.sq_head;
            q.cq_head = (q.cq_head + 1) % q.cq_size;
            if q.cq_head == 0 {
                q.phase = !q.phase;
            }
            out.push(cqe);
        }
        if !out.is_empty() {
            let head = q.cq_head;
            ctrl.mmio_write(host, regs::cq_head_doorbell(qid), 4, head as u64);
        }
        while host.take_interrupt().is_some() {}
        Ok(out)
    }

    /// Submits one command and polls until its completion arrives.
    fn execute(&mut self, host: &mut Host, ctrl: &mut Controller, qid: u16, entry: SubmissionEntry) -> Result<CompletionEntry, IoError> {
        if self.state != DriverState::Ready {
            return Err(IoError::NotReady(self.state));
        }
        let cid = self.submit(host, qid, entry)?;
        self.ring(host, ctrl, qid)?;
        let deadline = host.clock.saturating_add(self.cfg.io_timeout);
        loop {
            let got = self.reap(host, ctrl, qid)?;
            if let Some(c) = got.into_iter().find(|c| c.cid == cid) {
                return if c.status.is_success() {
                    Ok(c)
                } else {
                    Err(IoError::Status(c.status))
                };
            }
            if host.clock >= deadline {
                let csts = self.csts(host, ctrl);
                if csts & regs::CSTS_CFS != 0 {
                    self.state = DriverState::Dead;
                    host.log.push(Actor::Host, "device-dead", json!({ "queue": qid, "cid": cid }));
                    return Err(IoError::DeviceDead);
                }
                host.log.push(Actor::Host, "io-timeout", json!({ "queue": qid, "cid": cid }));
                return Err(IoError::Timeout);
            }
            self.wait(host, ctrl);
        }
    }

    pub fn admin(&mut self, host: &mut Host, ctrl: &mut Controller, entry: SubmissionEntry) -> Result<CompletionEntry, IoError> {
        self.execute(host, ctrl, 0, entry)
    }

    fn data_buffer(host: &Host) -> u64 {
        host.mem
            .region(&RegionKind::DataBuffers)
            .expect("host memory has no data buffers")
            .range
            .start
    }

    /// Builds PRP1/PRP2 for a page-aligned buffer of `len` bytes.
    fn build_prps(host: &mut Host, buf: u64, len: u64) -> (u64, u64) {
        if len <= PAGE {
            (buf, 0)
        } else if len <= 2 * PAGE {
            (buf, buf + PAGE)
        } else {
            let list = Self::prp_list_page(host);
            let pages = len.div_ceil(PAGE);
            for i in 1..pages {
                host.mem.write_u64(list + (i - 1) * 8, buf + i * PAGE);
            }
            (buf, list)
        }
    }

    fn max_blocks_per_command(&self) -> u64 {
        (MAX_TRANSFER / self.block_size as u64).min(65536)
    }

    pub fn read(&mut self, host: &mut Host, ctrl: &mut Controller, lba: u64, count: u64) -> Result<Vec<u8>, IoError> {
        if self.state != DriverState::Ready {
            return Err(IoError::NotReady(self.state));
        }
        let bs = self.block_size as u64;
        let mut out = Vec::with_capacity((count * bs) as usize);
        let mut done = 0;
        while done < count {
            let n = (count - done).min(self.max_blocks_per_command());
            let buf = Self::data_buffer(host);
            let (prp1, prp2) = Self::build_prps(host, buf, n * bs);
            self.execute(host, ctrl, 1, SubmissionEntry::io(io_opcode::READ, 0, lba + done, n as u32, prp1, prp2))?;
            out.extend_from_slice(host.mem.read(buf, (n * bs) as usize));
            done += n;
        }
        Ok(out)
    }

    pub fn write(&mut self, host: &mut Host, ctrl: &mut Controller, lba: u64, data: &[u8]) -> Result<(), IoError> {
        if self.state != DriverState::Ready {
            return Err(IoError::NotReady(self.state));
        }
        let bs = self.block_size as u64;
        if data.len() as u64 % bs != 0 {
            return Err(IoError::BadLength(data.len()));
        }
        let count = data.len() as u64 / bs;
        let mut done = 0;
        while done < count {
            let n = (count - done).min(self.max_blocks_per_command());
            let buf = Self::data_buffer(host);
            let chunk = &data[(done * bs) as usize..((done + n) * bs) as usize];
            host.mem.write(buf, chunk);
            let (prp1, prp2) = Self::build_prps(host, buf, n * bs);
            self.execute(host, ctrl, 1, SubmissionEntry::io(io_opcode::WRITE, 0, lba + done, n as u32, prp1, prp2))?;
            done += n;
        }
        Ok(())
    }

    pub fn flush(&mut self, host: &mut Host, ctrl: &mut Controller) -> Result<(), IoError> {
        self.execute(host, ctrl, 1, SubmissionEntry {
            opcode: io_opcode::FLUSH,
            nsid: 1,
            ..Default::default()
        })
        .map(|_| ())
    }

    /// Normal shutdown notification; waits for shutdown-complete, then
    /// disables the controller.
    pub fn shutdown(&mut self, host: &mut Host, ctrl: &mut Controller) -> Result<(), IoError> {
        if ctrl.class_code() != regs::CLASS_NVME {
            return Ok(());
        }
        let cc = ctrl.mmio_read(host, regs::CC, 4);
        ctrl.mmio_write(host, regs::CC, 4, cc | (1 << regs::CC_SHN_SHIFT) as u64);
        let deadline = host.clock.saturating_add(self.cfg.shutdown_timeout);
        let complete = (ShutdownStatus::Complete as u32) << regs::CSTS_SHST_SHIFT;
        let mut result = Ok(());
        while self.csts(host, ctrl) & regs::CSTS_SHST_MASK != complete {
            if host.clock >= deadline {
                host.log.push(Actor::Host, "shutdown-timeout", json!({}));
                result = Err(IoError::Timeout);
                break;
            }
            self.wait(host, ctrl);
        }
        ctrl.mmio_write(host, regs::CC, 4, 0);
        self.queues.clear();
        self.alloc_next = 0;
        self.state = DriverState::Unbound;
        host.log.push(Actor::Host, "host-shutdown", json!({ "clean": result.is_ok() }));
        result
    }
}
