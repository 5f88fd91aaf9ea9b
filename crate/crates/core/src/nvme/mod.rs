//! NVMe controller model: BAR0 register file, admin and IO queue processing,
//! PRP data transfer through the host, completion posting, and the controlled
//! shutdown state machine.
//!
//! The engine is single-threaded. Every MMIO access is followed by
//! [`Controller::service`], which drains fetchable submissions in order (admin
//! queue first, then IO queues round-robin) and posts completions before
//! control returns to the host.

mod admin;
mod io;
pub mod prp;
pub mod queue;
pub mod regs;
pub mod shutdown;
pub mod wire;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::backend::BlockStore;
use crate::event::{Actor, SimTime};
use crate::host::{DeviceId, Host, Interrupt};
use crate::malice::{DeviceCtx, Malice};
pub use queue::{CompletionQueue, QueueKind, SubmissionQueue};
use regs::ShutdownStatus;
pub use shutdown::{HookRun, ShutdownHook};
pub use wire::{CompletionEntry, Status, SubmissionEntry};

pub const BAR_SIZE: u64 = 0x2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Spoof {
    #[default]
    None,
    /// Accepts CC.EN but never reports ready; every BAR0 read returns 0.
    NeverReady,
}

#[derive(Debug, Clone)]
pub struct ControllerConfig {
    pub device: DeviceId,
    pub model: String,
    pub serial: String,
    pub firmware: String,
    pub class_code: u32,
    pub spoof: Spoof,
    pub ready_latency: SimTime,
    pub shutdown_budget: SimTime,
    pub max_queue_entries: u16,
    pub max_io_queues: u16,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            device: DeviceId(0),
            model: "eNVMe Research Drive".into(),
            serial: "ENVME0001".into(),
            firmware: "1.0".into(),
            class_code: regs::CLASS_NVME,
            spoof: Spoof::None,
            ready_latency: SimTime::ZERO,
            shutdown_budget: SimTime::from_millis(2000),
            max_queue_entries: 1024,
            max_io_queues: 16,
        }
    }
}

pub struct Controller {
    cfg: ControllerConfig,
    pub store: BlockStore,
    pub malice: Option<Malice>,
    hooks: Vec<Box<dyn ShutdownHook>>,
    cc: u32,
    ready: bool,
    ready_at: Option<SimTime>,
    cfs: bool,
    shst: ShutdownStatus,
    shutdown_complete_at: Option<SimTime>,
    intms: u32,
    aqa: u32,
    asq: u64,
    acq: u64,
    sqs: BTreeMap<u16, SubmissionQueue>,
    cqs: BTreeMap<u16, CompletionQueue>,
    /// Zero-based granted IO queue counts (submission, completion).
    granted_queues: (u16, u16),
    rr_next: u16,
    dead: bool,
}

impl std::fmt::Debug for Controller {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Controller")
            .field("device", &self.cfg.device)
            .field("cc", &format_args!("{:#x}", self.cc))
            .field("ready", &self.ready)
            .field("shst", &self.shst)
            .field("sqs", &self.sqs.keys().collect::<Vec<_>>())
            .field("cqs", &self.cqs.keys().collect::<Vec<_>>())
            .field("dead", &self.dead)
            .finish()
    }
}

impl Controller {
    pub fn new(cfg: ControllerConfig, store: BlockStore) -> Self {
        assert!(cfg.max_queue_entries >= 2);
        Self {
            cfg,
            store,
            malice: None,
            hooks: Vec::new(),
            cc: 0,
            ready: false,
            ready_at: None,
            cfs: false,
            shst: ShutdownStatus::Normal,
            shutdown_complete_at: None,
            intms: 0,
            aqa: 0,
            asq: 0,
            acq: 0,
            sqs: BTreeMap::new(),
            cqs: BTreeMap::new(),
            granted_queues: (0, 0),
            rr_next: 1,
            dead: false,
        }
    }

    pub fn attach_malice(mut self, malice: Malice) -> Self {
        self.malice = Some(malice);
        self
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.cfg
    }

    pub fn device(&self) -> DeviceId {
        self.cfg.device
    }

    pub fn class_code(&self) -> u32 {
        self.cfg.class_code
    }

    pub fn is_ready(&self) -> bool {
        self.ready
    }

    pub fn is_dead(&self) -> bool {
        self.dead
    }

    pub fn shutdown_status(&self) -> ShutdownStatus {
        self.shst
    }

    pub fn submission_queue(&self, qid: u16) -> Option<&SubmissionQueue> {
        self.sqs.get(&qid)
    }

    pub fn completion_queue(&self, qid: u16) -> Option<&CompletionQueue> {
        self.cqs.get(&qid)
    }

    pub fn register_hook(&mut self, hook: Box<dyn ShutdownHook>) {
        self.hooks.push(hook);
    }

    pub fn pending_hooks(&self) -> usize {
        self.hooks.len()
    }

    fn enabled(&self) -> bool {
        self.cc & regs::CC_EN != 0
    }

    fn cap(&self) -> u64 {
        regs::cap(self.cfg.max_queue_entries - 1, 1)
    }

    /// Applies transitions that were scheduled for a time at or before `now`.
    pub fn sync(&mut self, host: &mut Host) {
        let now = host.clock;
        if let Some(at) = self.ready_at {
            if now >= at && self.enabled() && !self.dead {
                self.ready = true;
                self.ready_at = None;
                host.log.push(Actor::Device, "controller-ready", json!({}));
            }
        }
        if let Some(at) = self.shutdown_complete_at {
            if now >= at {
                self.shutdown_complete_at = None;
                self.shst = ShutdownStatus::Complete;
                host.log.push(Actor::Device, "shutdown-complete", json!({}));
            }
        }
    }

    fn csts(&self) -> u32 {
        let mut v = 0;
        if self.ready && !self.dead {
            v |= regs::CSTS_RDY;
        }
        if self.cfs || self.dead {
            v |= regs::CSTS_CFS;
        }
        v | ((self.shst as u32) << regs::CSTS_SHST_SHIFT)
    }

    fn reg32(&self, offset: u64) -> Option<u32> {
        Some(match offset {
            regs::CAP => self.cap() as u32,
            o if o == regs::CAP + 4 => (self.cap() >> 32) as u32,
            regs::VS => regs::VERSION_1_4,
            regs::INTMS | regs::INTMC => self.intms,
            regs::CC => self.cc,
            regs::CSTS => self.csts(),
            regs::NSSR => 0,
            regs::AQA => self.aqa,
            regs::ASQ => self.asq as u32,
            o if o == regs::ASQ + 4 => (self.asq >> 32) as u32,
            regs::ACQ => self.acq as u32,
            o if o == regs::ACQ + 4 => (self.acq >> 32) as u32,
            0x18 => 0,
            _ => return None,
        })
    }

    fn doorbell_end(&self) -> u64 {
        regs::sq_tail_doorbell(self.cfg.max_io_queues + 1)
    }

    fn access_error(&self, host: &mut Host, offset: u64, width: u8, write: bool, why: &str) {
        host.log.push(
            Actor::Device,
            "access-error",
            json!({ "offset": offset, "width": width, "write": write, "reason": why }),
        );
    }

    fn check_access(&self, host: &mut Host, offset: u64, width: u8, write: bool) -> bool {
        if width != 4 && width != 8 {
            self.access_error(host, offset, width, write, "width");
            return false;
        }
        if offset % width as u64 != 0 {
            self.access_error(host, offset, width, write, "unaligned");
            return false;
        }
        if width == 8 && !regs::is_64bit(offset) {
            self.access_error(host, offset, width, write, "width");
            return false;
        }
        let in_regs = offset < regs::DOORBELL_BASE && self.reg32(offset).is_some();
        let in_doorbells = (regs::DOORBELL_BASE..self.doorbell_end()).contains(&offset);
        if !in_regs && !in_doorbells {
            self.access_error(host, offset, width, write, "out-of-map");
            return false;
        }
        true
    }

    /// Host read of BAR0. Invalid accesses log an `access-error` and read 0.
    pub fn mmio_read(&mut self, host: &mut Host, offset: u64, width: u8) -> u64 {
        self.sync(host);
        if self.cfg.spoof == Spoof::NeverReady {
            return 0;
        }
        if !self.check_access(host, offset, width, false) {
            return 0;
        }
        if offset >= regs::DOORBELL_BASE {
            self.access_error(host, offset, width, false, "write-only");
            return 0;
        }
        let lo = self.reg32(offset).unwrap_or(0) as u64;
        if width == 8 {
            lo | (self.reg32(offset + 4).unwrap_or(0) as u64) << 32
        } else {
            lo
        }
    }

    /// Host write to BAR0, followed by a service pass.
    pub fn mmio_write(&mut self, host: &mut Host, offset: u64, width: u8, value: u64) {
        self.sync(host);
        if !self.check_access(host, offset, width, true) {
            return;
        }
        if offset >= regs::DOORBELL_BASE {
            self.write_doorbell(host, offset, value as u32);
        } else if regs::is_read_only(offset) {
            host.log.push(
                Actor::Device,
                "ro-write",
                json!({ "offset": offset, "value": value }),
            );
        } else if width == 8 {
            self.write_reg32(host, offset, value as u32);
            self.write_reg32(host, offset + 4, (value >> 32) as u32);
        } else {
            self.write_reg32(host, offset, value as u32);
        }
        self.service(host);
    }

    fn write_reg32(&mut self, host: &mut Host, offset: u64, v: u32) {
        match offset {
            regs::INTMS => self.intms |= v,
            regs::INTMC => self.intms &= !v,
            regs::CC => self.write_cc(host, v),
            regs::NSSR => {
                // "NVMe" in ASCII requests a subsystem reset.
                if v == 0x4E56_4D65 {
                    self.reset(host);
                }
            }
            regs::AQA => self.aqa = v & 0x0FFF_0FFF,
            regs::ASQ => self.asq = (self.asq & !0xFFFF_FFFF) | (v as u64 & !0xFFF),
            o if o == regs::ASQ + 4 => self.asq = (self.asq & 0xFFFF_FFFF) | (v as u64) << 32,
            regs::ACQ => self.acq = (self.acq & !0xFFFF_FFFF) | (v as u64 & !0xFFF),
            o if o == regs::ACQ + 4 => self.acq = (self.acq & 0xFFFF_FFFF) | (v as u64) << 32,
            _ => {}
        }
    }

    fn write_cc(&mut self, host: &mut Host, v: u32) {
        let was_enabled = self.enabled();
        let old_shn = (self.cc & regs::CC_SHN_MASK) >> regs::CC_SHN_SHIFT;
        self.cc = v;
        let now_enabled = self.enabled();
        if !was_enabled && now_enabled {
            self.enable(host);
        } else if was_enabled && !now_enabled {
            self.reset(host);
        }
        let shn = (v & regs::CC_SHN_MASK) >> regs::CC_SHN_SHIFT;
        if shn != 0 && old_shn == 0 {
            self.begin_shutdown(host, shn);
        }
    }

    fn enable(&mut self, host: &mut Host) {
        let asqs = (self.aqa & 0xFFF) as u16 + 1;
        let acqs = ((self.aqa >> 16) & 0xFFF) as u16 + 1;
        host.log.push(
            Actor::Device,
            "controller-enabled",
            json!({ "asqs": asqs, "acqs": acqs, "asq": self.asq, "acq": self.acq }),
        );
        if self.dead {
            return;
        }
        if asqs < 2 || acqs < 2 || asqs > self.cfg.max_queue_entries || acqs > self.cfg.max_queue_entries {
            self.cfs = true;
            host.log.push(Actor::Device, "controller-fatal", json!({ "reason": "admin-queue-size" }));
            return;
        }
        self.cqs.insert(0, CompletionQueue::new(0, self.acq, acqs, true));
        self.sqs
            .insert(0, SubmissionQueue::new(0, 0, QueueKind::Admin, self.asq, asqs));
        match self.cfg.spoof {
            Spoof::NeverReady => {
                host.log.push(Actor::Device, "spoof-never-ready", json!({}));
            }
            Spoof::None => {
                self.ready_at = Some(host.clock.saturating_add(self.cfg.ready_latency));
                self.sync(host);
            }
        }
    }

    /// Controller reset (CC.EN 1 -> 0 or subsystem reset). Queues are torn
    /// down; a bricked controller stays dead.
    fn reset(&mut self, host: &mut Host) {
        self.sqs.clear();
        self.cqs.clear();
        self.ready = false;
        self.ready_at = None;
        self.cfs = false;
        self.shst = ShutdownStatus::Normal;
        self.shutdown_complete_at = None;
        self.granted_queues = (0, 0);
        self.cc &= !regs::CC_EN;
        host.log.push(Actor::Device, "controller-disabled", json!({}));
    }

    fn write_doorbell(&mut self, host: &mut Host, offset: u64, value: u32) {
        let Some(db) = regs::decode_doorbell(offset) else {
            self.access_error(host, offset, 4, true, "unaligned");
            return;
        };
        let value = value as u16;
        match db {
            regs::Doorbell::SqTail(q) => match self.sqs.get_mut(&q) {
                Some(sq) => {
                    if let Err(e) = sq.ring(value) {
                        host.log.push(
                            Actor::Device,
                            "doorbell-error",
                            json!({ "queue": q, "kind": "sq-tail", "value": e.value, "size": e.size }),
                        );
                    }
                }
                None => {
                    host.log.push(
                        Actor::Device,
                        "doorbell-unknown-queue",
                        json!({ "queue": q, "kind": "sq-tail", "value": value }),
                    );
                }
            },
            regs::Doorbell::CqHead(q) => match self.cqs.get_mut(&q) {
                Some(cq) => {
                    if let Err(e) = cq.set_head(value) {
                        host.log.push(
                            Actor::Device,
                            "doorbell-error",
                            json!({ "queue": q, "kind": "cq-head", "value": e.value, "size": e.size }),
                        );
                    }
                }
                None => {
                    host.log.push(
                        Actor::Device,
                        "doorbell-unknown-queue",
                        json!({ "queue": q, "kind": "cq-head", "value": value }),
                    );
                }
            },
        }
    }

    /// Runs a malice callback with a device context, if malice is attached.
    fn with_malice<R>(&mut self, host: &mut Host, f: impl FnOnce(&mut Malice, &mut DeviceCtx) -> R) -> Option<R> {
        let device = self.cfg.device;
        let m = self.malice.as_mut()?;
        let mut ctx = DeviceCtx {
            host,
            store: &mut self.store,
            hooks: &mut self.hooks,
            device,
        };
        Some(f(m, &mut ctx))
    }

    /// Lets time-triggered malice run. Called from the service loop and by
    /// the platform when simulated time advances.
    pub fn tick(&mut self, host: &mut Host) {
        self.sync(host);
        self.with_malice(host, |m, ctx| m.on_tick(ctx));
        self.check_dead(host);
    }

    fn check_dead(&mut self, host: &mut Host) -> bool {
        if !self.dead && self.store.is_dead() {
            self.dead = true;
            self.ready = false;
            host.log.push(Actor::Device, "device-dead", json!({}));
        }
        self.dead
    }

    /// Drains every fetchable submission. Admin commands take priority; IO
    /// queues are served round-robin, one command per turn.
    pub fn service(&mut self, host: &mut Host) {
        self.sync(host);
        if self.check_dead(host) || !self.ready {
            return;
        }
        self.with_malice(host, |m, ctx| m.on_tick(ctx));
        loop {
            if self.check_dead(host) || !self.ready {
                return;
            }
            if self.step(host, 0) {
                continue;
            }
            let ids: Vec<u16> = self.sqs.keys().copied().filter(|&q| q != 0).collect();
            if ids.is_empty() {
                return;
            }
            let start = ids.iter().position(|&q| q >= self.rr_next).unwrap_or(0);
            let mut progressed = false;
            for i in 0..ids.len() {
                let q = ids[(start + i) % ids.len()];
                if self.step(host, q) {
                    self.rr_next = q + 1;
                    progressed = true;
                    break;
                }
            }
            if !progressed {
                return;
            }
        }
    }

    /// Fetches and executes one command from `qid`. Returns false when the
    /// queue has nothing fetchable.
    fn step(&mut self, host: &mut Host, qid: u16) -> bool {
        let Some(sq) = self.sqs.get(&qid) else {
            return false;
        };
        if sq.is_empty() || sq.stalled {
            return false;
        }
        let cqid = sq.cqid;
        // Back-pressure: hold the submission until its completion has room.
        match self.cqs.get(&cqid) {
            Some(cq) if !cq.is_full() => {}
            _ => return false,
        }
        let addr = sq.head_addr();
        let raw = match host.dma_read(self.cfg.device, addr, wire::SQE_SIZE) {
            Ok(b) => b,
            Err(fault) => {
                let sq = self.sqs.get_mut(&qid).unwrap();
                sq.stalled = true;
                host.log.push(
                    Actor::Device,
                    "fetch-fault",
                    json!({ "queue": qid, "head": sq.head, "address": fault.address }),
                );
                let cqe = CompletionEntry {
                    result: 0,
                    sq_head: sq.head,
                    sq_id: qid,
                    cid: 0xFFFF,
                    status: Status::INTERNAL_ERROR,
                    phase: false,
                };
                if self.cqs.get(&0).is_some_and(|cq| !cq.is_full()) {
                    self.post_completion(host, 0, cqe);
                }
                return true;
            }
        };
        let entry = SubmissionEntry::decode(&raw);
        let sq = self.sqs.get_mut(&qid).unwrap();
        sq.advance();
        let (kind, head) = (sq.kind, sq.head);
        let done = match kind {
            QueueKind::Admin => self.execute_admin(host, &entry),
            QueueKind::Io => self.execute_io(host, &entry),
        };
        let Some((status, result)) = done else {
            // Discarded: the device died under this command.
            return true;
        };
        let cqe = CompletionEntry {
            result,
            sq_head: head,
            sq_id: qid,
            cid: entry.cid,
            status,
            phase: false,
        };
        self.post_completion(host, cqid, cqe);
        true
    }

    /// Writes `cqe` at the queue tail with the current phase and raises an
    /// interrupt. Full queues and faulting writes drop the entry.
    pub fn post_completion(&mut self, host: &mut Host, cqid: u16, mut cqe: CompletionEntry) -> bool {
        let device = self.cfg.device;
        let Some(cq) = self.cqs.get_mut(&cqid) else {
            host.log.push(
                Actor::Device,
                "completion-dropped",
                json!({ "queue": cqid, "cid": cqe.cid, "reason": "no-queue" }),
            );
            return false;
        };
        if cq.is_full() {
            host.log.push(
                Actor::Device,
                "cq-overflow",
                json!({ "queue": cqid, "cid": cqe.cid }),
            );
            return false;
        }
        cqe.phase = cq.phase;
        if host.dma_write(device, cq.tail_addr(), &cqe.encode()).is_err() {
            host.log.push(
                Actor::Device,
                "completion-dropped",
                json!({ "queue": cqid, "cid": cqe.cid, "reason": "dma-fault" }),
            );
            return false;
        }
        cq.advance();
        if cq.interrupts {
            host.raise_interrupt(Interrupt { device, cqid });
        }
        true
    }
}
