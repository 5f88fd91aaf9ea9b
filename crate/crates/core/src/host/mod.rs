//! Simulated host: physical memory, IOMMU, interrupt queue, the host actor,
//! and a minimal NVMe driver.

pub mod driver;
pub mod iommu;
pub mod memory;
pub mod trace;

use std::collections::{BTreeSet, VecDeque};
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::event::{Actor, EventLog, SimTime};
pub use iommu::{ConfigError, FaultReason, IommuConfig};
pub use memory::{HostMemory, Region, RegionKind, KERNEL_SIGNATURE, MIB, MODULE_MAGIC, PAGE_SIZE};

/// Identifies a DMA-capable device on the simulated bus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DeviceId(pub u32);

impl fmt::Display for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "dev{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    Read,
    Write,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DmaFault {
    pub device: DeviceId,
    pub address: u64,
    pub length: u64,
    pub direction: Direction,
    pub reason: FaultReason,
}

impl fmt::Display for DmaFault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "IO page fault: {} {:?} {:#x}+{} ({:?})",
            self.device, self.direction, self.address, self.length, self.reason
        )
    }
}

/// Interrupt delivered as a host-visible event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interrupt {
    pub device: DeviceId,
    pub cqid: u16,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct DmaStats {
    pub reads: u64,
    pub writes: u64,
    pub faults: u64,
}

#[derive(Debug)]
pub struct Host {
    pub mem: HostMemory,
    iommu: IommuConfig,
    disabled: BTreeSet<DeviceId>,
    pub log: EventLog,
    pub clock: SimTime,
    interrupts: VecDeque<Interrupt>,
    /// Device writes that landed in the kernel region since the host actor
    /// last ran.
    kernel_writes: Vec<Range<u64>>,
    scripted: VecDeque<(u64, Vec<u8>)>,
    module_executed: bool,
    kernel_addr: Option<u64>,
    stats: DmaStats,
}

impl Host {
    pub fn new(mem: HostMemory) -> Self {
        Self {
            mem,
            iommu: IommuConfig::disabled(),
            disabled: BTreeSet::new(),
            log: EventLog::new(),
            clock: SimTime::ZERO,
            interrupts: VecDeque::new(),
            kernel_writes: Vec::new(),
            scripted: VecDeque::new(),
            module_executed: false,
            kernel_addr: None,
            stats: DmaStats::default(),
        }
    }

    pub fn iommu(&self) -> &IommuConfig {
        &self.iommu
    }

    /// Applies a new IOMMU configuration. Takes effect for the next access;
    /// the simulation never reconfigures mid-transfer.
    pub fn iommu_configure(&mut self, cfg: IommuConfig) -> Result<(), ConfigError> {
        cfg.validate()?;
        self.log.push(
            Actor::Host,
            "iommu-config",
            json!({
                "enabled": cfg.enabled,
                "page_size": cfg.page_size,
                "allow": cfg.allow.iter().map(|(d, r)| (d.to_string(), r.iter().map(|x| [x.start, x.end]).collect::<Vec<_>>())).collect::<std::collections::BTreeMap<_, _>>(),
                "groups": cfg.groups.iter().map(|g| g.iter().map(|d| d.to_string()).collect::<Vec<_>>()).collect::<Vec<_>>(),
            }),
        );
        self.iommu = cfg;
        Ok(())
    }

    pub fn set_device_enabled(&mut self, device: DeviceId, enabled: bool) {
        if enabled {
            self.disabled.remove(&device);
        } else {
            self.disabled.insert(device);
        }
    }

    pub fn device_enabled(&self, device: DeviceId) -> bool {
        !self.disabled.contains(&device)
    }

    pub fn dma_stats(&self) -> DmaStats {
        self.stats
    }

    fn check(&mut self, device: DeviceId, addr: u64, len: u64, dir: Direction) -> Result<(), DmaFault> {
        iommu::check_access(&self.iommu, &self.mem, &self.disabled, device, addr, len).map_err(
            |reason| {
                self.stats.faults += 1;
                let fault = DmaFault {
                    device,
                    address: addr,
                    length: len,
                    direction: dir,
                    reason,
                };
                self.log.push(
                    Actor::Host,
                    "dma-fault",
                    json!({
                        "device": device.to_string(),
                        "address": addr,
                        "length": len,
                        "direction": dir,
                        "reason": reason,
                    }),
                );
                fault
            },
        )
    }

    /// Device-initiated read. Faults transfer nothing.
    pub fn dma_read(&mut self, device: DeviceId, addr: u64, len: usize) -> Result<Vec<u8>, DmaFault> {
        self.check(device, addr, len as u64, Direction::Read)?;
        self.stats.reads += 1;
        Ok(self.mem.read(addr, len).to_vec())
    }

    /// Device-initiated write. Faults change zero bytes.
    pub fn dma_write(&mut self, device: DeviceId, addr: u64, data: &[u8]) -> Result<(), DmaFault> {
        self.check(device, addr, data.len() as u64, Direction::Write)?;
        self.stats.writes += 1;
        self.mem.write(addr, data);
        if let Some(k) = self.mem.region(&RegionKind::Kernel) {
            let end = addr + data.len() as u64;
            if addr < k.range.end && k.range.start < end {
                self.kernel_writes.push(addr..end);
            }
        }
        Ok(())
    }

    pub fn raise_interrupt(&mut self, irq: Interrupt) {
        self.interrupts.push_back(irq);
    }

    pub fn take_interrupt(&mut self) -> Option<Interrupt> {
        self.interrupts.pop_front()
    }

    pub fn pending_interrupts(&self) -> usize {
        self.interrupts.len()
    }

    pub fn advance(&mut self, by: SimTime) {
        self.clock = self.clock.saturating_add(by);
    }

    /// Loads the kernel image into memory (at a seed-chosen page).
    pub fn load_kernel(&mut self, seed: u64) -> Option<u64> {
        self.mem.clear_region(&RegionKind::Kernel);
        self.module_executed = false;
        self.kernel_writes.clear();
        let addr = self.mem.plant_kernel(seed);
        self.kernel_addr = addr;
        if let Some(a) = addr {
            self.log.push(Actor::Host, "kernel-loaded", json!({ "address": a }));
        }
        addr
    }

    pub fn kernel_addr(&self) -> Option<u64> {
        self.kernel_addr
    }

    /// Clears RAM contents (power cycle).
    pub fn power_cycle(&mut self) {
        let size = self.mem.size();
        self.mem.fill(0..size, 0);
        self.kernel_addr = None;
        self.module_executed = false;
        self.kernel_writes.clear();
        self.interrupts.clear();
        self.scripted.clear();
    }

    /// Address of the byte the kernel sets once an injected module ran.
    pub fn module_flag_addr(&self) -> Option<u64> {
        self.mem.region(&RegionKind::Kernel).map(|r| r.range.start)
    }

    pub fn module_executed(&self) -> bool {
        self.module_executed
    }

    /// Schedules a host-side memory write applied the next time the host actor
    /// runs (models concurrent host activity).
    pub fn script_mutation(&mut self, addr: u64, data: Vec<u8>) {
        self.scripted.push_back((addr, data));
    }

    /// Gives the host actor a turn: scripted mutations land, and any module
    /// image written into the kernel region by a device gets executed.
    pub fn run_actor(&mut self) {
        while let Some((addr, data)) = self.scripted.pop_front() {
            if self.mem.contains(addr, data.len() as u64) {
                self.mem.write(addr, &data);
                self.log.push(
                    Actor::Host,
                    "host-mutation",
                    json!({ "address": addr, "length": data.len() }),
                );
            }
        }
        let writes = std::mem::take(&mut self.kernel_writes);
        for w in writes {
            let len = (w.end - w.start) as usize;
            if len >= MODULE_MAGIC.len() && self.mem.read(w.start, MODULE_MAGIC.len()) == MODULE_MAGIC {
                if self.kernel_addr.is_none() {
                    continue;
                }
                self.module_executed = true;
                if let Some(flag) = self.module_flag_addr() {
                    self.mem.write(flag, &[1]);
                }
                self.log.push(
                    Actor::Host,
                    "module-executed",
                    json!({ "address": w.start, "length": len }),
                );
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::memory::MIB;
    use super::*;

    fn host() -> Host {
        Host::new(HostMemory::with_default_layout(16 * MIB, Some(DeviceId(1))).unwrap())
    }

    #[test]
    fn faulting_access_changes_nothing() {
        let mut h = host();
        let q = h.mem.region(&RegionKind::QueueArea).unwrap().range.clone();
        let k = h.mem.region(&RegionKind::Kernel).unwrap().range.clone();
        h.iommu_configure(IommuConfig::enabled().allow(DeviceId(0), q.clone()))
            .unwrap();
        let before = h.mem.as_bytes().to_vec();
        // Straddles queue area end into the data region: must fault whole.
        assert!(h.dma_write(DeviceId(0), q.end - 4, &[0xFF; 8]).is_err());
        assert!(h.dma_write(DeviceId(0), k.start, &[0xFF; 8]).is_err());
        assert_eq!(h.mem.as_bytes(), &before[..]);
        assert_eq!(h.log.count("dma-fault"), 2);
        assert!(h.dma_write(DeviceId(0), q.start, &[0xFF; 8]).is_ok());
    }

    #[test]
    fn module_executes_only_when_host_runs() {
        let mut h = host();
        h.load_kernel(9).unwrap();
        let k = h.mem.region(&RegionKind::Kernel).unwrap().range.clone();
        let mut payload = MODULE_MAGIC.to_vec();
        payload.extend_from_slice(b"rootkit");
        h.dma_write(DeviceId(0), k.start + 0x2000, &payload).unwrap();
        assert!(!h.module_executed());
        h.run_actor();
        assert!(h.module_executed());
        assert_eq!(h.mem.read(h.module_flag_addr().unwrap(), 1), &[1]);
        assert_eq!(h.log.count("module-executed"), 1);
    }

    #[test]
    fn non_module_writes_do_not_execute() {
        let mut h = host();
        h.load_kernel(9).unwrap();
        let k = h.mem.region(&RegionKind::Kernel).unwrap().range.clone();
        h.dma_write(DeviceId(0), k.start + 0x2000, b"just data").unwrap();
        h.run_actor();
        assert!(!h.module_executed());
    }
}
