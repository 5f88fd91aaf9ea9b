//! A host with one NVMe device attached, plus the host-side boot flow:
//! firmware and bootloader with the IOMMU off, then the kernel, which turns
//! the IOMMU on unless its command line says otherwise and runs init.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::json;
use sha2::{Digest, Sha256};

use crate::backend::BlockStore;
use crate::diskfs::{parse_partitions, to_absolute_lbas, BlockDevice, DevError, Ext2Fs, PartitionEntry, LINUX_FS_GUID};
use crate::event::{Actor, SimTime};
use crate::host::driver::{Driver, DriverConfig, DriverState, InitOutcome};
use crate::host::trace::{self, ReplayOutcome, TraceError, TraceOp};
use crate::host::{DeviceId, Host, HostMemory, IommuConfig, RegionKind, MIB};
use crate::malice::grub;
use crate::malice::Malice;
use crate::nvme::prp::MAX_TRANSFER;
use crate::nvme::{Controller, ControllerConfig};

#[derive(Debug, Clone)]
pub struct PlatformConfig {
    pub memory: u64,
    pub controller: ControllerConfig,
    pub driver: DriverConfig,
    /// A second device (e.g. a NIC) whose MMIO window sits in host memory.
    pub peer: Option<DeviceId>,
    /// IOMMU groups applied when the kernel enables the IOMMU.
    pub iommu_groups: Vec<Vec<DeviceId>>,
    pub kernel_seed: u64,
    pub bootloader_config: String,
    pub init_path: String,
}

impl Default for PlatformConfig {
    fn default() -> Self {
        Self {
            memory: 64 * MIB,
            controller: ControllerConfig::default(),
            driver: DriverConfig::default(),
            peer: None,
            iommu_groups: Vec::new(),
            kernel_seed: 1,
            bootloader_config: "/boot/grub/grub.cfg".into(),
            init_path: "/sbin/init".into(),
        }
    }
}

/// How far a boot got.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BootReport {
    pub completed: bool,
    pub cmdline: Vec<String>,
    pub iommu_enabled: bool,
    pub init_sha256: Option<String>,
}

#[derive(Debug)]
pub struct Platform {
    pub cfg: PlatformConfig,
    pub host: Host,
    pub ctrl: Controller,
    pub driver: Driver,
    cache: BTreeMap<String, Vec<u8>>,
    boots: u32,
}

/// The attached disk as seen through the host's NVMe driver.
pub struct HostDisk<'a> {
    pub host: &'a mut Host,
    pub ctrl: &'a mut Controller,
    pub driver: &'a mut Driver,
}

impl BlockDevice for HostDisk<'_> {
    fn block_size(&self) -> u32 {
        self.driver.block_size()
    }
    fn block_count(&self) -> u64 {
        self.driver.block_count()
    }
    fn read_blocks(&mut self, lba: u64, count: u64) -> Result<Vec<u8>, DevError> {
        self.driver
            .read(self.host, self.ctrl, lba, count)
            .map_err(|e| DevError {
                lba,
                count,
                msg: e.to_string(),
            })
    }
}

fn sha256_hex(data: &[u8]) -> String {
    hex::encode(Sha256::digest(data))
}

fn linux_partition(parts: &[PartitionEntry]) -> Option<&PartitionEntry> {
    parts
        .iter()
        .find(|p| p.type_tag == LINUX_FS_GUID || p.type_tag == "0x83")
        .or(parts.first())
}

impl Platform {
    pub fn new(cfg: PlatformConfig, store: BlockStore, malice: Option<Malice>) -> Result<Self, String> {
        let mem = HostMemory::with_default_layout(cfg.memory, cfg.peer).map_err(|e| e.to_string())?;
        let mut ctrl = Controller::new(cfg.controller.clone(), store);
        if let Some(m) = malice {
            ctrl = ctrl.attach_malice(m);
        }
        Ok(Self {
            host: Host::new(mem),
            driver: Driver::new(cfg.driver.clone()),
            ctrl,
            cfg,
            cache: BTreeMap::new(),
            boots: 0,
        })
    }

    pub fn device(&self) -> DeviceId {
        self.ctrl.device()
    }

    pub fn disk(&mut self) -> HostDisk<'_> {
        HostDisk {
            host: &mut self.host,
            ctrl: &mut self.ctrl,
            driver: &mut self.driver,
        }
    }

    /// Lets simulated time pass with the device and host actor running.
    pub fn advance(&mut self, by: SimTime) {
        let step = SimTime::from_millis(1);
        let end = self.host.clock.saturating_add(by);
        while self.host.clock < end {
            let d = step.min(end.saturating_sub(self.host.clock));
            self.host.advance(d);
            self.ctrl.tick(&mut self.host);
            self.host.run_actor();
        }
    }

    fn boot_failed(&mut self, stage: &str, why: String) -> BootReport {
        self.host
            .log
            .push(Actor::Host, "boot-failed", json!({ "stage": stage, "error": why }));
        BootReport {
            completed: false,
            cmdline: Vec::new(),
            iommu_enabled: self.host.iommu().enabled,
            init_sha256: None,
        }
    }

    /// Reads a file the way a kernel with readahead would: one command
    /// spanning all extents when that fits a single transfer.
    pub fn read_file(&mut self, path: &str) -> Result<Vec<u8>, String> {
        if let Some(c) = self.cache.get(path) {
            return Ok(c.clone());
        }
        let mut disk = self.disk();
        let parts = parse_partitions(&mut disk).map_err(|e| e.to_string())?;
        let part = linux_partition(&parts).ok_or("no partition")?.clone();
        let fs = Ext2Fs::open(&mut disk, &part).map_err(|e| e.to_string())?;
        let data = read_spanning(&fs, &mut disk, &part, path)?;
        self.cache.insert(path.to_string(), data.clone());
        Ok(data)
    }

    pub fn drop_caches(&mut self) {
        self.cache.clear();
        self.host.log.push(Actor::Host, "drop-caches", json!({}));
    }

    pub fn boot(&mut self) -> BootReport {
        self.boots += 1;
        self.cache.clear();
        self.host
            .log
            .push(Actor::Host, "boot-start", json!({ "boot": self.boots }));
        // Firmware and bootloader: no IOMMU yet.
        let _ = self.host.iommu_configure(IommuConfig::disabled());
        match self.driver.init(&mut self.host, &mut self.ctrl) {
            InitOutcome::Ready => {}
            other => return self.boot_failed("firmware", format!("{other:?}")),
        }
        let cfg_path = self.cfg.bootloader_config.clone();
        let cmdline = {
            let mut disk = self.disk();
            let parts = match parse_partitions(&mut disk) {
                Ok(p) => p,
                Err(e) => return self.boot_failed("bootloader", e.to_string()),
            };
            let Some(part) = linux_partition(&parts).cloned() else {
                return self.boot_failed("bootloader", "no partition".into());
            };
            let r = disk
                .read_blocks(part.start_lba, 2.min(part.length_lbas))
                .map_err(|e| e.to_string())
                .and_then(|_| Ext2Fs::open(&mut disk, &part).map_err(|e| e.to_string()))
                .and_then(|fs| read_spanning(&fs, &mut disk, &part, &cfg_path));
            match r {
                Ok(cfg) => grub::kernel_cmdline(&cfg).unwrap_or_default(),
                Err(e) => return self.boot_failed("bootloader", e),
            }
        };
        self.host
            .log
            .push(Actor::Host, "bootloader", json!({ "cmdline": cmdline.join(" ") }));

        // Kernel.
        self.host.load_kernel(self.cfg.kernel_seed);
        let iommu_on = !grub::cmdline_disables_iommu(&cmdline);
        let iommu = if iommu_on {
            let dev = self.device();
            let mut c = IommuConfig::enabled();
            for kind in [RegionKind::QueueArea, RegionKind::DataBuffers] {
                if let Some(r) = self.host.mem.region(&kind) {
                    c = c.allow(dev, r.range.clone());
                }
            }
            for g in &self.cfg.iommu_groups {
                c = c.group(g.clone());
            }
            c
        } else {
            IommuConfig::disabled()
        };
        if let Err(e) = self.host.iommu_configure(iommu) {
            return self.boot_failed("kernel", e.to_string());
        }
        self.host
            .log
            .push(Actor::Host, "kernel-start", json!({ "iommu": iommu_on }));
        match self.driver.init(&mut self.host, &mut self.ctrl) {
            InitOutcome::Ready => {}
            other => return self.boot_failed("kernel", format!("{other:?}")),
        }
        let init_path = self.cfg.init_path.clone();
        let init = match self.read_file(&init_path) {
            Ok(d) => d,
            Err(e) => return self.boot_failed("init", e),
        };
        let sha = sha256_hex(&init);
        self.host.log.push(
            Actor::Host,
            "host-exec",
            json!({ "path": init_path, "sha256": sha, "bytes": init.len() }),
        );
        self.host.run_actor();
        BootReport {
            completed: true,
            cmdline,
            iommu_enabled: iommu_on,
            init_sha256: Some(sha),
        }
    }

    /// Controlled shutdown through the driver; drops the page cache.
    pub fn shutdown(&mut self) {
        self.cache.clear();
        if self.driver.state() == DriverState::Ready || self.driver.state() == DriverState::BoundNotReady {
            let _ = self.driver.shutdown(&mut self.host, &mut self.ctrl);
        }
    }

    pub fn reboot(&mut self) -> BootReport {
        self.shutdown();
        self.host.power_cycle();
        self.boot()
    }

    pub fn replay(&mut self, ops: &[TraceOp], base_dir: &Path) -> Result<ReplayOutcome, TraceError> {
        self.cache.clear();
        trace::replay(&mut self.host, &mut self.ctrl, &mut self.driver, ops, base_dir)
    }
}

fn read_spanning(
    fs: &Ext2Fs,
    disk: &mut HostDisk,
    part: &PartitionEntry,
    path: &str,
) -> Result<Vec<u8>, String> {
    let map = fs.resolve_path(disk, path).map_err(|e| e.to_string())?;
    let bs = disk.block_size() as u64;
    let ranges = to_absolute_lbas(&map, part, bs as u32).map_err(|e| e.to_string())?;
    let (Some(first), Some(last)) = (
        ranges.iter().map(|r| r.start).min(),
        ranges.iter().map(|r| r.end).max(),
    ) else {
        return Ok(Vec::new());
    };
    if (last - first) * bs > MAX_TRANSFER {
        return fs.read_extents(disk, &map).map_err(|e| e.to_string());
    }
    let span = disk.read_blocks(first, last - first).map_err(|e| e.to_string())?;
    let mut out = Vec::with_capacity(map.file_size as usize);
    for r in &ranges {
        let s = ((r.start - first) * bs) as usize;
        let e = ((r.end - first) * bs) as usize;
        out.extend_from_slice(&span[s..e]);
    }
    out.truncate(map.file_size as usize);
    Ok(out)
}
