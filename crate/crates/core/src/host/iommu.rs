//! Page allow-list IOMMU with device groups.
//!
//! No IOVA translation: a device address is a host-physical address and the
//! IOMMU only decides reachability.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use serde::Serialize;
use thiserror::Error;

use super::memory::{HostMemory, RegionKind};
use super::DeviceId;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("page size {0} is not a power of two >= 512")]
    PageSize(u64),
    #[error("allowed range {start:#x}..{end:#x} for {device} is not page aligned")]
    Unaligned {
        device: DeviceId,
        start: u64,
        end: u64,
    },
    #[error("{0} appears in more than one IOMMU group")]
    DuplicateGroupMember(DeviceId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IommuConfig {
    pub enabled: bool,
    pub page_size: u64,
    pub allow: BTreeMap<DeviceId, Vec<Range<u64>>>,
    /// Devices that the IOMMU cannot isolate from one another. Devices not
    /// listed form singleton groups.
    pub groups: Vec<Vec<DeviceId>>,
}

impl Default for IommuConfig {
    fn default() -> Self {
        Self::disabled()
    }
}

impl IommuConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            page_size: 4096,
            allow: BTreeMap::new(),
            groups: Vec::new(),
        }
    }

    pub fn enabled() -> Self {
        Self {
            enabled: true,
            ..Self::disabled()
        }
    }

    pub fn allow(mut self, device: DeviceId, range: Range<u64>) -> Self {
        self.allow.entry(device).or_default().push(range);
        self
    }

    pub fn group(mut self, members: Vec<DeviceId>) -> Self {
        self.groups.push(members);
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.page_size < 512 || !self.page_size.is_power_of_two() {
            return Err(ConfigError::PageSize(self.page_size));
        }
        for (dev, ranges) in &self.allow {
            for r in ranges {
                if r.start % self.page_size != 0 || r.end % self.page_size != 0 || r.end < r.start
                {
                    return Err(ConfigError::Unaligned {
                        device: *dev,
                        start: r.start,
                        end: r.end,
                    });
                }
            }
        }
        let mut seen = BTreeSet::new();
        for g in &self.groups {
            for d in g {
                if !seen.insert(*d) {
                    return Err(ConfigError::DuplicateGroupMember(*d));
                }
            }
        }
        Ok(())
    }

    pub fn same_group(&self, a: DeviceId, b: DeviceId) -> bool {
        a == b
            || self
                .groups
                .iter()
                .any(|g| g.contains(&a) && g.contains(&b))
    }

    fn page_allowed(&self, device: DeviceId, page_start: u64) -> bool {
        self.allow.get(&device).is_some_and(|ranges| {
            ranges
                .iter()
                .any(|r| r.start <= page_start && page_start + self.page_size <= r.end)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FaultReason {
    Unmapped,
    DisabledDevice,
}

/// Decides whether `device` may touch `[addr, addr + len)`. All-or-nothing:
/// every page must be reachable.
pub fn check_access(
    cfg: &IommuConfig,
    mem: &HostMemory,
    disabled: &BTreeSet<DeviceId>,
    device: DeviceId,
    addr: u64,
    len: u64,
) -> Result<(), FaultReason> {
    if disabled.contains(&device) {
        return Err(FaultReason::DisabledDevice);
    }
    if len == 0 || !mem.contains(addr, len) {
        return Err(FaultReason::Unmapped);
    }
    if !cfg.enabled {
        return Ok(());
    }
    let ps = cfg.page_size;
    let mut page = addr & !(ps - 1);
    let end = addr + len;
    while page < end {
        if !cfg.page_allowed(device, page) && !peer_reachable(cfg, mem, device, page) {
            return Err(FaultReason::Unmapped);
        }
        page += ps;
    }
    Ok(())
}

fn peer_reachable(cfg: &IommuConfig, mem: &HostMemory, device: DeviceId, page: u64) -> bool {
    match mem.region_at(page) {
        Some(r) => match r.kind {
            RegionKind::PeerMmio(owner) => {
                owner != device
                    && cfg.same_group(device, owner)
                    && page + cfg.page_size <= r.range.end
            }
            _ => false,
        },
        None => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::host::memory::MIB;
    use proptest::prelude::*;

    const NVME: DeviceId = DeviceId(0);
    const NIC: DeviceId = DeviceId(1);

    fn mem() -> HostMemory {
        HostMemory::with_default_layout(16 * MIB, Some(NIC)).unwrap()
    }

    #[test]
    fn disabled_iommu_passes_everything_in_bounds() {
        let m = mem();
        let cfg = IommuConfig::disabled();
        let none = BTreeSet::new();
        assert!(check_access(&cfg, &m, &none, NVME, 0, 16 * MIB).is_ok());
        assert_eq!(
            check_access(&cfg, &m, &none, NVME, 16 * MIB - 4, 8),
            Err(FaultReason::Unmapped)
        );
    }

    #[test]
    fn allow_list_membership() {
        let m = mem();
        let q = m.region(&RegionKind::QueueArea).unwrap().range.clone();
        let k = m.region(&RegionKind::Kernel).unwrap().range.clone();
        let cfg = IommuConfig::enabled().allow(NVME, q.clone());
        let none = BTreeSet::new();
        assert!(check_access(&cfg, &m, &none, NVME, q.start + 100, 64).is_ok());
        assert_eq!(
            check_access(&cfg, &m, &none, NVME, k.start, 64),
            Err(FaultReason::Unmapped)
        );
        // Straddling the end of the allowed range faults as a whole.
        assert!(check_access(&cfg, &m, &none, NVME, q.end - 8, 16).is_err());
    }

    #[test]
    fn group_peers_reach_each_other_mmio() {
        let m = mem();
        let peer = m.region(&RegionKind::PeerMmio(NIC)).unwrap().range.clone();
        let none = BTreeSet::new();
        let isolated = IommuConfig::enabled();
        assert!(check_access(&isolated, &m, &none, NVME, peer.start, 4).is_err());
        let grouped = IommuConfig::enabled().group(vec![NVME, NIC]);
        assert!(check_access(&grouped, &m, &none, NVME, peer.start, 4).is_ok());
    }

    #[test]
    fn disabled_device_faults() {
        let m = mem();
        let mut dis = BTreeSet::new();
        dis.insert(NVME);
        assert_eq!(
            check_access(&IommuConfig::disabled(), &m, &dis, NVME, 0, 4),
            Err(FaultReason::DisabledDevice)
        );
    }

    #[test]
    fn validation() {
        assert!(matches!(
            IommuConfig::enabled().allow(NVME, 100..4096).validate(),
            Err(ConfigError::Unaligned { .. })
        ));
        assert!(matches!(
            IommuConfig::enabled()
                .group(vec![NVME, NIC])
                .group(vec![NIC])
                .validate(),
            Err(ConfigError::DuplicateGroupMember(NIC))
        ));
        assert!(IommuConfig::enabled().allow(NVME, 0..8192).validate().is_ok());
    }

    proptest! {
        /// Enlarging the allow set never turns a successful access into a fault.
        #[test]
        fn allow_list_monotone(
            base in proptest::collection::vec((0u64..4096, 1u64..8), 0..6),
            extra in proptest::collection::vec((0u64..4096, 1u64..8), 1..4),
            addr in 0u64..16 * MIB, len in 1u64..20_000,
        ) {
            let m = mem();
            let none = BTreeSet::new();
            let mut small = IommuConfig::enabled();
            for (p, n) in &base {
                small = small.allow(NVME, p * 4096..(p + n) * 4096);
            }
            let mut big = small.clone();
            for (p, n) in &extra {
                big = big.allow(NVME, p * 4096..(p + n) * 4096);
            }
            if check_access(&small, &m, &none, NVME, addr, len).is_ok() {
                prop_assert!(check_access(&big, &m, &none, NVME, addr, len).is_ok());
            }
        }
    }
}
