use std::fmt;
use std::ops::Range;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DeviceId;

pub const PAGE_SIZE: u64 = 4096;
pub const MIB: u64 = 1024 * 1024;

/// Leading bytes of the planted kernel block. Scans look for this.
pub const KERNEL_SIGNATURE: &[u8] = b"\x7fLNXKRN\0Linux version 6.4.0-envme (builder@sim) #1 SMP";

/// Modules injected into the kernel region must start with this magic for the
/// host actor to "execute" them.
pub const MODULE_MAGIC: &[u8; 8] = b"\x7fKMOD\x01\x00\x00";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "owner")]
pub enum RegionKind {
    Kernel,
    QueueArea,
    DataBuffers,
    /// MMIO window of a peer device (modelled as plain memory).
    PeerMmio(DeviceId),
    Other,
}

impl fmt::Display for RegionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RegionKind::Kernel => f.write_str("kernel"),
            RegionKind::QueueArea => f.write_str("queue-area"),
            RegionKind::DataBuffers => f.write_str("data-buffers"),
            RegionKind::PeerMmio(d) => write!(f, "peer-mmio:{d}"),
            RegionKind::Other => f.write_str("other"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Region {
    pub kind: RegionKind,
    pub range: Range<u64>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum LayoutError {
    #[error("region {0} overlaps another region")]
    Overlap(String),
    #[error("region {0} lies outside memory")]
    OutOfBounds(String),
    #[error("memory size {0} is too small for the default layout")]
    TooSmall(u64),
}

/// Flat simulated physical memory with labelled, disjoint regions.
#[derive(Clone)]
pub struct HostMemory {
    content: Vec<u8>,
    regions: Vec<Region>,
}

impl fmt::Debug for HostMemory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HostMemory")
            .field("size", &self.content.len())
            .field("regions", &self.regions)
            .finish()
    }
}

impl HostMemory {
    pub fn new(size: u64) -> Self {
        Self {
            content: vec![0; size as usize],
            regions: Vec::new(),
        }
    }

    /// Default layout, scaled to `size` (>= 8 MiB):
    /// kernel at 1 MiB spanning a quarter of memory, then the queue area
    /// (1 MiB), then data buffers, then a 1 MiB peer-MMIO window at the top.
    pub fn with_default_layout(size: u64, peer: Option<DeviceId>) -> Result<Self, LayoutError> {
        if size < 8 * MIB || size % PAGE_SIZE != 0 {
            return Err(LayoutError::TooSmall(size));
        }
        let mut m = Self::new(size);
        let kernel_len = (size / 4) & !(PAGE_SIZE - 1);
        let kernel = MIB..MIB + kernel_len;
        let queue = kernel.end..kernel.end + MIB;
        let peer_win = size - MIB..size;
        let data = queue.end..(queue.end + size / 4).min(peer_win.start);
        m.add_region(RegionKind::Kernel, kernel)?;
        m.add_region(RegionKind::QueueArea, queue)?;
        m.add_region(RegionKind::DataBuffers, data)?;
        if let Some(p) = peer {
            m.add_region(RegionKind::PeerMmio(p), peer_win)?;
        }
        Ok(m)
    }

    pub fn add_region(&mut self, kind: RegionKind, range: Range<u64>) -> Result<(), LayoutError> {
        if range.end > self.size() || range.start >= range.end {
            return Err(LayoutError::OutOfBounds(kind.to_string()));
        }
        if self
            .regions
            .iter()
            .any(|r| r.range.start < range.end && range.start < r.range.end)
        {
            return Err(LayoutError::Overlap(kind.to_string()));
        }
        self.regions.push(Region { kind, range });
        self.regions.sort_by_key(|r| r.range.start);
        Ok(())
    }

    pub fn size(&self) -> u64 {
        self.content.len() as u64
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn region(&self, kind: &RegionKind) -> Option<&Region> {
        self.regions.iter().find(|r| &r.kind == kind)
    }

    pub fn region_at(&self, addr: u64) -> Option<&Region> {
        self.regions.iter().find(|r| r.range.contains(&addr))
    }

    pub fn contains(&self, addr: u64, len: u64) -> bool {
        addr.checked_add(len).is_some_and(|end| end <= self.size())
    }

    pub fn read(&self, addr: u64, len: usize) -> &[u8] {
        &self.content[addr as usize..addr as usize + len]
    }

    pub fn write(&mut self, addr: u64, data: &[u8]) {
        self.content[addr as usize..addr as usize + data.len()].copy_from_slice(data);
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.content
    }

    pub fn read_u64(&self, addr: u64) -> u64 {
        u64::from_le_bytes(self.read(addr, 8).try_into().unwrap())
    }

    pub fn write_u64(&mut self, addr: u64, v: u64) {
        self.write(addr, &v.to_le_bytes());
    }

    pub fn fill(&mut self, range: Range<u64>, byte: u8) {
        self.content[range.start as usize..range.end as usize].fill(byte);
    }

    /// Plants a 4 KiB kernel block at a seed-chosen page of the kernel region
    /// and returns its address. The block starts with [`KERNEL_SIGNATURE`].
    pub fn plant_kernel(&mut self, seed: u64) -> Option<u64> {
        let kernel = self.region(&RegionKind::Kernel)?.range.clone();
        let pages = (kernel.end - kernel.start) / PAGE_SIZE;
        // First page holds the module-executed flag.
        if pages < 2 {
            return None;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let page = rng.random_range(1..pages);
        let addr = kernel.start + page * PAGE_SIZE;
        let mut block = vec![0u8; PAGE_SIZE as usize];
        rng.fill_bytes(&mut block);
        block[..KERNEL_SIGNATURE.len()].copy_from_slice(KERNEL_SIGNATURE);
        self.write(addr, &block);
        Some(addr)
    }

    pub fn clear_region(&mut self, kind: &RegionKind) {
        if let Some(r) = self.region(kind).map(|r| r.range.clone()) {
            self.fill(r, 0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_layout_is_disjoint_and_inside() {
        let m = HostMemory::with_default_layout(64 * MIB, Some(DeviceId(1))).unwrap();
        let r = m.regions();
        assert_eq!(r.len(), 4);
        for w in r.windows(2) {
            assert!(w[0].range.end <= w[1].range.start);
        }
        assert!(r.iter().all(|x| x.range.end <= m.size()));
    }

    #[test]
    fn overlap_rejected() {
        let mut m = HostMemory::new(MIB);
        m.add_region(RegionKind::Kernel, 0..PAGE_SIZE * 2).unwrap();
        assert!(matches!(
            m.add_region(RegionKind::Other, PAGE_SIZE..PAGE_SIZE * 3),
            Err(LayoutError::Overlap(_))
        ));
        assert!(matches!(
            m.add_region(RegionKind::Other, 0..2 * MIB),
            Err(LayoutError::OutOfBounds(_))
        ));
    }

    #[test]
    fn kernel_plant_is_seeded() {
        let mut a = HostMemory::with_default_layout(16 * MIB, None).unwrap();
        let mut b = HostMemory::with_default_layout(16 * MIB, None).unwrap();
        let pa = a.plant_kernel(3).unwrap();
        assert_eq!(pa, b.plant_kernel(3).unwrap());
        assert_eq!(a.read(pa, KERNEL_SIGNATURE.len()), KERNEL_SIGNATURE);
        assert_eq!(pa % PAGE_SIZE, 0);
        assert_eq!(a.region_at(pa).unwrap().kind, RegionKind::Kernel);
    }
}
