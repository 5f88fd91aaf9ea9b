//! Desk-scale simulator of a malicious NVMe SSD.
//!
//! The pieces: an NVMe controller model ([`nvme`]) over a block store
//! ([`backend`]), a simulated host with physical memory, an IOMMU and a
//! minimal NVMe driver ([`host`]), read-only partition and ext2 parsers
//! ([`diskfs`]), a disk image builder ([`image`]), the adversarial firmware
//! layer ([`malice`]) and a scenario runner tying them together
//! ([`scenario`]). [`sweep`] batches independent runs.

pub mod backend;
pub mod diskfs;
pub mod event;
pub mod host;
pub mod image;
pub mod malice;
pub mod nvme;
pub mod platform;
pub mod scenario;
pub mod sweep;
