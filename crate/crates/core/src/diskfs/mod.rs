//! Read-only on-disk format parsers: MBR/GPT partition tables and an ext2
//! path resolver producing file extents and absolute device LBAs.

pub mod ext2;
pub mod partition;

use thiserror::Error;

use crate::backend::BlockStore;

pub use ext2::{to_absolute_lbas, Ext2Error, Ext2Fs, Extent, ExtentMap, FileKind, Inode};
pub use partition::{parse_partitions, PartError, PartitionEntry, Scheme, LINUX_FS_GUID};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("device read failed at lba {lba} (+{count}): {msg}")]
pub struct DevError {
    pub lba: u64,
    pub count: u64,
    pub msg: String,
}

/// Anything that can serve whole logical blocks.
pub trait BlockDevice {
    fn block_size(&self) -> u32;
    fn block_count(&self) -> u64;
    fn read_blocks(&mut self, lba: u64, count: u64) -> Result<Vec<u8>, DevError>;

    /// Reads `len` bytes at byte offset `off`, rounding out to whole blocks.
    fn read_bytes(&mut self, off: u64, len: usize) -> Result<Vec<u8>, DevError> {
        if len == 0 {
            return Ok(Vec::new());
        }
        let bs = self.block_size() as u64;
        let first = off / bs;
        let last = (off + len as u64 - 1) / bs;
        let data = self.read_blocks(first, last - first + 1)?;
        let skip = (off - first * bs) as usize;
        Ok(data[skip..skip + len].to_vec())
    }
}

impl<D: BlockDevice + ?Sized> BlockDevice for &mut D {
    fn block_size(&self) -> u32 {
        (**self).block_size()
    }
    fn block_count(&self) -> u64 {
        (**self).block_count()
    }
    fn read_blocks(&mut self, lba: u64, count: u64) -> Result<Vec<u8>, DevError> {
        (**self).read_blocks(lba, count)
    }
}

fn range_err(lba: u64, count: u64) -> DevError {
    DevError {
        lba,
        count,
        msg: "beyond end of device".into(),
    }
}

/// A raw image held in memory.
#[derive(Debug, Clone)]
pub struct MemDevice<'a> {
    pub data: &'a [u8],
    pub block_size: u32,
}

impl<'a> MemDevice<'a> {
    pub fn new(data: &'a [u8], block_size: u32) -> Self {
        Self { data, block_size }
    }
}

impl BlockDevice for MemDevice<'_> {
    fn block_size(&self) -> u32 {
        self.block_size
    }
    fn block_count(&self) -> u64 {
        self.data.len() as u64 / self.block_size as u64
    }
    fn read_blocks(&mut self, lba: u64, count: u64) -> Result<Vec<u8>, DevError> {
        let bs = self.block_size as u64;
        match lba.checked_add(count) {
            Some(end) if end <= self.block_count() => {
                Ok(self.data[(lba * bs) as usize..(end * bs) as usize].to_vec())
            }
            _ => Err(range_err(lba, count)),
        }
    }
}

/// The device's own view of its flash: stored bytes, no failure-mode
/// transform and no host traffic.
#[derive(Debug)]
pub struct StoreView<'a>(pub &'a BlockStore);

impl BlockDevice for StoreView<'_> {
    fn block_size(&self) -> u32 {
        self.0.block_size()
    }
    fn block_count(&self) -> u64 {
        self.0.block_count()
    }
    fn read_blocks(&mut self, lba: u64, count: u64) -> Result<Vec<u8>, DevError> {
        self.0.read_raw(lba, count).map_err(|e| DevError {
            lba,
            count,
            msg: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn read_bytes_spans_blocks() {
        let data: Vec<u8> = (0..4096u32).map(|i| i as u8).collect();
        let mut d = MemDevice::new(&data, 512);
        assert_eq!(d.read_bytes(510, 4).unwrap(), vec![254, 255, 0, 1]);
        assert!(d.read_blocks(7, 2).is_err());
        assert!(d.read_blocks(u64::MAX, 2).is_err());
    }
}
