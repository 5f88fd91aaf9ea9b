//! GPT (primary header only) and MBR partition tables.

use serde::Serialize;
use thiserror::Error;

use super::{BlockDevice, DevError};

/// Linux filesystem data partition type.
pub const LINUX_FS_GUID: &str = "0FC63DAF-8483-4772-8E79-3D69D8477DE4";
const GPT_SIGNATURE: &[u8; 8] = b"EFI PART";
const MBR_PROTECTIVE: u8 = 0xEE;
/// Upper bound on the partition entry array we are willing to read.
const MAX_ENTRY_BYTES: u64 = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Mbr,
    Gpt,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PartitionEntry {
    pub index: u32,
    pub start_lba: u64,
    pub length_lbas: u64,
    pub type_tag: String,
    pub scheme: Scheme,
    pub name: String,
}

impl PartitionEntry {
    pub fn end_lba(&self) -> u64 {
        self.start_lba + self.length_lbas
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PartError {
    #[error("no partition table")]
    NoPartitionTable,
    #[error("corrupt partition table: {0}")]
    CorruptTable(String),
    #[error(transparent)]
    Device(#[from] DevError),
}

fn corrupt(msg: impl Into<String>) -> PartError {
    PartError::CorruptTable(msg.into())
}

fn le32(b: &[u8], o: usize) -> u32 {
    u32::from_le_bytes(b[o..o + 4].try_into().unwrap())
}

fn le64(b: &[u8], o: usize) -> u64 {
    u64::from_le_bytes(b[o..o + 8].try_into().unwrap())
}

/// Formats a GPT GUID (first three fields little-endian) as text.
pub fn guid_to_string(g: &[u8]) -> String {
    format!(
        "{:08X}-{:04X}-{:04X}-{:02X}{:02X}-{}",
        le32(g, 0),
        u16::from_le_bytes([g[4], g[5]]),
        u16::from_le_bytes([g[6], g[7]]),
        g[8],
        g[9],
        g[10..16].iter().map(|b| format!("{b:02X}")).collect::<String>()
    )
}

/// Parses the textual form back into on-disk byte order.
pub fn guid_from_string(s: &str) -> Option<[u8; 16]> {
    let hex: String = s.chars().filter(|c| *c != '-').collect();
    if hex.len() != 32 {
        return None;
    }
    let raw = hex::decode(hex).ok()?;
    let mut g = [0u8; 16];
    g[0..4].copy_from_slice(&[raw[3], raw[2], raw[1], raw[0]]);
    g[4..6].copy_from_slice(&[raw[5], raw[4]]);
    g[6..8].copy_from_slice(&[raw[7], raw[6]]);
    g[8..16].copy_from_slice(&raw[8..16]);
    Some(g)
}

/// Detects GPT first, then falls back to MBR. Entries come back sorted by
/// start LBA and are checked for overlap and device bounds.
pub fn parse_partitions(dev: &mut dyn BlockDevice) -> Result<Vec<PartitionEntry>, PartError> {
    if dev.block_count() < 2 {
        return Err(PartError::NoPartitionTable);
    }
    let lba0 = dev.read_blocks(0, 1)?;
    let lba1 = dev.read_blocks(1, 1)?;
    let mut parts = if &lba1[0..8] == GPT_SIGNATURE {
        parse_gpt(dev, &lba1)?
    } else if lba0.len() >= 512 && lba0[510] == 0x55 && lba0[511] == 0xAA {
        parse_mbr(dev, &lba0)?
    } else {
        return Err(PartError::NoPartitionTable);
    };
    parts.sort_by_key(|p| p.start_lba);
    for w in parts.windows(2) {
        if w[0].end_lba() > w[1].start_lba {
            return Err(corrupt(format!(
                "partitions {} and {} overlap",
                w[0].index, w[1].index
            )));
        }
    }
    Ok(parts)
}

fn parse_gpt(dev: &mut dyn BlockDevice, hdr: &[u8]) -> Result<Vec<PartitionEntry>, PartError> {
    let bs = dev.block_size() as u64;
    let header_size = le32(hdr, 12) as usize;
    if header_size < 92 || header_size > hdr.len() {
        return Err(corrupt("header size"));
    }
    let stored = le32(hdr, 16);
    let mut copy = hdr[..header_size].to_vec();
    copy[16..20].fill(0);
    if crc32fast::hash(&copy) != stored {
        return Err(corrupt("header crc32 mismatch"));
    }
    if le64(hdr, 24) != 1 {
        return Err(corrupt("header does not describe lba 1"));
    }
    let first_usable = le64(hdr, 40);
    let last_usable = le64(hdr, 48);
    let entries_lba = le64(hdr, 72);
    let count = le32(hdr, 80) as u64;
    let entry_size = le32(hdr, 84) as u64;
    let entries_crc = le32(hdr, 88);
    if entry_size < 128 || !entry_size.is_power_of_two() {
        return Err(corrupt("entry size"));
    }
    if first_usable > last_usable || last_usable >= dev.block_count() {
        return Err(corrupt("usable range"));
    }
    let bytes = count * entry_size;
    if bytes > MAX_ENTRY_BYTES {
        return Err(corrupt("entry array too large"));
    }
    let blocks = bytes.div_ceil(bs);
    if entries_lba < 2 || entries_lba.saturating_add(blocks) > dev.block_count() {
        return Err(corrupt("entry array location"));
    }
    let raw = dev.read_blocks(entries_lba, blocks.max(1))?;
    let array = &raw[..bytes as usize];
    if crc32fast::hash(array) != entries_crc {
        return Err(corrupt("entry array crc32 mismatch"));
    }
    let mut out = Vec::new();
    for (i, e) in array.chunks_exact(entry_size as usize).enumerate() {
        let type_guid = &e[0..16];
        if type_guid.iter().all(|&b| b == 0) {
            continue;
        }
        let first = le64(e, 32);
        let last = le64(e, 40);
        if first > last || first < first_usable || last > last_usable {
            return Err(corrupt(format!("entry {} bounds", i + 1)));
        }
        let name: Vec<u16> = e[56..128]
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .take_while(|&c| c != 0)
            .collect();
        out.push(PartitionEntry {
            index: i as u32 + 1,
            start_lba: first,
            length_lbas: last - first + 1,
            type_tag: guid_to_string(type_guid),
            scheme: Scheme::Gpt,
            name: String::from_utf16_lossy(&name),
        });
    }
    Ok(out)
}

fn parse_mbr(dev: &mut dyn BlockDevice, mbr: &[u8]) -> Result<Vec<PartitionEntry>, PartError> {
    let mut out = Vec::new();
    for i in 0..4 {
        let e = &mbr[446 + 16 * i..446 + 16 * (i + 1)];
        let ty = e[4];
        let start = le32(e, 8) as u64;
        let len = le32(e, 12) as u64;
        if ty == 0 || ty == MBR_PROTECTIVE || len == 0 {
            continue;
        }
        if start == 0 || start + len > dev.block_count() {
            return Err(corrupt(format!("entry {} bounds", i + 1)));
        }
        out.push(PartitionEntry {
            index: i as u32 + 1,
            start_lba: start,
            length_lbas: len,
            type_tag: format!("0x{ty:02x}"),
            scheme: Scheme::Mbr,
            name: String::new(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::MemDevice;
    use super::*;

    #[test]
    fn guid_text_roundtrip() {
        let g = guid_from_string(LINUX_FS_GUID).unwrap();
        assert_eq!(&g[0..4], &[0xAF, 0x3D, 0xC6, 0x0F]);
        assert_eq!(guid_to_string(&g), LINUX_FS_GUID);
    }

    #[test]
    fn zeroed_device_has_no_table() {
        let z = vec![0u8; 1 << 20];
        assert_eq!(
            parse_partitions(&mut MemDevice::new(&z, 512)),
            Err(PartError::NoPartitionTable)
        );
    }

    #[test]
    fn mbr_entries_sorted_and_protective_skipped() {
        let mut img = vec![0u8; 512 * 4096];
        img[510] = 0x55;
        img[511] = 0xAA;
        let mut put = |slot: usize, ty: u8, start: u32, len: u32| {
            let o = 446 + 16 * slot;
            img[o + 4] = ty;
            img[o + 8..o + 12].copy_from_slice(&start.to_le_bytes());
            img[o + 12..o + 16].copy_from_slice(&len.to_le_bytes());
        };
        put(0, 0x83, 2048, 1000);
        put(1, 0x83, 100, 50);
        put(2, MBR_PROTECTIVE, 1, 4000);
        let p = parse_partitions(&mut MemDevice::new(&img, 512)).unwrap();
        assert_eq!(p.iter().map(|e| e.start_lba).collect::<Vec<_>>(), vec![100, 2048]);
        assert_eq!(p[0].index, 2);
        assert_eq!(p[0].scheme, Scheme::Mbr);
    }

    #[test]
    fn mbr_overlap_is_corrupt() {
        let mut img = vec![0u8; 512 * 4096];
        img[510] = 0x55;
        img[511] = 0xAA;
        for (slot, start) in [(0usize, 100u32), (1, 120)] {
            let o = 446 + 16 * slot;
            img[o + 4] = 0x83;
            img[o + 8..o + 12].copy_from_slice(&start.to_le_bytes());
            img[o + 12..o + 16].copy_from_slice(&50u32.to_le_bytes());
        }
        assert!(matches!(
            parse_partitions(&mut MemDevice::new(&img, 512)),
            Err(PartError::CorruptTable(_))
        ));
    }
}
