//! Partition table writers.

use crate::diskfs::partition::guid_from_string;
use crate::diskfs::LINUX_FS_GUID;

const GPT_ENTRIES: u64 = 128;
const GPT_ENTRY_SIZE: u64 = 128;

/// Blocks taken by the GPT entry array.
pub fn gpt_entry_blocks(block_size: u32) -> u64 {
    (GPT_ENTRIES * GPT_ENTRY_SIZE).div_ceil(block_size as u64)
}

pub fn gpt_first_usable(block_size: u32) -> u64 {
    2 + gpt_entry_blocks(block_size)
}

pub fn gpt_last_usable(block_size: u32, total_blocks: u64) -> u64 {
    total_blocks - 2 - gpt_entry_blocks(block_size)
}

fn put32(b: &mut [u8], o: usize, v: u32) {
    b[o..o + 4].copy_from_slice(&v.to_le_bytes());
}

fn put64(b: &mut [u8], o: usize, v: u64) {
    b[o..o + 8].copy_from_slice(&v.to_le_bytes());
}

fn mbr_entry(img: &mut [u8], slot: usize, ty: u8, start: u64, len: u64) {
    let o = 446 + 16 * slot;
    img[o] = 0;
    // CHS fields set to the "beyond 8 GiB" marker.
    img[o + 1..o + 4].copy_from_slice(&[0xFE, 0xFF, 0xFF]);
    img[o + 4] = ty;
    img[o + 5..o + 8].copy_from_slice(&[0xFE, 0xFF, 0xFF]);
    put32(img, o + 8, start.min(u32::MAX as u64) as u32);
    put32(img, o + 12, len.min(u32::MAX as u64) as u32);
}

pub fn write_mbr(img: &mut [u8], disk_sig: u32, start: u64, len: u64) {
    put32(img, 440, disk_sig);
    mbr_entry(img, 0, 0x83, start, len);
    img[510] = 0x55;
    img[511] = 0xAA;
}

/// GPT header bytes (92 significant) for the copy at `my_lba`.
#[allow(clippy::too_many_arguments)]
fn gpt_header(
    bs: usize,
    my_lba: u64,
    alt_lba: u64,
    first_usable: u64,
    last_usable: u64,
    disk_guid: &[u8; 16],
    entries_lba: u64,
    entries_crc: u32,
) -> Vec<u8> {
    let mut h = vec![0u8; bs];
    h[0..8].copy_from_slice(b"EFI PART");
    put32(&mut h, 8, 0x0001_0000);
    put32(&mut h, 12, 92);
    put64(&mut h, 24, my_lba);
    put64(&mut h, 32, alt_lba);
    put64(&mut h, 40, first_usable);
    put64(&mut h, 48, last_usable);
    h[56..72].copy_from_slice(disk_guid);
    put64(&mut h, 72, entries_lba);
    put32(&mut h, 80, GPT_ENTRIES as u32);
    put32(&mut h, 84, GPT_ENTRY_SIZE as u32);
    put32(&mut h, 88, entries_crc);
    let crc = crc32fast::hash(&h[..92]);
    put32(&mut h, 16, crc);
    h
}

/// Writes protective MBR, primary and backup GPT with one Linux partition
/// covering `[start, start + len)`.
pub fn write_gpt(
    img: &mut [u8],
    bs: u32,
    disk_guid: [u8; 16],
    part_guid: [u8; 16],
    name: &str,
    start: u64,
    len: u64,
) {
    let b = bs as usize;
    let total = img.len() as u64 / bs as u64;
    mbr_entry(img, 0, 0xEE, 1, total - 1);
    img[510] = 0x55;
    img[511] = 0xAA;

    let mut entries = vec![0u8; (GPT_ENTRIES * GPT_ENTRY_SIZE) as usize];
    entries[0..16].copy_from_slice(&guid_from_string(LINUX_FS_GUID).unwrap());
    entries[16..32].copy_from_slice(&part_guid);
    put64(&mut entries, 32, start);
    put64(&mut entries, 40, start + len - 1);
    for (i, u) in name.encode_utf16().take(36).enumerate() {
        entries[56 + 2 * i..58 + 2 * i].copy_from_slice(&u.to_le_bytes());
    }
    let ecrc = crc32fast::hash(&entries);
    let first = gpt_first_usable(bs);
    let last = gpt_last_usable(bs, total);
    let eblocks = gpt_entry_blocks(bs);

    let primary = gpt_header(b, 1, total - 1, first, last, &disk_guid, 2, ecrc);
    img[b..2 * b].copy_from_slice(&primary);
    img[2 * b..2 * b + entries.len()].copy_from_slice(&entries);

    let backup_entries = total - 1 - eblocks;
    let backup = gpt_header(b, total - 1, 1, first, last, &disk_guid, backup_entries, ecrc);
    let eo = backup_entries as usize * b;
    img[eo..eo + entries.len()].copy_from_slice(&entries);
    let ho = (total - 1) as usize * b;
    img[ho..ho + b].copy_from_slice(&backup);
}
