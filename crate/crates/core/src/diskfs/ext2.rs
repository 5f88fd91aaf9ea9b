//! ext2 (revision 0 and 1) read-only resolver.
//!
//! Supports the classic block map: 12 direct pointers plus single, double and
//! triple indirect blocks. The only incompatible feature understood is
//! FILETYPE (directory entries carry a type byte).

use std::collections::BTreeSet;
use std::ops::Range;

use serde::Serialize;
use thiserror::Error;

use super::{BlockDevice, DevError, PartitionEntry};

pub const EXT2_MAGIC: u16 = 0xEF53;
pub const ROOT_INO: u32 = 2;
pub const INCOMPAT_FILETYPE: u32 = 0x0002;
pub const RO_COMPAT_SPARSE_SUPER: u32 = 0x0001;
pub const RO_COMPAT_LARGE_FILE: u32 = 0x0002;
const SUPPORTED_INCOMPAT: u32 = INCOMPAT_FILETYPE;
const MAX_WALK_DEPTH: usize = 64;

pub const S_IFMT: u16 = 0xF000;
pub const S_IFREG: u16 = 0x8000;
pub const S_IFDIR: u16 = 0x4000;
pub const S_IFLNK: u16 = 0xA000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum Ext2Error {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("unsupported filesystem: {0}")]
    UnsupportedFilesystem(String),
    #[error("symbolic link in path: {0}")]
    UnsupportedLink(String),
    #[error("corrupt filesystem: {0}")]
    Corrupt(String),
    #[error("filesystem block size {fs} is not a multiple of device block size {dev}")]
    AlignmentError { fs: u32, dev: u32 },
    #[error(transparent)]
    Device(#[from] DevError),
}

type Result<T> = std::result::Result<T, Ext2Error>;

fn corrupt(msg: impl Into<String>) -> Ext2Error {
    Ext2Error::Corrupt(msg.into())
}

fn le16(b: &[u8], o: usize) -> u16 {
    u16::from_le_bytes([b[o], b[o + 1]])
}

fn le32(b: &[u8], o: usize) -> u32 {
    u32::from_le_bytes(b[o..o + 4].try_into().unwrap())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Superblock {
    pub inodes_count: u32,
    pub blocks_count: u32,
    pub first_data_block: u32,
    pub block_size: u32,
    pub blocks_per_group: u32,
    pub inodes_per_group: u32,
    pub rev_level: u32,
    pub inode_size: u16,
    pub feature_incompat: u32,
    pub feature_ro_compat: u32,
    pub volume_name: String,
}

impl Superblock {
    fn parse(b: &[u8]) -> Result<Self> {
        if le16(b, 56) != EXT2_MAGIC {
            return Err(Ext2Error::UnsupportedFilesystem("bad superblock magic".into()));
        }
        let log = le32(b, 24);
        if log > 6 {
            return Err(Ext2Error::UnsupportedFilesystem(format!("block size log {log}")));
        }
        let rev = le32(b, 76);
        let (inode_size, incompat, ro) = if rev >= 1 {
            (le16(b, 88), le32(b, 96), le32(b, 100))
        } else {
            (128, 0, 0)
        };
        if incompat & !SUPPORTED_INCOMPAT != 0 {
            return Err(Ext2Error::UnsupportedFilesystem(format!(
                "incompatible features {:#x}",
                incompat & !SUPPORTED_INCOMPAT
            )));
        }
        let block_size = 1024u32 << log;
        let sb = Self {
            inodes_count: le32(b, 0),
            blocks_count: le32(b, 4),
            first_data_block: le32(b, 20),
            block_size,
            blocks_per_group: le32(b, 32),
            inodes_per_group: le32(b, 40),
            rev_level: rev,
            inode_size,
            feature_incompat: incompat,
            feature_ro_compat: ro,
            volume_name: String::from_utf8_lossy(&b[120..136])
                .trim_end_matches('\0')
                .to_string(),
        };
        if sb.blocks_per_group == 0
            || sb.inodes_per_group == 0
            || sb.inode_size < 128
            || sb.inode_size as u32 > block_size
            || !sb.inode_size.is_power_of_two()
            || sb.blocks_count <= sb.first_data_block
        {
            return Err(corrupt("superblock geometry"));
        }
        Ok(sb)
    }

    pub fn group_count(&self) -> u32 {
        (self.blocks_count - self.first_data_block).div_ceil(self.blocks_per_group)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupDesc {
    pub block_bitmap: u32,
    pub inode_bitmap: u32,
    pub inode_table: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FileKind {
    Regular,
    Directory,
    Symlink,
    Other,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Inode {
    pub ino: u32,
    pub mode: u16,
    pub size: u64,
    pub links: u16,
    pub block: [u32; 15],
    /// Partition-relative byte offset of the on-disk inode.
    pub offset: u64,
}

impl Inode {
    pub fn kind(&self) -> FileKind {
        match self.mode & S_IFMT {
            S_IFREG => FileKind::Regular,
            S_IFDIR => FileKind::Directory,
            S_IFLNK => FileKind::Symlink,
            _ => FileKind::Other,
        }
    }
}

/// Contiguous run: `len` blocks of the file starting at file block
/// `file_block` live at partition-relative fs block `start`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct Extent {
    pub file_block: u64,
    pub start: u64,
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExtentMap {
    pub file_size: u64,
    pub extents: Vec<Extent>,
    pub fs_block_size: u32,
    pub inode: u32,
    /// Partition-relative byte offset of the inode record.
    pub inode_offset: u64,
}

impl ExtentMap {
    pub fn allocated_bytes(&self) -> u64 {
        self.extents.iter().map(|e| e.len).sum::<u64>() * self.fs_block_size as u64
    }
}

/// Converts partition-relative fs-block extents into absolute device LBA
/// ranges, in file order.
pub fn to_absolute_lbas(
    map: &ExtentMap,
    part: &PartitionEntry,
    device_block_size: u32,
) -> Result<Vec<Range<u64>>> {
    let fs = map.fs_block_size;
    if fs < device_block_size || fs % device_block_size != 0 {
        return Err(Ext2Error::AlignmentError {
            fs,
            dev: device_block_size,
        });
    }
    let ratio = (fs / device_block_size) as u64;
    Ok(map
        .extents
        .iter()
        .map(|e| {
            let s = part.start_lba + e.start * ratio;
            s..s + e.len * ratio
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct Ext2Fs {
    pub part: PartitionEntry,
    pub sb: Superblock,
    pub groups: Vec<GroupDesc>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DirEntry {
    pub ino: u32,
    pub name: String,
    pub file_type: u8,
}

impl Ext2Fs {
    /// Reads the superblock and group descriptors of the filesystem in `part`.
    pub fn open(dev: &mut dyn BlockDevice, part: &PartitionEntry) -> Result<Self> {
        let base = part.start_lba * dev.block_size() as u64;
        let part_bytes = part.length_lbas * dev.block_size() as u64;
        if part_bytes < 2048 {
            return Err(Ext2Error::UnsupportedFilesystem("partition too small".into()));
        }
        let sbb = dev.read_bytes(base + 1024, 1024)?;
        let sb = Superblock::parse(&sbb)?;
        if sb.blocks_count as u64 * sb.block_size as u64 > part_bytes {
            return Err(corrupt("filesystem larger than partition"));
        }
        let groups = sb.group_count();
        let gdt_block = sb.first_data_block as u64 + 1;
        let gdt = dev.read_bytes(base + gdt_block * sb.block_size as u64, groups as usize * 32)?;
        let mut gds = Vec::with_capacity(groups as usize);
        let itable_blocks =
            (sb.inodes_per_group as u64 * sb.inode_size as u64).div_ceil(sb.block_size as u64);
        for g in 0..groups as usize {
            let d = &gdt[g * 32..g * 32 + 32];
            let gd = GroupDesc {
                block_bitmap: le32(d, 0),
                inode_bitmap: le32(d, 4),
                inode_table: le32(d, 8),
            };
            if gd.inode_table as u64 + itable_blocks > sb.blocks_count as u64 {
                return Err(corrupt(format!("group {g} inode table out of bounds")));
            }
            gds.push(gd);
        }
        Ok(Self {
            part: part.clone(),
            sb,
            groups: gds,
        })
    }

    pub fn block_size(&self) -> u32 {
        self.sb.block_size
    }

    fn base(&self, dev: &dyn BlockDevice) -> u64 {
        self.part.start_lba * dev.block_size() as u64
    }

    fn read_block(&self, dev: &mut dyn BlockDevice, block: u64) -> Result<Vec<u8>> {
        if block >= self.sb.blocks_count as u64 {
            return Err(corrupt(format!("block {block} out of bounds")));
        }
        let bs = self.sb.block_size as u64;
        let off = self.base(dev) + block * bs;
        Ok(dev.read_bytes(off, bs as usize)?)
    }

    /// Partition-relative byte offset of inode `ino`.
    pub fn inode_offset(&self, ino: u32) -> Result<u64> {
        if ino == 0 || ino > self.sb.inodes_count {
            return Err(corrupt(format!("inode {ino} out of range")));
        }
        let g = ((ino - 1) / self.sb.inodes_per_group) as usize;
        let idx = (ino - 1) % self.sb.inodes_per_group;
        let gd = self
            .groups
            .get(g)
            .ok_or_else(|| corrupt(format!("inode {ino} in missing group {g}")))?;
        Ok(gd.inode_table as u64 * self.sb.block_size as u64 + idx as u64 * self.sb.inode_size as u64)
    }

    pub fn read_inode(&self, dev: &mut dyn BlockDevice, ino: u32) -> Result<Inode> {
        let offset = self.inode_offset(ino)?;
        let b = dev.read_bytes(self.base(dev) + offset, 128)?;
        let mode = le16(&b, 0);
        let mut size = le32(&b, 4) as u64;
        if mode & S_IFMT == S_IFREG {
            size |= (le32(&b, 108) as u64) << 32;
        }
        let mut block = [0u32; 15];
        for (i, p) in block.iter_mut().enumerate() {
            *p = le32(&b, 40 + 4 * i);
        }
        Ok(Inode {
            ino,
            mode,
            size,
            links: le16(&b, 26),
            block,
            offset,
        })
    }

    fn check_ptr(&self, p: u32) -> Result<u64> {
        if p as u64 >= self.sb.blocks_count as u64 || p < self.sb.first_data_block {
            return Err(corrupt(format!("block pointer {p} out of bounds")));
        }
        Ok(p as u64)
    }

    fn read_ptrs(&self, dev: &mut dyn BlockDevice, block: u32) -> Result<Vec<u32>> {
        let b = self.check_ptr(block)?;
        let data = self.read_block(dev, b)?;
        Ok(data.chunks_exact(4).map(|c| le32(c, 0)).collect())
    }

    /// Physical block of every file block (0 for a hole), in file order.
    fn block_list(&self, dev: &mut dyn BlockDevice, ino: &Inode) -> Result<Vec<u32>> {
        let bs = self.sb.block_size as u64;
        let n = ino.size.div_ceil(bs);
        let per = bs / 4;
        let max = 12 + per + per * per + per * per * per;
        if n > max {
            return Err(corrupt(format!("inode {} size exceeds block map", ino.ino)));
        }
        let mut out = Vec::with_capacity(n as usize);
        for &p in ino.block.iter().take(12) {
            if out.len() as u64 == n {
                return Ok(out);
            }
            out.push(p);
        }
        for (level, &root) in ino.block[12..15].iter().enumerate() {
            if out.len() as u64 == n {
                break;
            }
            self.walk_indirect(dev, root, level as u32 + 1, n, &mut out)?;
        }
        Ok(out)
    }

    fn walk_indirect(
        &self,
        dev: &mut dyn BlockDevice,
        block: u32,
        depth: u32,
        n: u64,
        out: &mut Vec<u32>,
    ) -> Result<()> {
        let per = self.sb.block_size as u64 / 4;
        let span = per.pow(depth);
        if block == 0 {
            let take = span.min(n - out.len() as u64);
            out.extend(std::iter::repeat_n(0, take as usize));
            return Ok(());
        }
        let ptrs = self.read_ptrs(dev, block)?;
        for p in ptrs {
            if out.len() as u64 == n {
                break;
            }
            if depth == 1 {
                out.push(p);
            } else {
                self.walk_indirect(dev, p, depth - 1, n, out)?;
            }
        }
        Ok(())
    }

    /// Extent map of an inode, with physically contiguous runs merged.
    pub fn extents_of(&self, dev: &mut dyn BlockDevice, ino: &Inode) -> Result<ExtentMap> {
        let list = self.block_list(dev, ino)?;
        let mut extents: Vec<Extent> = Vec::new();
        for (i, &p) in list.iter().enumerate() {
            if p == 0 {
                continue;
            }
            let phys = self.check_ptr(p)?;
            match extents.last_mut() {
                Some(e) if e.file_block + e.len == i as u64 && e.start + e.len == phys => e.len += 1,
                _ => extents.push(Extent {
                    file_block: i as u64,
                    start: phys,
                    len: 1,
                }),
            }
        }
        Ok(ExtentMap {
            file_size: ino.size,
            extents,
            fs_block_size: self.sb.block_size,
            inode: ino.ino,
            inode_offset: ino.offset,
        })
    }

    /// Reads an inode's data, zero-filling holes, truncated to its size.
    pub fn read_inode_data(&self, dev: &mut dyn BlockDevice, ino: &Inode) -> Result<Vec<u8>> {
        let map = self.extents_of(dev, ino)?;
        self.read_extents(dev, &map)
    }

    pub fn read_extents(&self, dev: &mut dyn BlockDevice, map: &ExtentMap) -> Result<Vec<u8>> {
        let bs = self.sb.block_size as u64;
        let mut out = vec![0u8; (map.file_size.div_ceil(bs) * bs) as usize];
        let base = self.base(dev);
        for e in &map.extents {
            // One device read per extent, as a readahead would issue.
            let data = dev.read_bytes(base + e.start * bs, (e.len * bs) as usize)?;
            let off = (e.file_block * bs) as usize;
            out[off..off + data.len()].copy_from_slice(&data);
        }
        out.truncate(map.file_size as usize);
        Ok(out)
    }

    pub fn read_dir(&self, dev: &mut dyn BlockDevice, dir: &Inode) -> Result<Vec<DirEntry>> {
        if dir.kind() != FileKind::Directory {
            return Err(Ext2Error::NotFound(format!("inode {} is not a directory", dir.ino)));
        }
        let data = self.read_inode_data(dev, dir)?;
        let filetype = self.sb.feature_incompat & INCOMPAT_FILETYPE != 0;
        let bs = self.sb.block_size as usize;
        let mut out = Vec::new();
        for block in data.chunks(bs) {
            let mut off = 0;
            while off + 8 <= block.len() {
                let ino = le32(block, off);
                let rec_len = le16(block, off + 4) as usize;
                let (name_len, ft) = if filetype {
                    (block[off + 6] as usize, block[off + 7])
                } else {
                    (le16(block, off + 6) as usize, 0)
                };
                if rec_len < 8 || off + rec_len > block.len() || 8 + name_len > rec_len {
                    return Err(corrupt(format!("directory {} entry at {off}", dir.ino)));
                }
                if ino != 0 {
                    out.push(DirEntry {
                        ino,
                        name: String::from_utf8_lossy(&block[off + 8..off + 8 + name_len]).into_owned(),
                        file_type: ft,
                    });
                }
                off += rec_len;
            }
        }
        Ok(out)
    }

    /// Resolves an absolute path to a regular file's inode.
    pub fn lookup(&self, dev: &mut dyn BlockDevice, path: &str) -> Result<Inode> {
        let comps: Vec<&str> = path.split('/').filter(|c| !c.is_empty() && *c != ".").collect();
        if comps.is_empty() {
            return Err(Ext2Error::NotFound(format!("{path}: not a regular file")));
        }
        let mut cur = self.read_inode(dev, ROOT_INO)?;
        let mut walked = String::new();
        for c in comps {
            walked.push('/');
            walked.push_str(c);
            if cur.kind() != FileKind::Directory {
                return Err(Ext2Error::NotFound(walked));
            }
            let ents = self.read_dir(dev, &cur)?;
            let e = ents
                .iter()
                .find(|e| e.name == c)
                .ok_or_else(|| Ext2Error::NotFound(walked.clone()))?;
            cur = self.read_inode(dev, e.ino)?;
            if cur.kind() == FileKind::Symlink {
                return Err(Ext2Error::UnsupportedLink(walked));
            }
        }
        if cur.kind() != FileKind::Regular {
            return Err(Ext2Error::NotFound(format!("{path}: not a regular file")));
        }
        Ok(cur)
    }

    pub fn resolve_path(&self, dev: &mut dyn BlockDevice, path: &str) -> Result<ExtentMap> {
        let ino = self.lookup(dev, path)?;
        self.extents_of(dev, &ino)
    }

    pub fn read_file(&self, dev: &mut dyn BlockDevice, path: &str) -> Result<Vec<u8>> {
        let ino = self.lookup(dev, path)?;
        self.read_inode_data(dev, &ino)
    }

    /// Every regular file reachable from the root, depth first, sorted by
    /// name within a directory. Symlinks are not followed.
    pub fn walk(&self, dev: &mut dyn BlockDevice) -> Result<Vec<(String, Inode)>> {
        let mut out = Vec::new();
        let mut seen = BTreeSet::new();
        let root = self.read_inode(dev, ROOT_INO)?;
        self.walk_dir(dev, &root, "", &mut seen, &mut out, 0)?;
        Ok(out)
    }

    fn walk_dir(
        &self,
        dev: &mut dyn BlockDevice,
        dir: &Inode,
        prefix: &str,
        seen: &mut BTreeSet<u32>,
        out: &mut Vec<(String, Inode)>,
        depth: usize,
    ) -> Result<()> {
        if !seen.insert(dir.ino) || depth > MAX_WALK_DEPTH {
            return Ok(());
        }
        let mut ents = self.read_dir(dev, dir)?;
        ents.sort_by(|a, b| a.name.cmp(&b.name));
        for e in ents {
            if e.name == "." || e.name == ".." {
                continue;
            }
            let ino = self.read_inode(dev, e.ino)?;
            let path = format!("{prefix}/{}", e.name);
            match ino.kind() {
                FileKind::Regular => out.push((path, ino)),
                FileKind::Directory => self.walk_dir(dev, &ino, &path, seen, out, depth + 1)?,
                _ => {}
            }
        }
        Ok(())
    }
}
