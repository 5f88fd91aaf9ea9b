//! Disk image builder: partition table, ext2 filesystem, planted files, and
//! a placement manifest recording where every file landed.

pub mod fs;
pub mod table;

use std::ops::Range;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diskfs::{Extent, LINUX_FS_GUID};
use crate::host::trace::{Dir, TraceOp};
pub use fs::{NodeContent, NodeSpec};

#[derive(Debug, Error)]
pub enum BuildError {
    #[error("invalid image spec: {0}")]
    Spec(String),
    #[error("image spec exceeds capacity: {0}")]
    NoSpace(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableKind {
    #[default]
    Gpt,
    Mbr,
}

fn default_block_size() -> u32 {
    512
}
fn default_size_mib() -> u64 {
    64
}
fn default_fs_block() -> u32 {
    1024
}
fn default_volume() -> String {
    "envme-root".into()
}
fn default_perm() -> u16 {
    0o644
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageSpec {
    #[serde(default = "default_block_size")]
    pub block_size: u32,
    #[serde(default = "default_size_mib")]
    pub size_mib: u64,
    #[serde(default)]
    pub table: TableKind,
    /// Partition start; defaults to the 1 MiB boundary.
    #[serde(default)]
    pub partition_start: Option<u64>,
    /// Partition length in LBAs; defaults to the rest of the disk.
    #[serde(default)]
    pub partition_blocks: Option<u64>,
    #[serde(default = "default_fs_block")]
    pub fs_block_size: u32,
    #[serde(default)]
    pub inodes: u32,
    #[serde(default = "default_volume")]
    pub volume_name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub files: Vec<FileSpec>,
}

impl Default for ImageSpec {
    fn default() -> Self {
        Self {
            block_size: default_block_size(),
            size_mib: default_size_mib(),
            table: TableKind::Gpt,
            partition_start: None,
            partition_blocks: None,
            fs_block_size: default_fs_block(),
            inodes: 0,
            volume_name: default_volume(),
            seed: 0,
            files: Vec::new(),
        }
    }
}

/// One planted node. Exactly one content source may be given; none means
/// an empty regular file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileSpec {
    pub path: String,
    #[serde(default)]
    pub text: Option<String>,
    #[serde(default)]
    pub hex: Option<String>,
    /// Host file, relative to the spec's directory.
    #[serde(default)]
    pub source: Option<String>,
    /// Random content of this many bytes (seeded).
    #[serde(default)]
    pub random: Option<u64>,
    #[serde(default)]
    pub symlink: Option<String>,
    #[serde(default)]
    pub dir: bool,
    #[serde(default)]
    pub gap_before: u64,
    #[serde(default)]
    pub fragment_every: Option<u64>,
    #[serde(default = "default_perm")]
    pub mode: u16,
}

impl FileSpec {
    pub fn text(path: &str, text: &str) -> Self {
        Self {
            path: path.into(),
            text: Some(text.into()),
            mode: default_perm(),
            ..Default::default()
        }
    }

    pub fn bytes(path: &str, data: &[u8]) -> Self {
        Self {
            path: path.into(),
            hex: Some(hex::encode(data)),
            mode: default_perm(),
            ..Default::default()
        }
    }

    pub fn random(path: &str, size: u64) -> Self {
        Self {
            path: path.into(),
            random: Some(size),
            mode: default_perm(),
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestPartition {
    pub index: u32,
    pub start_lba: u64,
    pub length_lbas: u64,
    pub type_tag: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestFs {
    pub block_size: u32,
    pub blocks_count: u32,
    pub inodes_count: u32,
    pub inodes_per_group: u32,
    pub inode_size: u32,
    pub groups: u32,
    pub first_data_block: u32,
    pub inode_tables: Vec<u32>,
    pub inode_table_blocks: u32,
    pub free_blocks: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub path: String,
    pub kind: String,
    pub inode: u32,
    pub size: u64,
    pub sha256: String,
    pub extents: Vec<Extent>,
    /// Absolute device LBA ranges of the data, in file order.
    pub lbas: Vec<[u64; 2]>,
    pub meta_blocks: Vec<u64>,
    /// Partition-relative byte offset of the inode record.
    pub inode_offset: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub device_block_size: u32,
    pub total_blocks: u64,
    pub table: TableKind,
    pub partition: ManifestPartition,
    pub fs: ManifestFs,
    pub files: Vec<ManifestFile>,
}

impl Manifest {
    pub fn file(&self, path: &str) -> Option<&ManifestFile> {
        self.files.iter().find(|f| f.path == path)
    }

    /// Device LBA range holding group 0's inode table.
    pub fn inode_table_lbas(&self) -> Range<u64> {
        let ratio = self.fs.block_size as u64 / self.device_block_size as u64;
        let s = self.partition.start_lba + self.fs.inode_tables[0] as u64 * ratio;
        s..s + self.fs.inode_table_blocks as u64 * ratio
    }

    /// Device LBA range covering the superblock (partition bytes 1024..2048).
    pub fn superblock_lbas(&self) -> Range<u64> {
        let bs = self.device_block_size as u64;
        let s = self.partition.start_lba + 1024 / bs;
        s..s + 1024u64.div_ceil(bs).max(1)
    }

    /// LBA holding the inode record of `path`.
    pub fn inode_lba(&self, path: &str) -> Option<u64> {
        let f = self.file(path)?;
        Some(self.partition.start_lba + f.inode_offset / self.device_block_size as u64)
    }

    /// The read sequence of a typical boot that ends by executing `init`:
    /// partition table, boot block, superblock, group descriptors, inode
    /// table, then every extent of `init`.
    pub fn boot_trace(&self, init: &str) -> Option<Vec<TraceOp>> {
        let bs = self.device_block_size as u64;
        let ps = self.partition.start_lba;
        let mut ops = vec![(0, 1), (1, 1)];
        let sb = self.superblock_lbas();
        ops.push((ps, 2.min(sb.start - ps).max(1)));
        ops.push((sb.start, sb.end - sb.start));
        let ratio = self.fs.block_size as u64 / bs;
        let gdt = ps + (self.fs.first_data_block as u64 + 1) * ratio;
        ops.push((gdt, ratio.max(1)));
        let it = self.inode_table_lbas();
        ops.push((it.start, (it.end - it.start).min(8)));
        let lba = self.inode_lba(init)?;
        ops.push((lba, 1));
        // One readahead span over all data extents, as the boot flow reads it.
        let lbas = &self.file(init)?.lbas;
        if let (Some(first), Some(last)) = (lbas.first(), lbas.last()) {
            ops.push((first[0], last[1] - first[0]));
        }
        Some(
            ops.into_iter()
                .enumerate()
                .map(|(i, (lba, count))| TraceOp {
                    dir: Dir::Read,
                    lba,
                    count,
                    payload: None,
                    line: i + 1,
                })
                .collect(),
        )
    }
}

#[derive(Debug, Clone)]
pub struct BuiltImage {
    pub image: Vec<u8>,
    pub manifest: Manifest,
}

fn seeded_bytes(seed: u64, salt: &str, len: u64) -> Vec<u8> {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in salt.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ h);
    let mut v = vec![0u8; len as usize];
    rng.fill_bytes(&mut v);
    v
}

fn node_of(f: &FileSpec, seed: u64, base: &Path) -> Result<NodeSpec, BuildError> {
    let sources = [
        f.text.is_some(),
        f.hex.is_some(),
        f.source.is_some(),
        f.random.is_some(),
        f.symlink.is_some(),
        f.dir,
    ]
    .iter()
    .filter(|x| **x)
    .count();
    if sources > 1 {
        return Err(BuildError::Spec(format!("{}: more than one content source", f.path)));
    }
    let content = if let Some(t) = &f.text {
        NodeContent::File(t.as_bytes().to_vec())
    } else if let Some(h) = &f.hex {
        let clean: String = h.chars().filter(|c| !c.is_whitespace()).collect();
        NodeContent::File(
            hex::decode(clean).map_err(|e| BuildError::Spec(format!("{}: bad hex: {e}", f.path)))?,
        )
    } else if let Some(s) = &f.source {
        let p = base.join(s);
        NodeContent::File(std::fs::read(&p).map_err(|e| BuildError::Io {
            path: p.display().to_string(),
            source: e,
        })?)
    } else if let Some(n) = f.random {
        NodeContent::File(seeded_bytes(seed, &f.path, n))
    } else if let Some(t) = &f.symlink {
        NodeContent::Symlink(t.clone())
    } else if f.dir {
        NodeContent::Dir
    } else {
        NodeContent::File(Vec::new())
    };
    Ok(NodeSpec {
        path: f.path.clone(),
        content,
        gap_before: f.gap_before,
        fragment_every: f.fragment_every,
        perm: f.mode & 0o7777,
    })
}

fn guid(seed: u64, salt: &str) -> [u8; 16] {
    let mut g: [u8; 16] = seeded_bytes(seed, salt, 16).try_into().unwrap();
    g[7] = (g[7] & 0x0F) | 0x40; // version 4, stored little-endian
    g[8] = (g[8] & 0x3F) | 0x80;
    g
}

/// Builds an image in memory. `base` resolves `source` paths.
pub fn build(spec: &ImageSpec, base: &Path) -> Result<BuiltImage, BuildError> {
    let bs = spec.block_size;
    if bs != 512 && bs != 4096 {
        return Err(BuildError::Spec(format!("device block size {bs} (512 or 4096)")));
    }
    let bytes = spec
        .size_mib
        .checked_mul(1 << 20)
        .ok_or_else(|| BuildError::Spec("size overflow".into()))?;
    if bytes > 8 << 30 {
        return Err(BuildError::Spec("images above 8 GiB are not supported".into()));
    }
    let total = bytes / bs as u64;
    let start = spec.partition_start.unwrap_or((1 << 20) / bs as u64);
    let (first_ok, last_ok) = match spec.table {
        TableKind::Gpt => (
            table::gpt_first_usable(bs),
            table::gpt_last_usable(bs, total.max(64)),
        ),
        TableKind::Mbr => (1, total.saturating_sub(1).min(u32::MAX as u64)),
    };
    if total < 64 || start < first_ok || start > last_ok {
        return Err(BuildError::NoSpace(format!(
            "partition start {start} outside usable range {first_ok}..={last_ok}"
        )));
    }
    let len = spec.partition_blocks.unwrap_or(last_ok - start + 1);
    if len == 0 || start + len - 1 > last_ok {
        return Err(BuildError::NoSpace(format!(
            "partition of {len} blocks at {start} exceeds the disk"
        )));
    }
    let nodes = spec
        .files
        .iter()
        .map(|f| node_of(f, spec.seed, base))
        .collect::<Result<Vec<_>, _>>()?;

    let mut image = vec![0u8; bytes as usize];
    let type_tag = match spec.table {
        TableKind::Gpt => {
            table::write_gpt(
                &mut image,
                bs,
                guid(spec.seed, "disk"),
                guid(spec.seed, "part"),
                "rootfs",
                start,
                len,
            );
            LINUX_FS_GUID.to_string()
        }
        TableKind::Mbr => {
            let sig = u32::from_le_bytes(seeded_bytes(spec.seed, "mbr", 4).try_into().unwrap());
            table::write_mbr(&mut image, sig, start, len);
            "0x83".to_string()
        }
    };
    let po = (start * bs as u64) as usize;
    let pe = po + (len * bs as u64) as usize;
    let params = fs::FsParams {
        block_size: spec.fs_block_size,
        min_inodes: spec.inodes,
        volume_name: spec.volume_name.clone(),
        uuid: guid(spec.seed, "fs"),
    };
    let layout = fs::format(&mut image[po..pe], &params, &nodes)?;
    if layout.block_size < bs {
        return Err(BuildError::Spec(format!(
            "fs block size {} below device block size {bs}",
            layout.block_size
        )));
    }
    let ratio = (layout.block_size / bs) as u64;
    let files = layout
        .placed
        .iter()
        .map(|p| ManifestFile {
            path: p.path.clone(),
            kind: p.kind.to_string(),
            inode: p.inode,
            size: p.size,
            sha256: p.sha256.clone(),
            lbas: p
                .extents
                .iter()
                .map(|e| [start + e.start * ratio, start + (e.start + e.len) * ratio])
                .collect(),
            extents: p.extents.clone(),
            meta_blocks: p.meta_blocks.clone(),
            inode_offset: p.inode_offset,
        })
        .collect();
    let manifest = Manifest {
        device_block_size: bs,
        total_blocks: total,
        table: spec.table,
        partition: ManifestPartition {
            index: 1,
            start_lba: start,
            length_lbas: len,
            type_tag,
        },
        fs: ManifestFs {
            block_size: layout.block_size,
            blocks_count: layout.blocks_count,
            inodes_count: layout.inodes_count,
            inodes_per_group: layout.inodes_per_group,
            inode_size: layout.inode_size,
            groups: layout.groups,
            first_data_block: layout.first_data_block,
            inode_tables: layout.inode_tables,
            inode_table_blocks: layout.inode_table_blocks,
            free_blocks: layout.free_blocks,
        },
        files,
    };
    Ok(BuiltImage { image, manifest })
}

pub fn parse_spec(text: &str) -> Result<ImageSpec, BuildError> {
    toml::from_str(text).map_err(|e| BuildError::Spec(e.to_string()))
}

/// Builds from a TOML spec file and writes `out` plus `out.manifest.json`.
pub fn build_to_file(spec_path: &Path, out: &Path) -> Result<Manifest, BuildError> {
    let io = |p: &Path, e: std::io::Error| BuildError::Io {
        path: p.display().to_string(),
        source: e,
    };
    let text = std::fs::read_to_string(spec_path).map_err(|e| io(spec_path, e))?;
    let spec = parse_spec(&text)?;
    let base = spec_path.parent().unwrap_or(Path::new("."));
    let built = build(&spec, base)?;
    std::fs::write(out, &built.image).map_err(|e| io(out, e))?;
    let mp = manifest_path(out);
    let json = serde_json::to_string_pretty(&built.manifest).expect("manifest serializes");
    std::fs::write(&mp, json).map_err(|e| io(&mp, e))?;
    Ok(built.manifest)
}

pub fn manifest_path(image: &Path) -> std::path::PathBuf {
    let mut s = image.as_os_str().to_owned();
    s.push(".manifest.json");
    s.into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diskfs::{parse_partitions, Ext2Fs, MemDevice};

    #[test]
    fn empty_partition_mounts_with_empty_root() {
        let b = build(&ImageSpec { size_mib: 8, ..Default::default() }, Path::new(".")).unwrap();
        let mut dev = MemDevice::new(&b.image, 512);
        let parts = parse_partitions(&mut dev).unwrap();
        assert_eq!(parts.len(), 1);
        assert_eq!(parts[0].start_lba, 2048);
        let fs = Ext2Fs::open(&mut dev, &parts[0]).unwrap();
        assert!(fs.walk(&mut dev).unwrap().is_empty());
        let root = fs.read_inode(&mut dev, 2).unwrap();
        let names: Vec<String> = fs.read_dir(&mut dev, &root).unwrap().into_iter().map(|e| e.name).collect();
        assert_eq!(names, vec![".", "..", "lost+found"]);
    }

    #[test]
    fn oversized_file_is_a_build_error() {
        let spec = ImageSpec {
            size_mib: 4,
            files: vec![FileSpec::random("/big", 8 << 20)],
            ..Default::default()
        };
        assert!(matches!(build(&spec, Path::new(".")), Err(BuildError::NoSpace(_))));
    }

    #[test]
    fn spec_parses_from_toml() {
        let s = parse_spec(
            r#"
            size_mib = 16
            fs_block_size = 4096
            [[files]]
            path = "/etc/hostname"
            text = "victim\n"
            [[files]]
            path = "/bin/sh"
            symlink = "busybox"
            "#,
        )
        .unwrap();
        assert_eq!(s.files.len(), 2);
        assert!(parse_spec("size_mib = 1\nbogus = 2\n").is_err());
    }
}
