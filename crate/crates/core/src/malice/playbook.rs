//! Playbook definitions and the device-side file helpers the steps use.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::mining::MineRule;
use super::shadow::Policy;
use crate::backend::{BlockStore, Mode};
use crate::diskfs::{parse_partitions, to_absolute_lbas, Ext2Fs, PartitionEntry, StoreView, LINUX_FS_GUID};
use crate::event::{Actor, EventLog, SimTime};
use crate::nvme::shutdown::{HookRun, ShutdownHook};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Trigger {
    /// First match of the key in the write stream.
    Key(String),
    /// The keys matched in this order (see [`super::SequenceTracker`]).
    Sequence(Vec<String>),
    /// Simulated time reaches this point.
    Time(SimTime),
    /// The `after`-th and every later occurrence of a device event, until a
    /// run of the playbook succeeds.
    Event { kind: String, after: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Step {
    InstallShadow {
        target: ShadowTarget,
        payload: Vec<u8>,
        policy: Policy,
        gate: Option<String>,
    },
    PatchGrub {
        path: String,
        gate: String,
        in_place: bool,
    },
    Dos(Mode),
    Mine(Vec<MineRule>),
    ScanInject {
        signature: Vec<u8>,
        stride: usize,
        /// Module image written at `hit + offset`; `None` scans only.
        payload: Option<Vec<u8>>,
        offset: u64,
    },
    PeerProbe {
        address: u64,
        len: usize,
    },
    ReplaceOnShutdown {
        path: String,
        payload: Vec<u8>,
        elapsed: SimTime,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ShadowTarget {
    Path(String),
    Lbas(Vec<Range<u64>>),
}

impl Step {
    pub fn name(&self) -> &'static str {
        match self {
            Step::InstallShadow { .. } => "install-shadow",
            Step::PatchGrub { .. } => "patch-grub",
            Step::Dos(_) => "dos",
            Step::Mine(_) => "mine",
            Step::ScanInject { .. } => "scan-inject",
            Step::PeerProbe { .. } => "peer-probe",
            Step::ReplaceOnShutdown { .. } => "replace-on-shutdown",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Playbook {
    pub id: String,
    pub trigger: Trigger,
    /// Another playbook that must have fired first.
    pub requires: Option<String>,
    pub steps: Vec<Step>,
}

/// A file as found on the device's own flash.
#[derive(Debug, Clone)]
pub struct Located {
    pub part: PartitionEntry,
    pub size: u64,
    pub allocated: u64,
    pub ranges: Vec<Range<u64>>,
    /// Absolute byte offset of the inode record.
    pub inode_abs: u64,
    pub content: Vec<u8>,
}

pub fn locate(store: &BlockStore, path: &str) -> Result<Located, String> {
    let mut dev = StoreView(store);
    let parts = parse_partitions(&mut dev).map_err(|e| e.to_string())?;
    let part = parts
        .iter()
        .find(|p| p.type_tag == LINUX_FS_GUID || p.type_tag == "0x83")
        .or(parts.first())
        .cloned()
        .ok_or("no partition")?;
    let fs = Ext2Fs::open(&mut dev, &part).map_err(|e| e.to_string())?;
    let map = fs.resolve_path(&mut dev, path).map_err(|e| e.to_string())?;
    let ranges = to_absolute_lbas(&map, &part, store.block_size()).map_err(|e| e.to_string())?;
    let mut content = fs.read_extents(&mut dev, &map).map_err(|e| e.to_string())?;
    content.truncate(map.file_size as usize);
    Ok(Located {
        size: map.file_size,
        allocated: map.allocated_bytes(),
        ranges,
        inode_abs: part.start_lba * store.block_size() as u64 + map.inode_offset,
        part,
        content,
    })
}

/// The device block holding the inode record of `loc`, with its size field
/// set to `size`. Returns `(lba, block)`.
pub fn inode_block_with_size(store: &BlockStore, loc: &Located, size: u64) -> Result<(u64, Vec<u8>), String> {
    let bs = store.block_size() as u64;
    let lba = loc.inode_abs / bs;
    let mut block = store.read_raw(lba, 1).map_err(|e| e.to_string())?;
    let o = (loc.inode_abs % bs) as usize;
    block[o + 4..o + 8].copy_from_slice(&(size as u32).to_le_bytes());
    block[o + 108..o + 112].copy_from_slice(&((size >> 32) as u32).to_le_bytes());
    Ok((lba, block))
}

/// Rewrites a file's data in place (within its allocated blocks) and its size.
pub fn rewrite_in_place(store: &mut BlockStore, loc: &Located, data: &[u8]) -> Result<(), String> {
    if data.len() as u64 > loc.allocated {
        return Err(format!(
            "{} bytes do not fit the {} allocated",
            data.len(),
            loc.allocated
        ));
    }
    let bs = store.block_size() as usize;
    let mut padded = data.to_vec();
    padded.resize(loc.allocated as usize, 0);
    let mut off = 0;
    for r in &loc.ranges {
        let n = (r.end - r.start) as usize * bs;
        store
            .write_raw(r.start, &padded[off..off + n])
            .map_err(|e| e.to_string())?;
        off += n;
    }
    let (lba, block) = inode_block_with_size(store, loc, data.len() as u64)?;
    store.write_raw(lba, &block).map_err(|e| e.to_string())
}

/// Replaces a file while the host has it unmounted.
#[derive(Debug, Clone)]
pub struct ReplaceHook {
    pub name: String,
    pub path: String,
    pub payload: Vec<u8>,
    pub elapsed: SimTime,
}

impl ShutdownHook for ReplaceHook {
    fn name(&self) -> &str {
        &self.name
    }

    fn run(&mut self, store: &mut BlockStore, log: &mut EventLog) -> HookRun {
        let result = locate(store, &self.path).and_then(|loc| rewrite_in_place(store, &loc, &self.payload));
        let detail = match &result {
            Ok(()) => {
                log.push(
                    Actor::Malice,
                    "file-replaced",
                    json!({ "path": self.path, "bytes": self.payload.len() }),
                );
                json!({ "path": self.path })
            }
            Err(e) => json!({ "path": self.path, "error": e }),
        };
        HookRun {
            elapsed: self.elapsed,
            ok: result.is_ok(),
            detail,
        }
    }
}

/// TOML-facing mode for denial-of-service steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DosKind {
    Brick,
    Corrupt,
    Cipher,
}

impl DosKind {
    pub fn mode(self, seed: u64) -> Mode {
        match self {
            DosKind::Brick => Mode::Brick,
            DosKind::Corrupt => Mode::Corrupt { seed },
            DosKind::Cipher => Mode::Cipher {
                key: crate::backend::CipherKey::from_seed(seed),
            },
        }
    }
}
