//! ext2 formatter: writes a revision 1 filesystem with the FILETYPE feature
//! and places files sequentially, indirect blocks ahead of the data they map.
//! Every group carries a superblock and descriptor backup (no sparse_super).

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use super::BuildError;
use crate::diskfs::ext2::{EXT2_MAGIC, INCOMPAT_FILETYPE, ROOT_INO, S_IFDIR, S_IFLNK, S_IFREG};
use crate::diskfs::Extent;

const INODE_SIZE: u32 = 128;
const FIRST_INO: u32 = 11;
const LOST_FOUND_INO: u32 = 11;
const TIMESTAMP: u32 = 1_700_000_000;
const FT_REG: u8 = 1;
const FT_DIR: u8 = 2;
const FT_SYMLINK: u8 = 7;

#[derive(Debug, Clone)]
pub enum NodeContent {
    File(Vec<u8>),
    Dir,
    Symlink(String),
}

#[derive(Debug, Clone)]
pub struct NodeSpec {
    pub path: String,
    pub content: NodeContent,
    /// Free blocks left in front of the first data block.
    pub gap_before: u64,
    /// Leave one free block after every `n` data blocks.
    pub fragment_every: Option<u64>,
    pub perm: u16,
}

#[derive(Debug, Clone)]
pub struct FsParams {
    pub block_size: u32,
    pub min_inodes: u32,
    pub volume_name: String,
    pub uuid: [u8; 16],
}

#[derive(Debug, Clone)]
pub struct Placed {
    pub path: String,
    pub inode: u32,
    pub kind: &'static str,
    pub size: u64,
    pub sha256: String,
    pub extents: Vec<Extent>,
    pub meta_blocks: Vec<u64>,
    pub inode_offset: u64,
}

#[derive(Debug, Clone)]
pub struct FsLayout {
    pub block_size: u32,
    pub blocks_count: u32,
    pub inodes_count: u32,
    pub inodes_per_group: u32,
    pub inode_size: u32,
    pub groups: u32,
    pub first_data_block: u32,
    /// First block of each group's inode table.
    pub inode_tables: Vec<u32>,
    pub inode_table_blocks: u32,
    pub free_blocks: u32,
    pub placed: Vec<Placed>,
}

struct Geometry {
    bs: u32,
    blocks: u32,
    fdb: u32,
    bpg: u32,
    groups: u32,
    ipg: u32,
    gdt_blocks: u32,
    itable_blocks: u32,
}

impl Geometry {
    fn group_start(&self, g: u32) -> u32 {
        self.fdb + g * self.bpg
    }
    fn block_bitmap(&self, g: u32) -> u32 {
        self.group_start(g) + 1 + self.gdt_blocks
    }
    fn inode_bitmap(&self, g: u32) -> u32 {
        self.block_bitmap(g) + 1
    }
    fn inode_table(&self, g: u32) -> u32 {
        self.block_bitmap(g) + 2
    }
    fn meta_blocks(&self) -> u32 {
        3 + self.gdt_blocks + self.itable_blocks
    }
    fn group_len(&self, g: u32) -> u32 {
        (self.blocks - self.group_start(g)).min(self.bpg)
    }
    fn inode_offset(&self, ino: u32) -> u64 {
        let g = (ino - 1) / self.ipg;
        let i = (ino - 1) % self.ipg;
        self.inode_table(g) as u64 * self.bs as u64 + (i * INODE_SIZE) as u64
    }
}

fn geometry(bs: u32, part_bytes: u64, want_inodes: u32) -> Result<Geometry, BuildError> {
    let mut blocks = (part_bytes / bs as u64).min(u32::MAX as u64) as u32;
    let fdb = (bs == 1024) as u32;
    let bpg = 8 * bs;
    if blocks <= fdb + 16 {
        return Err(BuildError::NoSpace("partition too small for a filesystem".into()));
    }
    let per_block = bs / INODE_SIZE;
    loop {
        let groups = (blocks - fdb).div_ceil(bpg);
        let gdt_blocks = (groups * 32).div_ceil(bs);
        let mut ipg = want_inodes.div_ceil(groups).max(16);
        ipg = ipg.div_ceil(per_block.max(8)) * per_block.max(8);
        if ipg > 8 * bs {
            return Err(BuildError::Spec(format!("{want_inodes} inodes do not fit")));
        }
        let g = Geometry {
            bs,
            blocks,
            fdb,
            bpg,
            groups,
            ipg,
            gdt_blocks,
            itable_blocks: ipg * INODE_SIZE / bs,
        };
        let last = g.group_len(groups - 1);
        if last >= g.meta_blocks() + 8 {
            return Ok(g);
        }
        if groups == 1 {
            return Err(BuildError::NoSpace("partition too small for group metadata".into()));
        }
        // Drop a runt last group, as mke2fs does.
        blocks = g.group_start(groups - 1);
    }
}

struct Node {
    ino: u32,
    kind: u8,
    perm: u16,
    data: Vec<u8>,
    children: Vec<(String, u32, u8)>,
    parent: u32,
    gap_before: u64,
    fragment_every: Option<u64>,
    path: String,
    blocks: Vec<u32>,
    meta: Vec<u32>,
    block_ptrs: [u32; 15],
}

struct Alloc {
    used: Vec<bool>,
    cursor: u32,
}

impl Alloc {
    fn next(&mut self) -> Result<u32, BuildError> {
        while (self.cursor as usize) < self.used.len() && self.used[self.cursor as usize] {
            self.cursor += 1;
        }
        if self.cursor as usize >= self.used.len() {
            return Err(BuildError::NoSpace("filesystem full".into()));
        }
        let b = self.cursor;
        self.used[b as usize] = true;
        self.cursor += 1;
        Ok(b)
    }

    /// Moves the cursor past `n` free blocks without allocating them.
    fn skip(&mut self, n: u64) {
        for _ in 0..n {
            while (self.cursor as usize) < self.used.len() && self.used[self.cursor as usize] {
                self.cursor += 1;
            }
            self.cursor = (self.cursor + 1).min(self.used.len() as u32);
        }
    }
}

fn split_path(p: &str) -> Result<Vec<String>, BuildError> {
    if !p.starts_with('/') {
        return Err(BuildError::Spec(format!("{p}: path must be absolute")));
    }
    let comps: Vec<String> = p.split('/').filter(|c| !c.is_empty()).map(String::from).collect();
    if comps.is_empty() {
        return Err(BuildError::Spec(format!("{p}: empty path")));
    }
    for c in &comps {
        if c == "." || c == ".." || c.len() > 255 {
            return Err(BuildError::Spec(format!("{p}: bad component {c:?}")));
        }
    }
    Ok(comps)
}

fn dir_data(children: &[(String, u32, u8)], me: u32, parent: u32, bs: usize) -> Vec<u8> {
    let mut all = vec![(".".to_string(), me, FT_DIR), ("..".to_string(), parent, FT_DIR)];
    all.extend(children.iter().cloned());
    let mut blocks: Vec<Vec<u8>> = vec![Vec::new()];
    let mut last_off: Vec<usize> = vec![0];
    for (name, ino, ft) in all {
        let need = (8 + name.len()).div_ceil(4) * 4;
        if blocks.last().unwrap().len() + need > bs {
            blocks.push(Vec::new());
            last_off.push(0);
        }
        let b = blocks.last_mut().unwrap();
        *last_off.last_mut().unwrap() = b.len();
        let mut e = vec![0u8; need];
        e[0..4].copy_from_slice(&ino.to_le_bytes());
        e[4..6].copy_from_slice(&(need as u16).to_le_bytes());
        e[6] = name.len() as u8;
        e[7] = ft;
        e[8..8 + name.len()].copy_from_slice(name.as_bytes());
        b.extend_from_slice(&e);
    }
    let mut out = Vec::with_capacity(blocks.len() * bs);
    for (mut b, off) in blocks.into_iter().zip(last_off) {
        // The last entry of a block absorbs the slack.
        let rec = (bs - off) as u16;
        b[off + 4..off + 6].copy_from_slice(&rec.to_le_bytes());
        b.resize(bs, 0);
        out.extend_from_slice(&b);
    }
    out
}

/// Places data and index blocks for one node. Index blocks are allocated
/// immediately before the first data block they map.
fn place(node: &mut Node, a: &mut Alloc, bs: u32, ptrs: &mut BTreeMap<u32, Vec<u32>>) -> Result<(), BuildError> {
    let per = (bs / 4) as u64;
    let n = (node.data.len() as u64).div_ceil(bs as u64);
    a.skip(node.gap_before);
    let mut l1: Option<u32> = None;
    let mut l2: Option<(u64, u32)> = None; // (child index, block) under DIND
    let mut t_root: Option<u32> = None;
    let mut t_mid: Option<(u64, u32)> = None;
    let mut t_leaf: Option<(u64, u32)> = None;
    let new_index = |a: &mut Alloc, node: &mut Node, ptrs: &mut BTreeMap<u32, Vec<u32>>| -> Result<u32, BuildError> {
        let b = a.next()?;
        node.meta.push(b);
        ptrs.insert(b, vec![0; per as usize]);
        Ok(b)
    };
    for i in 0..n {
        if let Some(k) = node.fragment_every {
            if k > 0 && i > 0 && i % k == 0 {
                a.skip(1);
            }
        }
        let slot: (u32, usize) = if i < 12 {
            (0, i as usize)
        } else if i < 12 + per {
            let b = match l1 {
                Some(b) => b,
                None => {
                    let b = new_index(a, node, ptrs)?;
                    node.block_ptrs[12] = b;
                    l1 = Some(b);
                    b
                }
            };
            (b, (i - 12) as usize)
        } else if i < 12 + per + per * per {
            let j = i - 12 - per;
            if node.block_ptrs[13] == 0 {
                node.block_ptrs[13] = new_index(a, node, ptrs)?;
            }
            let root = node.block_ptrs[13];
            let ci = j / per;
            let child = match l2 {
                Some((c, b)) if c == ci => b,
                _ => {
                    let b = new_index(a, node, ptrs)?;
                    ptrs.get_mut(&root).unwrap()[ci as usize] = b;
                    l2 = Some((ci, b));
                    b
                }
            };
            (child, (j % per) as usize)
        } else {
            let j = i - 12 - per - per * per;
            if j >= per * per * per {
                return Err(BuildError::Spec(format!("{}: file too large for ext2 block map", node.path)));
            }
            let root = match t_root {
                Some(b) => b,
                None => {
                    let b = new_index(a, node, ptrs)?;
                    node.block_ptrs[14] = b;
                    t_root = Some(b);
                    b
                }
            };
            let mi = j / (per * per);
            let mid = match t_mid {
                Some((c, b)) if c == mi => b,
                _ => {
                    let b = new_index(a, node, ptrs)?;
                    ptrs.get_mut(&root).unwrap()[mi as usize] = b;
                    t_mid = Some((mi, b));
                    b
                }
            };
            let li = j / per;
            let leaf = match t_leaf {
                Some((c, b)) if c == li => b,
                _ => {
                    let b = new_index(a, node, ptrs)?;
                    ptrs.get_mut(&mid).unwrap()[(li % per) as usize] = b;
                    t_leaf = Some((li, b));
                    b
                }
            };
            (leaf, (j % per) as usize)
        };
        let d = a.next()?;
        node.blocks.push(d);
        if slot.0 == 0 {
            node.block_ptrs[slot.1] = d;
        } else {
            ptrs.get_mut(&slot.0).unwrap()[slot.1] = d;
        }
    }
    Ok(())
}

fn put16(b: &mut [u8], o: usize, v: u16) {
    b[o..o + 2].copy_from_slice(&v.to_le_bytes());
}

fn put32(b: &mut [u8], o: usize, v: u32) {
    b[o..o + 4].copy_from_slice(&v.to_le_bytes());
}

pub fn extents_of(blocks: &[u32]) -> Vec<Extent> {
    let mut out: Vec<Extent> = Vec::new();
    for (i, &b) in blocks.iter().enumerate() {
        match out.last_mut() {
            Some(e) if e.start + e.len == b as u64 => e.len += 1,
            _ => out.push(Extent {
                file_block: i as u64,
                start: b as u64,
                len: 1,
            }),
        }
    }
    out
}

/// Formats `part` (the partition's bytes) and places `nodes`.
pub fn format(part: &mut [u8], params: &FsParams, nodes: &[NodeSpec]) -> Result<FsLayout, BuildError> {
    let bs = params.block_size;
    if !matches!(bs, 1024 | 2048 | 4096) {
        return Err(BuildError::Spec(format!("unsupported fs block size {bs}")));
    }
    let want = params.min_inodes.max(nodes.len() as u32 * 2 + FIRST_INO + 8);
    let g = geometry(bs, part.len() as u64, want)?;
    let inodes_count = g.ipg * g.groups;

    // Build the tree.
    let mut tree: BTreeMap<u32, Node> = BTreeMap::new();
    let mk = |ino: u32, kind: u8, parent: u32, path: &str| Node {
        ino,
        kind,
        perm: if kind == FT_DIR { 0o755 } else { 0o644 },
        data: Vec::new(),
        children: Vec::new(),
        parent,
        gap_before: 0,
        fragment_every: None,
        path: path.to_string(),
        blocks: Vec::new(),
        meta: Vec::new(),
        block_ptrs: [0; 15],
    };
    tree.insert(ROOT_INO, mk(ROOT_INO, FT_DIR, ROOT_INO, "/"));
    let mut lf = mk(LOST_FOUND_INO, FT_DIR, ROOT_INO, "/lost+found");
    lf.perm = 0o700;
    tree.insert(LOST_FOUND_INO, lf);
    tree.get_mut(&ROOT_INO)
        .unwrap()
        .children
        .push(("lost+found".into(), LOST_FOUND_INO, FT_DIR));
    let mut by_path: BTreeMap<String, u32> = BTreeMap::new();
    by_path.insert("/lost+found".into(), LOST_FOUND_INO);
    let mut next_ino = FIRST_INO + 1;
    for spec in nodes {
        let comps = split_path(&spec.path)?;
        let mut parent = ROOT_INO;
        let mut cur = String::new();
        for (k, c) in comps.iter().enumerate() {
            cur.push('/');
            cur.push_str(c);
            let last = k + 1 == comps.len();
            if let Some(&ino) = by_path.get(&cur) {
                let existing = tree[&ino].kind;
                if last {
                    if matches!(spec.content, NodeContent::Dir) && existing == FT_DIR {
                        parent = ino;
                        continue;
                    }
                    return Err(BuildError::Spec(format!("{}: duplicate path", spec.path)));
                }
                if existing != FT_DIR {
                    return Err(BuildError::Spec(format!("{cur}: not a directory")));
                }
                parent = ino;
                continue;
            }
            if next_ino > inodes_count {
                return Err(BuildError::NoSpace("out of inodes".into()));
            }
            let ino = next_ino;
            next_ino += 1;
            let kind = if !last {
                FT_DIR
            } else {
                match &spec.content {
                    NodeContent::File(_) => FT_REG,
                    NodeContent::Dir => FT_DIR,
                    NodeContent::Symlink(_) => FT_SYMLINK,
                }
            };
            let mut n = mk(ino, kind, parent, &cur);
            if last {
                n.perm = spec.perm;
                n.gap_before = spec.gap_before;
                n.fragment_every = spec.fragment_every;
                match &spec.content {
                    NodeContent::File(d) => n.data = d.clone(),
                    NodeContent::Symlink(t) => {
                        if t.is_empty() || t.len() > bs as usize {
                            return Err(BuildError::Spec(format!("{}: bad symlink target", spec.path)));
                        }
                        n.data = t.as_bytes().to_vec();
                    }
                    NodeContent::Dir => {}
                }
            }
            tree.insert(ino, n);
            tree.get_mut(&parent).unwrap().children.push((c.clone(), ino, kind));
            by_path.insert(cur.clone(), ino);
            parent = ino;
        }
    }

    // Directory contents are known now.
    let dir_inos: Vec<u32> = tree.values().filter(|n| n.kind == FT_DIR).map(|n| n.ino).collect();
    for ino in dir_inos {
        let n = &tree[&ino];
        let d = dir_data(&n.children, ino, n.parent, bs as usize);
        tree.get_mut(&ino).unwrap().data = d;
    }

    // Mark metadata.
    let mut used = vec![false; g.blocks as usize];
    for b in 0..g.fdb {
        used[b as usize] = true;
    }
    for grp in 0..g.groups {
        let s = g.group_start(grp);
        for b in s..s + g.meta_blocks() {
            used[b as usize] = true;
        }
    }
    let mut a = Alloc {
        used,
        cursor: g.fdb,
    };
    let mut ptrs: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    for n in tree.values_mut() {
        let fast_link = n.kind == FT_SYMLINK && n.data.len() < 60;
        if fast_link {
            for (i, c) in n.data.chunks(4).enumerate() {
                let mut w = [0u8; 4];
                w[..c.len()].copy_from_slice(c);
                n.block_ptrs[i] = u32::from_le_bytes(w);
            }
            continue;
        }
        place(n, &mut a, bs, &mut ptrs)?;
    }

    // Data and index blocks.
    let bsz = bs as usize;
    for n in tree.values() {
        for (i, &b) in n.blocks.iter().enumerate() {
            let src = &n.data[i * bsz..((i + 1) * bsz).min(n.data.len())];
            let o = b as usize * bsz;
            part[o..o + src.len()].copy_from_slice(src);
        }
    }
    for (&b, list) in &ptrs {
        let o = b as usize * bsz;
        for (i, p) in list.iter().enumerate() {
            put32(part, o + 4 * i, *p);
        }
    }

    // Inodes.
    let mut used_dirs = vec![0u16; g.groups as usize];
    let mut inode_used = vec![false; inodes_count as usize + 1];
    for i in 1..FIRST_INO {
        inode_used[i as usize] = true;
    }
    for n in tree.values() {
        inode_used[n.ino as usize] = true;
        let off = g.inode_offset(n.ino) as usize;
        let rec = &mut part[off..off + INODE_SIZE as usize];
        let ty = match n.kind {
            FT_DIR => S_IFDIR,
            FT_SYMLINK => S_IFLNK,
            _ => S_IFREG,
        };
        put16(rec, 0, ty | n.perm);
        put32(rec, 4, n.data.len() as u32);
        put32(rec, 8, TIMESTAMP);
        put32(rec, 12, TIMESTAMP);
        put32(rec, 16, TIMESTAMP);
        let links = if n.kind == FT_DIR {
            2 + n.children.iter().filter(|c| c.2 == FT_DIR).count() as u16
        } else {
            1
        };
        put16(rec, 26, links);
        let sectors = (n.blocks.len() + n.meta.len()) as u32 * (bs / 512);
        put32(rec, 28, sectors);
        for (i, p) in n.block_ptrs.iter().enumerate() {
            put32(rec, 40 + 4 * i, *p);
        }
        if n.kind == FT_REG {
            put32(rec, 108, (n.data.len() as u64 >> 32) as u32);
        }
        if n.kind == FT_DIR {
            used_dirs[((n.ino - 1) / g.ipg) as usize] += 1;
        }
    }

    // Bitmaps and descriptors.
    let mut gdt = vec![0u8; (g.gdt_blocks * bs) as usize];
    let mut free_blocks_total = 0u32;
    let mut free_inodes_total = 0u32;
    for grp in 0..g.groups {
        let s = g.group_start(grp);
        let len = g.group_len(grp);
        let mut bb = vec![0u8; bsz];
        let mut free_b = 0u32;
        for i in 0..8 * bs {
            let set = i >= len || a.used[(s + i) as usize];
            if set {
                bb[(i / 8) as usize] |= 1 << (i % 8);
            } else {
                free_b += 1;
            }
        }
        let mut ib = vec![0u8; bsz];
        let mut free_i = 0u32;
        for i in 0..8 * bs {
            let ino = grp * g.ipg + i + 1;
            let set = i >= g.ipg || inode_used[ino as usize];
            if set {
                ib[(i / 8) as usize] |= 1 << (i % 8);
            } else {
                free_i += 1;
            }
        }
        let o = g.block_bitmap(grp) as usize * bsz;
        part[o..o + bsz].copy_from_slice(&bb);
        let o = g.inode_bitmap(grp) as usize * bsz;
        part[o..o + bsz].copy_from_slice(&ib);
        let d = &mut gdt[grp as usize * 32..grp as usize * 32 + 32];
        put32(d, 0, g.block_bitmap(grp));
        put32(d, 4, g.inode_bitmap(grp));
        put32(d, 8, g.inode_table(grp));
        put16(d, 12, free_b as u16);
        put16(d, 14, free_i as u16);
        put16(d, 16, used_dirs[grp as usize]);
        free_blocks_total += free_b;
        free_inodes_total += free_i;
    }

    let mut sb = vec![0u8; 1024];
    put32(&mut sb, 0, inodes_count);
    put32(&mut sb, 4, g.blocks);
    put32(&mut sb, 12, free_blocks_total);
    put32(&mut sb, 16, free_inodes_total);
    put32(&mut sb, 20, g.fdb);
    let log = bs.trailing_zeros() - 10;
    put32(&mut sb, 24, log);
    put32(&mut sb, 28, log);
    put32(&mut sb, 32, g.bpg);
    put32(&mut sb, 36, g.bpg);
    put32(&mut sb, 40, g.ipg);
    put32(&mut sb, 44, TIMESTAMP);
    put32(&mut sb, 48, TIMESTAMP);
    put16(&mut sb, 54, 0xFFFF);
    put16(&mut sb, 56, EXT2_MAGIC);
    put16(&mut sb, 58, 1); // clean
    put16(&mut sb, 60, 1); // continue on errors
    put32(&mut sb, 64, TIMESTAMP);
    put32(&mut sb, 76, 1); // dynamic revision
    put32(&mut sb, 84, FIRST_INO);
    put16(&mut sb, 88, INODE_SIZE as u16);
    put32(&mut sb, 96, INCOMPAT_FILETYPE);
    sb[104..120].copy_from_slice(&params.uuid);
    let vn = params.volume_name.as_bytes();
    sb[120..120 + vn.len().min(16)].copy_from_slice(&vn[..vn.len().min(16)]);
    for grp in 0..g.groups {
        put16(&mut sb, 90, grp as u16);
        let at = if grp == 0 { 1024 } else { g.group_start(grp) as usize * bsz };
        part[at..at + 1024].copy_from_slice(&sb);
        let go = (g.group_start(grp) + 1) as usize * bsz;
        part[go..go + gdt.len()].copy_from_slice(&gdt);
    }

    let placed = tree
        .values()
        .filter(|n| n.ino != ROOT_INO)
        .map(|n| Placed {
            path: n.path.clone(),
            inode: n.ino,
            kind: match n.kind {
                FT_DIR => "dir",
                FT_SYMLINK => "symlink",
                _ => "file",
            },
            size: n.data.len() as u64,
            sha256: hex::encode(Sha256::digest(&n.data)),
            extents: extents_of(&n.blocks),
            meta_blocks: n.meta.iter().map(|&b| b as u64).collect(),
            inode_offset: g.inode_offset(n.ino),
        })
        .collect();

    Ok(FsLayout {
        block_size: bs,
        blocks_count: g.blocks,
        inodes_count,
        inodes_per_group: g.ipg,
        inode_size: INODE_SIZE,
        groups: g.groups,
        first_data_block: g.fdb,
        inode_tables: (0..g.groups).map(|x| g.inode_table(x)).collect(),
        inode_table_blocks: g.itable_blocks,
        free_blocks: free_blocks_total,
        placed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dir_blocks_are_well_formed() {
        let kids: Vec<(String, u32, u8)> = (0..200).map(|i| (format!("file-{i:03}"), 20 + i, FT_REG)).collect();
        let d = dir_data(&kids, 12, 2, 1024);
        assert_eq!(d.len() % 1024, 0);
        let mut n = 0;
        for blk in d.chunks(1024) {
            let mut off = 0;
            while off < 1024 {
                let rec = u16::from_le_bytes([blk[off + 4], blk[off + 5]]) as usize;
                assert!(rec >= 8);
                n += 1;
                off += rec;
            }
            assert_eq!(off, 1024);
        }
        assert_eq!(n, 202);
    }

    #[test]
    fn runt_group_is_dropped() {
        let g = geometry(1024, (8192 + 10) * 1024, 64).unwrap();
        assert_eq!(g.groups, 1);
        assert_eq!(g.blocks, 8193);
    }
}
