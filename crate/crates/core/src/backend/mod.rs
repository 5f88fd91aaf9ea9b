//! Block storage behind the controller, with snapshotting and failure modes.
//!
//! Normal mode is an exact flat-array store. The other modes model a device
//! that decides to stop cooperating: `Corrupt` flips one bit per 64 bytes on
//! read, `Cipher` runs reads and writes through a keyed per-block bijection
//! (ransomware), and `Brick` kills the device for good.

mod transform;

use std::fs::{File, OpenOptions};
use std::io;
use std::os::unix::fs::FileExt;
use std::path::Path;

use thiserror::Error;

pub use transform::{
    corrupt_block, decipher_block, encipher_block, flip_position, mix64, CipherKey,
};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("device is dead")]
    DeviceDead,
    #[error("range lba={lba} count={count} exceeds capacity of {capacity} blocks")]
    Range { lba: u64, count: u64, capacity: u64 },
    #[error("buffer of {len} bytes does not match {count} blocks of {block_size} bytes")]
    BadLength {
        len: usize,
        count: u64,
        block_size: u32,
    },
    #[error("image capacity {found} bytes does not match store capacity {expected} bytes")]
    CapacityMismatch { expected: u64, found: u64 },
    #[error("unsupported block size {0}")]
    BlockSize(u32),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, BackendError>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Mode {
    Normal,
    Corrupt { seed: u64 },
    Cipher { key: CipherKey },
    Brick,
}

impl Mode {
    pub fn name(&self) -> &'static str {
        match self {
            Mode::Normal => "normal",
            Mode::Corrupt { .. } => "corrupt",
            Mode::Cipher { .. } => "cipher",
            Mode::Brick => "brick",
        }
    }
}

#[derive(Debug)]
enum Backing {
    Memory(Vec<u8>),
    File(File),
}

#[derive(Debug)]
pub struct BlockStore {
    block_size: u32,
    block_count: u64,
    mode: Mode,
    backing: Backing,
}

/// Byte-identical copy of a store's contents.
#[derive(Clone, PartialEq, Eq)]
pub struct Snapshot {
    block_size: u32,
    data: Vec<u8>,
}

impl std::fmt::Debug for Snapshot {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Snapshot")
            .field("block_size", &self.block_size)
            .field("bytes", &self.data.len())
            .finish()
    }
}

impl Snapshot {
    pub fn bytes(&self) -> &[u8] {
        &self.data
    }
}

fn check_block_size(block_size: u32) -> Result<()> {
    if block_size < 512 || !block_size.is_power_of_two() || block_size > 65536 {
        return Err(BackendError::BlockSize(block_size));
    }
    Ok(())
}

impl BlockStore {
    pub fn in_memory(block_size: u32, block_count: u64) -> Result<Self> {
        check_block_size(block_size)?;
        Ok(Self {
            block_size,
            block_count,
            mode: Mode::Normal,
            backing: Backing::Memory(vec![0; (block_size as u64 * block_count) as usize]),
        })
    }

    /// Wraps an existing raw image. Trailing bytes that do not fill a block are
    /// rejected.
    pub fn from_image(block_size: u32, image: Vec<u8>) -> Result<Self> {
        check_block_size(block_size)?;
        if image.len() as u64 % block_size as u64 != 0 {
            return Err(BackendError::CapacityMismatch {
                expected: image.len() as u64 / block_size as u64 * block_size as u64,
                found: image.len() as u64,
            });
        }
        Ok(Self {
            block_size,
            block_count: image.len() as u64 / block_size as u64,
            mode: Mode::Normal,
            backing: Backing::Memory(image),
        })
    }

    /// Opens (or creates and sizes) a flat file as backing storage.
    pub fn file_backed(path: &Path, block_size: u32, block_count: u64) -> Result<Self> {
        check_block_size(block_size)?;
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(path)?;
        let want = block_size as u64 * block_count;
        let have = file.metadata()?.len();
        if have == 0 {
            file.set_len(want)?;
        } else if have != want {
            return Err(BackendError::CapacityMismatch {
                expected: want,
                found: have,
            });
        }
        Ok(Self {
            block_size,
            block_count,
            mode: Mode::Normal,
            backing: Backing::File(file),
        })
    }

    pub fn block_size(&self) -> u32 {
        self.block_size
    }

    pub fn block_count(&self) -> u64 {
        self.block_count
    }

    pub fn capacity(&self) -> u64 {
        self.block_size as u64 * self.block_count
    }

    pub fn mode(&self) -> &Mode {
        &self.mode
    }

    pub fn is_dead(&self) -> bool {
        self.mode == Mode::Brick
    }

    /// Switches mode. Leaving `Brick` is impossible; the call is ignored and
    /// `false` returned.
    pub fn set_mode(&mut self, mode: Mode) -> bool {
        if self.is_dead() {
            return mode == Mode::Brick;
        }
        self.mode = mode;
        true
    }

    fn check_range(&self, lba: u64, count: u64) -> Result<()> {
        match lba.checked_add(count) {
            Some(end) if end <= self.block_count => Ok(()),
            _ => Err(BackendError::Range {
                lba,
                count,
                capacity: self.block_count,
            }),
        }
    }

    /// Reads stored bytes without applying any mode transform. This is the
    /// controller's private view of its own flash.
    pub fn read_raw(&self, lba: u64, count: u64) -> Result<Vec<u8>> {
        self.check_range(lba, count)?;
        let off = lba * self.block_size as u64;
        let len = (count * self.block_size as u64) as usize;
        match &self.backing {
            Backing::Memory(v) => Ok(v[off as usize..off as usize + len].to_vec()),
            Backing::File(f) => {
                let mut buf = vec![0; len];
                f.read_exact_at(&mut buf, off)?;
                Ok(buf)
            }
        }
    }

    /// Writes stored bytes without applying any mode transform.
    pub fn write_raw(&mut self, lba: u64, data: &[u8]) -> Result<()> {
        let bs = self.block_size as u64;
        if data.len() as u64 % bs != 0 {
            return Err(BackendError::BadLength {
                len: data.len(),
                count: data.len() as u64 / bs,
                block_size: self.block_size,
            });
        }
        let count = data.len() as u64 / bs;
        self.check_range(lba, count)?;
        let off = lba * bs;
        match &mut self.backing {
            Backing::Memory(v) => {
                v[off as usize..off as usize + data.len()].copy_from_slice(data);
            }
            Backing::File(f) => f.write_all_at(data, off)?,
        }
        Ok(())
    }

    pub fn read_blocks(&self, lba: u64, count: u64) -> Result<Vec<u8>> {
        if self.is_dead() {
            return Err(BackendError::DeviceDead);
        }
        let mut data = self.read_raw(lba, count)?;
        let bs = self.block_size as usize;
        match &self.mode {
            Mode::Normal | Mode::Brick => {}
            Mode::Corrupt { seed } => {
                for (i, block) in data.chunks_mut(bs).enumerate() {
                    corrupt_block(*seed, lba + i as u64, block);
                }
            }
            Mode::Cipher { key } => {
                for (i, block) in data.chunks_mut(bs).enumerate() {
                    encipher_block(key, lba + i as u64, block);
                }
            }
        }
        Ok(data)
    }

    pub fn write_blocks(&mut self, lba: u64, count: u64, data: &[u8]) -> Result<()> {
        if self.is_dead() {
            return Err(BackendError::DeviceDead);
        }
        if data.len() as u64 != count * self.block_size as u64 {
            return Err(BackendError::BadLength {
                len: data.len(),
                count,
                block_size: self.block_size,
            });
        }
        self.check_range(lba, count)?;
        match &self.mode {
            Mode::Cipher { key } => {
                let mut buf = data.to_vec();
                let bs = self.block_size as usize;
                for (i, block) in buf.chunks_mut(bs).enumerate() {
                    encipher_block(key, lba + i as u64, block);
                }
                self.write_raw(lba, &buf)
            }
            _ => self.write_raw(lba, data),
        }
    }

    pub fn flush(&mut self) -> Result<()> {
        if self.is_dead() {
            return Err(BackendError::DeviceDead);
        }
        if let Backing::File(f) = &self.backing {
            f.sync_data()?;
        }
        Ok(())
    }

    pub fn snapshot(&self) -> Result<Snapshot> {
        Ok(Snapshot {
            block_size: self.block_size,
            data: self.read_raw(0, self.block_count)?,
        })
    }

    pub fn restore(&mut self, snap: &Snapshot) -> Result<()> {
        if snap.data.len() as u64 != self.capacity() || snap.block_size != self.block_size {
            return Err(BackendError::CapacityMismatch {
                expected: self.capacity(),
                found: snap.data.len() as u64,
            });
        }
        self.write_raw(0, &snap.data)
    }

    /// Dumps the raw image (no header, stored bytes as-is).
    pub fn save_image(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.read_raw(0, self.block_count)?)?;
        Ok(())
    }

    pub fn load_image(path: &Path, block_size: u32) -> Result<Self> {
        Self::from_image(block_size, std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn store() -> BlockStore {
        BlockStore::in_memory(512, 64).unwrap()
    }

    #[test]
    fn write_read_roundtrip() {
        let mut s = store();
        let data: Vec<u8> = (0..1024).map(|i| (i * 7) as u8).collect();
        s.write_blocks(3, 2, &data).unwrap();
        assert_eq!(s.read_blocks(3, 2).unwrap(), data);
    }

    #[test]
    fn range_errors() {
        let mut s = store();
        assert!(matches!(s.read_blocks(63, 2), Err(BackendError::Range { .. })));
        assert!(matches!(
            s.write_blocks(64, 1, &[0; 512]),
            Err(BackendError::Range { .. })
        ));
        assert!(matches!(s.read_blocks(u64::MAX, 2), Err(BackendError::Range { .. })));
    }

    #[test]
    fn corrupt_is_deterministic_and_matches_recomputed_mask() {
        let mut s = store();
        s.write_blocks(5, 1, &[0u8; 512]).unwrap();
        s.set_mode(Mode::Corrupt { seed: 99 });
        let a = s.read_blocks(5, 1).unwrap();
        let b = s.read_blocks(5, 1).unwrap();
        assert_eq!(a, b);
        // Oracle: recompute the flip positions from the seed.
        let mut expect = vec![0u8; 512];
        for chunk in 0..8u64 {
            let bit = flip_position(99, 5, chunk) as usize;
            expect[chunk as usize * 64 + bit / 8] ^= 1 << (bit % 8);
        }
        assert_eq!(a, expect);
        // Stored bytes are untouched.
        assert_eq!(s.read_raw(5, 1).unwrap(), vec![0u8; 512]);
    }

    #[test]
    fn brick_is_permanent() {
        let mut s = store();
        s.set_mode(Mode::Brick);
        for _ in 0..3 {
            assert!(matches!(s.read_blocks(0, 1), Err(BackendError::DeviceDead)));
        }
        assert!(matches!(s.write_blocks(0, 1, &[0; 512]), Err(BackendError::DeviceDead)));
        assert!(!s.set_mode(Mode::Normal));
        assert!(s.is_dead());
    }

    #[test]
    fn cipher_write_then_normal_read_yields_ciphertext() {
        let mut s = store();
        let plain = vec![0x42u8; 512];
        s.set_mode(Mode::Cipher {
            key: CipherKey::from_seed(5),
        });
        s.write_blocks(1, 1, &plain).unwrap();
        s.set_mode(Mode::Normal);
        let stored = s.read_blocks(1, 1).unwrap();
        assert_ne!(stored, plain);
        let mut rec = stored.clone();
        decipher_block(&CipherKey::from_seed(5), 1, &mut rec);
        assert_eq!(rec, plain);
    }

    #[test]
    fn cipher_reads_of_existing_plaintext_differ() {
        let mut s = store();
        let plain = vec![0x11u8; 512];
        s.write_blocks(0, 1, &plain).unwrap();
        s.set_mode(Mode::Cipher {
            key: CipherKey::from_seed(8),
        });
        assert_ne!(s.read_blocks(0, 1).unwrap(), plain);
    }

    #[test]
    fn snapshot_restore() {
        let mut s = store();
        s.write_blocks(0, 1, &[1; 512]).unwrap();
        let snap = s.snapshot().unwrap();
        s.write_blocks(0, 1, &[2; 512]).unwrap();
        s.restore(&snap).unwrap();
        assert_eq!(s.read_blocks(0, 1).unwrap(), vec![1; 512]);
        assert_eq!(s.snapshot().unwrap(), snap);

        let mut other = BlockStore::in_memory(512, 32).unwrap();
        assert!(matches!(
            other.restore(&snap),
            Err(BackendError::CapacityMismatch { .. })
        ));
    }

    #[test]
    fn file_backing_matches_memory() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("disk.raw");
        let mut f = BlockStore::file_backed(&path, 512, 16).unwrap();
        f.write_blocks(2, 1, &[9; 512]).unwrap();
        f.flush().unwrap();
        drop(f);
        let raw = std::fs::read(&path).unwrap();
        assert_eq!(raw.len(), 16 * 512);
        assert_eq!(&raw[1024..1536], &[9; 512][..]);
        let m = BlockStore::load_image(&path, 512).unwrap();
        assert_eq!(m.read_blocks(2, 1).unwrap(), vec![9; 512]);
        assert!(matches!(
            BlockStore::file_backed(&path, 512, 8),
            Err(BackendError::CapacityMismatch { .. })
        ));
    }

    /// Normal mode equals a flat-array oracle under 10^5 random operations.
    #[test]
    fn normal_mode_matches_flat_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let blocks = 256u64;
        let mut s = BlockStore::in_memory(512, blocks).unwrap();
        let mut oracle = vec![0u8; (blocks * 512) as usize];
        for _ in 0..100_000 {
            let lba = rng.random_range(0..blocks + 4);
            let count = rng.random_range(1..5u64);
            let in_range = lba + count <= blocks;
            if rng.random_bool(0.5) {
                let fill: u8 = rng.random();
                let data = vec![fill; (count * 512) as usize];
                let r = s.write_blocks(lba, count, &data);
                assert_eq!(r.is_ok(), in_range);
                if in_range {
                    let off = (lba * 512) as usize;
                    oracle[off..off + data.len()].copy_from_slice(&data);
                }
            } else {
                match s.read_blocks(lba, count) {
                    Ok(d) => {
                        assert!(in_range);
                        let off = (lba * 512) as usize;
                        assert_eq!(d, &oracle[off..off + d.len()]);
                    }
                    Err(_) => assert!(!in_range),
                }
            }
        }
    }
}
