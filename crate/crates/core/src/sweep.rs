//! Batch helpers for sweeps that run many independent simulations or scan
//! long synthetic streams. Work fans out over rayon with the `parallel`
//! feature; otherwise everything runs in order on the calling thread. The
//! simulator itself is single-threaded either way.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::malice::{Automaton, StreamMatcher};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    Sequential,
    /// Falls back to sequential without the `parallel` feature.
    #[default]
    Parallel,
}

impl Exec {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }
}

/// Maps `f` over `items`, preserving order.
pub fn par_map<T, R, F>(exec: Exec, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec == Exec::Parallel {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    let _ = exec;
    items.iter().map(f).collect()
}

/// Maps `f` over `0..n`, preserving order.
pub fn par_range<R, F>(exec: Exec, n: u64, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(u64) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec == Exec::Parallel {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// A deterministic pseudo-random byte stream with keys planted at chosen
/// offsets. Any window can be produced without generating what precedes it.
#[derive(Debug, Clone)]
pub struct SyntheticStream {
    pub seed: u64,
    pub len: u64,
    pub key: Vec<u8>,
    /// Start offsets of planted key copies.
    pub plants: Vec<u64>,
}

impl SyntheticStream {
    /// Bytes `[start, start + out.len())` of the stream.
    pub fn fill(&self, start: u64, out: &mut [u8]) {
        let aligned = start & !3;
        let lead = (start - aligned) as usize;
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed);
        rng.set_word_pos(aligned as u128 / 4);
        if lead == 0 {
            rng.fill_bytes(out);
        } else {
            let mut tmp = vec![0u8; out.len() + lead];
            rng.fill_bytes(&mut tmp);
            out.copy_from_slice(&tmp[lead..]);
        }
        let end = start + out.len() as u64;
        let k = self.key.len() as u64;
        for &p in &self.plants {
            let (s, e) = (p.max(start), (p + k).min(end));
            if s < e {
                out[(s - start) as usize..(e - start) as usize]
                    .copy_from_slice(&self.key[(s - p) as usize..(e - p) as usize]);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CollisionReport {
    pub bytes: u64,
    pub segments: u64,
    /// Stream end offsets of every match, ascending.
    pub matches: Vec<u64>,
}

/// Scans `stream` for its key in segments of `segment` bytes, each fed to a
/// fresh [`StreamMatcher`] in `chunk`-sized pieces after priming it with the
/// tail of the previous segment, so matches across segment boundaries are
/// found exactly once.
pub fn collision_sweep(stream: &SyntheticStream, segment: u64, chunk: usize, exec: Exec) -> CollisionReport {
    assert!(segment > 0 && chunk > 0);
    let ac = Automaton::new(&[&stream.key]);
    let carry = ac.max_len().saturating_sub(1) as u64;
    let segments = stream.len.div_ceil(segment);
    let per = par_range(exec, segments, |i| {
        let start = i * segment;
        let end = (start + segment).min(stream.len);
        let pre = carry.min(start);
        let mut buf = vec![0u8; (end - start + pre) as usize];
        stream.fill(start - pre, &mut buf);
        let mut m = StreamMatcher::new(ac.clone());
        let base = start - pre;
        let mut found: Vec<u64> = m.scan(&buf[..pre as usize]).iter().map(|x| base + x.end).collect();
        for c in buf[pre as usize..].chunks(chunk) {
            found.extend(m.scan(c).iter().map(|x| base + x.end));
        }
        found
    });
    let mut matches: Vec<u64> = per.into_iter().flatten().collect();
    matches.sort_unstable();
    CollisionReport {
        bytes: stream.len,
        segments,
        matches,
    }
}
