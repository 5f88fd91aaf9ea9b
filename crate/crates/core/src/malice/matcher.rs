//! Streaming multi-pattern matcher.
//!
//! A dense Aho-Corasick DFA (256 columns per state). Bit 31 of a transition
//! marks that the target state has at least one output, so the hot loop only
//! leaves the table when something matched.
//!
//! Streaming keeps the last `max_len - 1` bytes of input as carry. Each chunk
//! is scanned as `carry || chunk` from the root state and only matches ending
//! inside the chunk are reported, so a match straddling any number of chunk
//! boundaries is reported exactly once.

use std::collections::VecDeque;

const MATCH_BIT: u32 = 1 << 31;
const STATE_MASK: u32 = !MATCH_BIT;

#[derive(Debug, Clone)]
pub struct Automaton {
    table: Vec<u32>,
    /// Pattern ids ending at each state, via dictionary suffix links.
    outputs: Vec<Vec<u16>>,
    lens: Vec<usize>,
    max_len: usize,
    /// Bytes leaving the root, when there are few enough for memchr.
    starts: Starts,
}

#[derive(Debug, Clone, Copy)]
enum Starts {
    One(u8),
    Two(u8, u8),
    Three(u8, u8, u8),
    Many,
}

impl Starts {
    /// Offset of the next byte in `data` that can leave the root.
    #[inline]
    fn find(self, data: &[u8]) -> Option<usize> {
        match self {
            Starts::One(a) => memchr::memchr(a, data),
            Starts::Two(a, b) => memchr::memchr2(a, b, data),
            Starts::Three(a, b, c) => memchr::memchr3(a, b, c, data),
            Starts::Many => (!data.is_empty()).then_some(0),
        }
    }
}

/// A match of pattern `pattern` occupying `[end - len, end)` of the stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Match {
    pub end: u64,
    pub pattern: usize,
}

impl Automaton {
    /// Builds the DFA. Empty patterns are rejected; duplicates are allowed and
    /// each reports separately.
    pub fn new<P: AsRef<[u8]>>(patterns: &[P]) -> Self {
        assert!(patterns.len() < u16::MAX as usize);
        let mut goto: Vec<[u32; 256]> = vec![[u32::MAX; 256]];
        let mut out: Vec<Vec<u16>> = vec![Vec::new()];
        let mut lens = Vec::with_capacity(patterns.len());
        for (id, p) in patterns.iter().enumerate() {
            let p = p.as_ref();
            assert!(!p.is_empty(), "empty pattern");
            lens.push(p.len());
            let mut s = 0usize;
            for &b in p {
                let next = goto[s][b as usize];
                s = if next == u32::MAX {
                    goto.push([u32::MAX; 256]);
                    out.push(Vec::new());
                    let n = goto.len() - 1;
                    goto[s][b as usize] = n as u32;
                    n
                } else {
                    next as usize
                };
            }
            out[s].push(id as u16);
        }
        assert!(goto.len() < MATCH_BIT as usize);
        // Breadth-first failure computation, filling the DFA as we go.
        let mut fail = vec![0u32; goto.len()];
        let mut queue = VecDeque::new();
        for b in 0..256 {
            match goto[0][b] {
                u32::MAX => goto[0][b] = 0,
                n => {
                    fail[n as usize] = 0;
                    queue.push_back(n as usize);
                }
            }
        }
        while let Some(s) = queue.pop_front() {
            let f = fail[s] as usize;
            let inherited = out[f].clone();
            out[s].extend(inherited);
            for b in 0..256 {
                let n = goto[s][b];
                if n == u32::MAX {
                    goto[s][b] = goto[f][b];
                } else {
                    fail[n as usize] = goto[f][b];
                    queue.push_back(n as usize);
                }
            }
        }
        let mut table = Vec::with_capacity(goto.len() * 256);
        for row in &goto {
            for &n in row.iter() {
                let flag = if out[n as usize].is_empty() { 0 } else { MATCH_BIT };
                table.push(n | flag);
            }
        }
        let max_len = lens.iter().copied().max().unwrap_or(0);
        let firsts: Vec<u8> = (0..=255u8).filter(|&b| table[b as usize] & STATE_MASK != 0).collect();
        let starts = match firsts[..] {
            [a] => Starts::One(a),
            [a, b] => Starts::Two(a, b),
            [a, b, c] => Starts::Three(a, b, c),
            _ => Starts::Many,
        };
        Self {
            table,
            outputs: out,
            lens,
            max_len,
            starts,
        }
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn pattern_len(&self, id: usize) -> usize {
        self.lens[id]
    }

    pub fn pattern_count(&self) -> usize {
        self.lens.len()
    }

    pub fn states(&self) -> usize {
        self.outputs.len()
    }

    /// Runs from `state` over `data`. `report(pos, pattern)` gets the index
    /// one past the last byte of each match. Returns the final state.
    #[inline]
    pub fn run(&self, mut state: u32, data: &[u8], mut report: impl FnMut(usize, usize)) -> u32 {
        let t = &self.table;
        let mut i = 0;
        while i < data.len() {
            // At the root every byte but a pattern's first loops back, so
            // skip straight to the next candidate.
            if state == 0 {
                match self.starts.find(&data[i..]) {
                    Some(off) => i += off,
                    None => break,
                }
            }
            let e = t[((state & STATE_MASK) as usize) << 8 | data[i] as usize];
            state = e & STATE_MASK;
            i += 1;
            if e & MATCH_BIT != 0 {
                for &p in &self.outputs[state as usize] {
                    report(i, p as usize);
                }
            }
        }
        state
    }

    /// Counts matches without recording them.
    pub fn count(&self, data: &[u8]) -> u64 {
        let mut n = 0;
        self.run(0, data, |_, _| n += 1);
        n
    }

    /// Every match in `data`, ordered by end position then pattern id.
    pub fn find_all(&self, data: &[u8]) -> Vec<Match> {
        let mut v = Vec::new();
        self.run(0, data, |end, p| {
            v.push(Match {
                end: end as u64,
                pattern: p,
            })
        });
        v.sort();
        v
    }
}

/// Scanner state persisted between chunks of one stream.
#[derive(Debug, Clone)]
pub struct StreamMatcher {
    ac: Automaton,
    carry: Vec<u8>,
    /// Stream offset of the first byte after the carry.
    offset: u64,
    buf: Vec<u8>,
}

impl StreamMatcher {
    pub fn new(ac: Automaton) -> Self {
        Self {
            ac,
            carry: Vec::new(),
            offset: 0,
            buf: Vec::new(),
        }
    }

    pub fn automaton(&self) -> &Automaton {
        &self.ac
    }

    pub fn carry(&self) -> &[u8] {
        &self.carry
    }

    /// Bytes consumed so far.
    pub fn position(&self) -> u64 {
        self.offset
    }

    /// Scans the next chunk; matches carry absolute stream end offsets and are
    /// ordered by end then pattern id.
    pub fn scan(&mut self, chunk: &[u8]) -> Vec<Match> {
        let keep = self.ac.max_len().saturating_sub(1);
        if keep == 0 && self.ac.pattern_count() == 0 {
            self.offset += chunk.len() as u64;
            return Vec::new();
        }
        self.buf.clear();
        self.buf.extend_from_slice(&self.carry);
        self.buf.extend_from_slice(chunk);
        let skip = self.carry.len();
        let base = self.offset - skip as u64;
        let mut found = Vec::new();
        self.ac.run(0, &self.buf, |end, p| {
            if end > skip {
                found.push(Match {
                    end: base + end as u64,
                    pattern: p,
                });
            }
        });
        found.sort();
        let tail = self.buf.len().saturating_sub(keep);
        self.carry.clear();
        self.carry.extend_from_slice(&self.buf[tail..]);
        self.offset += chunk.len() as u64;
        found
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive(stream: &[u8], pats: &[Vec<u8>]) -> Vec<Match> {
        let mut v = Vec::new();
        for (id, p) in pats.iter().enumerate() {
            if p.len() > stream.len() {
                continue;
            }
            for s in 0..=stream.len() - p.len() {
                if &stream[s..s + p.len()] == p.as_slice() {
                    v.push(Match {
                        end: (s + p.len()) as u64,
                        pattern: id,
                    });
                }
            }
        }
        v.sort();
        v
    }

    #[test]
    fn classic_overlaps() {
        let pats: Vec<Vec<u8>> = ["he", "she", "his", "hers"].iter().map(|s| s.as_bytes().to_vec()).collect();
        let ac = Automaton::new(&pats);
        assert_eq!(ac.find_all(b"ushers"), naive(b"ushers", &pats));
        assert_eq!(ac.find_all(b"ushers").len(), 3);
    }

    #[test]
    fn key_split_at_every_offset() {
        let key: Vec<u8> = (0..40u8).map(|i| i.wrapping_mul(37) ^ 0x5A).collect();
        let mut stream = vec![0xEEu8; 100];
        stream.splice(30..30, key.iter().copied());
        for cut in 0..=stream.len() {
            let mut m = StreamMatcher::new(Automaton::new(&[key.clone()]));
            let mut got = m.scan(&stream[..cut]);
            got.extend(m.scan(&stream[cut..]));
            assert_eq!(got, vec![Match { end: 70, pattern: 0 }], "cut {cut}");
            assert!(m.carry().len() < key.len());
        }
    }

    proptest! {
        #[test]
        fn chunking_invariance(
            pats in proptest::collection::vec(proptest::collection::vec(0u8..3, 1..6), 1..5),
            stream in proptest::collection::vec(0u8..3, 0..300),
            cuts in proptest::collection::vec(0usize..300, 0..8),
        ) {
            let ac = Automaton::new(&pats);
            let mut m = StreamMatcher::new(ac.clone());
            let mut cuts: Vec<usize> = cuts.into_iter().map(|c| c.min(stream.len())).collect();
            cuts.sort();
            let mut got = Vec::new();
            let mut prev = 0;
            for c in cuts.into_iter().chain([stream.len()]) {
                got.extend(m.scan(&stream[prev..c]));
                prev = c;
            }
            prop_assert_eq!(&got, &naive(&stream, &pats));
            prop_assert_eq!(ac.find_all(&stream), naive(&stream, &pats));
        }
    }
}
