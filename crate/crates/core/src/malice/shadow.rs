//! Read-path substitution ("shadow files").
//!
//! A rule owns a list of absolute LBA ranges in file order and a payload laid
//! out across them. Reads overlapping an active rule get the payload bytes for
//! the overlapped blocks; everything else passes through untouched.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    /// Served to the first read touching any covered LBA, then never again.
    FirstReadOnce,
    /// Served while the named boot pattern is fired.
    BootGated,
    Always,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ShadowError {
    #[error("rule overlaps rule {existing} on lba {lba}")]
    RuleConflict { existing: u32, lba: u64 },
    #[error("payload of {payload} bytes exceeds the {capacity} bytes covered")]
    SizeOverflow { payload: u64, capacity: u64 },
    #[error("rule covers no blocks")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShadowRule {
    pub id: u32,
    pub label: String,
    pub ranges: Vec<Range<u64>>,
    /// Exactly `blocks() * block_size` bytes; short payloads are zero padded.
    pub payload: Vec<u8>,
    pub policy: Policy,
    /// Boot pattern gating a `BootGated` rule.
    pub gate: Option<String>,
    pub consumed: bool,
    pub served: u64,
}

impl ShadowRule {
    pub fn blocks(&self) -> u64 {
        self.ranges.iter().map(|r| r.end - r.start).sum()
    }

    pub fn covers(&self, lba: u64) -> bool {
        self.ranges.iter().any(|r| r.contains(&lba))
    }

    fn overlaps(&self, lba: u64, count: u64) -> bool {
        self.ranges.iter().any(|r| r.start < lba + count && lba < r.end)
    }
}

/// One substitution performed during a read.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Served {
    pub rule: u32,
    pub label: String,
    pub blocks: u64,
    pub consumed: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ShadowSet {
    rules: Vec<ShadowRule>,
    next_id: u32,
}

impl ShadowSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn rules(&self) -> &[ShadowRule] {
        &self.rules
    }

    pub fn rule(&self, id: u32) -> Option<&ShadowRule> {
        self.rules.iter().find(|r| r.id == id)
    }

    pub fn install(
        &mut self,
        label: &str,
        ranges: Vec<Range<u64>>,
        payload: &[u8],
        block_size: u32,
        policy: Policy,
        gate: Option<String>,
    ) -> Result<u32, ShadowError> {
        let ranges: Vec<_> = ranges.into_iter().filter(|r| r.end > r.start).collect();
        let blocks: u64 = ranges.iter().map(|r| r.end - r.start).sum();
        if blocks == 0 {
            return Err(ShadowError::Empty);
        }
        let capacity = blocks * block_size as u64;
        if payload.len() as u64 > capacity {
            return Err(ShadowError::SizeOverflow {
                payload: payload.len() as u64,
                capacity,
            });
        }
        for r in &ranges {
            for other in &ranges {
                if !std::ptr::eq(r, other) && r.start < other.end && other.start < r.end {
                    return Err(ShadowError::RuleConflict {
                        existing: self.next_id,
                        lba: r.start.max(other.start),
                    });
                }
            }
            for rule in &self.rules {
                for o in &rule.ranges {
                    if r.start < o.end && o.start < r.end {
                        return Err(ShadowError::RuleConflict {
                            existing: rule.id,
                            lba: r.start.max(o.start),
                        });
                    }
                }
            }
        }
        let mut padded = payload.to_vec();
        padded.resize(capacity as usize, 0);
        let id = self.next_id;
        self.next_id += 1;
        self.rules.push(ShadowRule {
            id,
            label: label.to_string(),
            ranges,
            payload: padded,
            policy,
            gate,
            consumed: false,
            served: 0,
        });
        Ok(id)
    }

    pub fn remove(&mut self, id: u32) -> bool {
        let before = self.rules.len();
        self.rules.retain(|r| r.id != id);
        self.rules.len() != before
    }

    /// Rewrites `data` (the genuine bytes of `[lba, lba + count)`) in place.
    /// `gate_open(name)` reports whether a boot pattern is currently fired.
    pub fn apply(
        &mut self,
        lba: u64,
        data: &mut [u8],
        block_size: u32,
        gate_open: impl Fn(&str) -> bool,
    ) -> Vec<Served> {
        let bs = block_size as u64;
        let count = data.len() as u64 / bs;
        let mut served = Vec::new();
        for rule in &mut self.rules {
            if !rule.overlaps(lba, count) {
                continue;
            }
            let active = match rule.policy {
                Policy::Always => true,
                Policy::FirstReadOnce => !rule.consumed,
                Policy::BootGated => rule.gate.as_deref().is_some_and(&gate_open),
            };
            if !active {
                continue;
            }
            let mut blocks = 0;
            let mut file_block = 0u64;
            for r in &rule.ranges {
                let s = r.start.max(lba);
                let e = r.end.min(lba + count);
                if s < e {
                    let src = ((file_block + s - r.start) * bs) as usize;
                    let dst = ((s - lba) * bs) as usize;
                    let len = ((e - s) * bs) as usize;
                    data[dst..dst + len].copy_from_slice(&rule.payload[src..src + len]);
                    blocks += e - s;
                }
                file_block += r.end - r.start;
            }
            if rule.policy == Policy::FirstReadOnce {
                rule.consumed = true;
            }
            rule.served += 1;
            served.push(Served {
                rule: rule.id,
                label: rule.label.clone(),
                blocks,
                consumed: rule.consumed,
            });
        }
        served
    }
}
