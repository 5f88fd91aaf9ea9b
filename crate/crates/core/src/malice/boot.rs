//! Boot-sequence detection from the read stream alone.
//!
//! A pattern is an ordered list of LBA windows. Each read that overlaps the
//! next expected window advances the pattern by one step; other reads are
//! ignored. The pattern fires when the last step is reached and stays fired
//! until reset (the device resets all patterns on a shutdown notification).

use std::ops::Range;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BootPattern {
    pub id: String,
    pub steps: Vec<Range<u64>>,
}

#[derive(Debug, Clone)]
struct Tracker {
    pattern: BootPattern,
    progress: usize,
    fired: bool,
    epochs: u64,
}

#[derive(Debug, Clone, Default)]
pub struct BootDetector {
    trackers: Vec<Tracker>,
}

impl BootPattern {
    /// Offline application of the pattern definition to a read trace: returns
    /// the index of the read at which the pattern would fire.
    pub fn fires_at(&self, reads: &[(u64, u64)]) -> Option<usize> {
        if self.steps.is_empty() {
            return None;
        }
        let mut k = 0;
        for (i, &(lba, count)) in reads.iter().enumerate() {
            let w = &self.steps[k];
            if lba < w.end && w.start < lba + count {
                k += 1;
                if k == self.steps.len() {
                    return Some(i);
                }
            }
        }
        None
    }
}

impl BootDetector {
    pub fn new(patterns: Vec<BootPattern>) -> Self {
        Self {
            trackers: patterns
                .into_iter()
                .filter(|p| !p.steps.is_empty())
                .map(|pattern| Tracker {
                    pattern,
                    progress: 0,
                    fired: false,
                    epochs: 0,
                })
                .collect(),
        }
    }

    /// Feeds one read; returns ids of patterns that fired on it.
    pub fn observe(&mut self, lba: u64, count: u64) -> Vec<String> {
        let mut fired = Vec::new();
        for t in &mut self.trackers {
            if t.fired {
                continue;
            }
            let w = &t.pattern.steps[t.progress];
            if lba < w.end && w.start < lba + count {
                t.progress += 1;
                if t.progress == t.pattern.steps.len() {
                    t.fired = true;
                    t.epochs += 1;
                    fired.push(t.pattern.id.clone());
                }
            }
        }
        fired
    }

    pub fn is_fired(&self, id: &str) -> bool {
        self.trackers.iter().any(|t| t.pattern.id == id && t.fired)
    }

    pub fn progress(&self, id: &str) -> Option<usize> {
        self.trackers.iter().find(|t| t.pattern.id == id).map(|t| t.progress)
    }

    /// Number of times `id` has fired.
    pub fn epochs(&self, id: &str) -> u64 {
        self.trackers
            .iter()
            .find(|t| t.pattern.id == id)
            .map_or(0, |t| t.epochs)
    }

    pub fn reset(&mut self) {
        for t in &mut self.trackers {
            t.progress = 0;
            t.fired = false;
        }
    }
}
