//! Submission and completion queue bookkeeping on the controller side.

use super::wire::{CQE_SIZE, SQE_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueueKind {
    Admin,
    Io,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubmissionQueue {
    pub qid: u16,
    pub cqid: u16,
    pub kind: QueueKind,
    pub base: u64,
    pub size: u16,
    pub head: u16,
    /// Last tail value written to the doorbell.
    pub tail: u16,
    /// Set when fetching the entry at `head` faulted; cleared by the next
    /// doorbell write.
    pub stalled: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DoorbellOutOfRange {
    pub value: u16,
    pub size: u16,
}

impl SubmissionQueue {
    pub fn new(qid: u16, cqid: u16, kind: QueueKind, base: u64, size: u16) -> Self {
        assert!(size >= 2);
        Self {
            qid,
            cqid,
            kind,
            base,
            size,
            head: 0,
            tail: 0,
            stalled: false,
        }
    }

    pub fn ring(&mut self, new_tail: u16) -> Result<(), DoorbellOutOfRange> {
        if new_tail >= self.size {
            return Err(DoorbellOutOfRange {
                value: new_tail,
                size: self.size,
            });
        }
        self.tail = new_tail;
        self.stalled = false;
        Ok(())
    }

    pub fn pending(&self) -> u16 {
        (self.tail + self.size - self.head) % self.size
    }

    pub fn is_empty(&self) -> bool {
        self.head == self.tail
    }

    pub fn head_addr(&self) -> u64 {
        self.base + SQE_SIZE as u64 * self.head as u64
    }

    pub fn advance(&mut self) {
        debug_assert!(!self.is_empty());
        self.head = (self.head + 1) % self.size;
    }

    pub fn bytes(&self) -> u64 {
        SQE_SIZE as u64 * self.size as u64
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompletionQueue {
    pub qid: u16,
    pub base: u64,
    pub size: u16,
    pub tail: u16,
    /// Consumer position reported by the host through the head doorbell.
    pub head: u16,
    pub phase: bool,
    pub interrupts: bool,
    /// Completions posted since creation.
    pub posted: u64,
}

impl CompletionQueue {
    pub fn new(qid: u16, base: u64, size: u16, interrupts: bool) -> Self {
        assert!(size >= 2);
        Self {
            qid,
            base,
            size,
            tail: 0,
            head: 0,
            phase: true,
            interrupts,
            posted: 0,
        }
    }

    /// Full when advancing the tail would make it meet the head.
    pub fn is_full(&self) -> bool {
        (self.tail + 1) % self.size == self.head
    }

    pub fn tail_addr(&self) -> u64 {
        self.base + CQE_SIZE as u64 * self.tail as u64
    }

    pub fn advance(&mut self) {
        self.tail = (self.tail + 1) % self.size;
        if self.tail == 0 {
            self.phase = !self.phase;
        }
        self.posted += 1;
    }

    pub fn set_head(&mut self, head: u16) -> Result<(), DoorbellOutOfRange> {
        if head >= self.size {
            return Err(DoorbellOutOfRange {
                value: head,
                size: self.size,
            });
        }
        self.head = head;
        Ok(())
    }

    pub fn bytes(&self) -> u64 {
        CQE_SIZE as u64 * self.size as u64
    }
}
