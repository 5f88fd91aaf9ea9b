//! Ordered event log shared by every simulated actor.
//!
//! Timestamps are logical sequence numbers, so two runs of the same scenario
//! with the same seeds produce byte-identical logs.

use std::fmt;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Who emitted an event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Actor {
    Host,
    Device,
    Malice,
    Backend,
    Scenario,
}

impl fmt::Display for Actor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Actor::Host => "host",
            Actor::Device => "device",
            Actor::Malice => "malice",
            Actor::Backend => "backend",
            Actor::Scenario => "scenario",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    pub actor: Actor,
    pub kind: String,
    pub detail: Value,
}

impl Event {
    /// True if every field of `want` (an object) is present with an equal
    /// value in this event's detail. Non-object `want` compares directly.
    pub fn detail_matches(&self, want: &Value) -> bool {
        subset(want, &self.detail)
    }
}

fn subset(want: &Value, have: &Value) -> bool {
    match (want, have) {
        (Value::Object(w), Value::Object(h)) => w
            .iter()
            .all(|(k, v)| h.get(k).is_some_and(|hv| subset(v, hv))),
        (Value::Number(a), Value::Number(b)) => a.as_f64() == b.as_f64(),
        _ => want == have,
    }
}

#[derive(Debug, Default, Clone)]
pub struct EventLog {
    events: Vec<Event>,
    next_seq: u64,
}

impl EventLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, actor: Actor, kind: impl Into<String>, detail: Value) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        let kind = kind.into();
        log::trace!("#{seq} {actor} {kind} {detail}");
        self.events.push(Event {
            seq,
            actor,
            kind,
            detail,
        });
        seq
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    /// Events with `seq >= from`.
    pub fn since(&self, from: u64) -> &[Event] {
        let start = self.events.partition_point(|e| e.seq < from);
        &self.events[start..]
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn count(&self, kind: &str) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }

    pub fn first(&self, kind: &str) -> Option<&Event> {
        self.events.iter().find(|e| e.kind == kind)
    }

    pub fn last(&self, kind: &str) -> Option<&Event> {
        self.events.iter().rev().find(|e| e.kind == kind)
    }

    pub fn of_kind<'a>(&'a self, kind: &'a str) -> impl Iterator<Item = &'a Event> + 'a {
        self.events.iter().filter(move |e| e.kind == kind)
    }

    /// Writes the log as JSON lines, one event per line.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> io::Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }
}

/// Simulated time in nanoseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn from_millis(ms: u64) -> Self {
        SimTime(ms * 1_000_000)
    }

    pub fn from_micros(us: u64) -> Self {
        SimTime(us * 1_000)
    }

    pub fn as_millis(self) -> u64 {
        self.0 / 1_000_000
    }

    pub fn saturating_add(self, other: SimTime) -> SimTime {
        SimTime(self.0.saturating_add(other.0))
    }

    pub fn saturating_sub(self, other: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(other.0))
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:06}ms", self.0 / 1_000_000, self.0 % 1_000_000)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn sequence_numbers_are_dense() {
        let mut log = EventLog::new();
        assert_eq!(log.push(Actor::Host, "a", json!({})), 0);
        assert_eq!(log.push(Actor::Device, "b", json!(null)), 1);
        assert_eq!(log.since(1).len(), 1);
        assert_eq!(log.since(5).len(), 0);
    }

    #[test]
    fn jsonl_has_four_fields() {
        let mut log = EventLog::new();
        log.push(Actor::Malice, "exfil", json!({"id": 3}));
        let line = log.to_jsonl();
        let v: Value = serde_json::from_str(line.trim()).unwrap();
        assert_eq!(v, json!({"seq": 0, "actor": "malice", "kind": "exfil", "detail": {"id": 3}}));
    }

    #[test]
    fn detail_subset_matching() {
        let mut log = EventLog::new();
        log.push(Actor::Host, "x", json!({"a": 1, "b": {"c": true, "d": 2}}));
        let e = &log.events()[0];
        assert!(e.detail_matches(&json!({"a": 1})));
        assert!(e.detail_matches(&json!({"b": {"c": true}})));
        assert!(e.detail_matches(&json!({"a": 1.0})));
        assert!(!e.detail_matches(&json!({"a": 2})));
        assert!(!e.detail_matches(&json!({"z": 0})));
    }
}
