//! Scenario file format. See docs/schema.md for the field reference.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Deserialize;
use serde_json::Value;
use thiserror::Error;

use crate::image::ImageSpec;
use crate::malice::{DosKind, PatternSpec, Policy};
use crate::nvme::Spoof;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{0}")]
    Parse(String),
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub description: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub device: DeviceSection,
    #[serde(default)]
    pub host: HostSection,
    #[serde(default)]
    pub image: ImageSpec,
    #[serde(default)]
    pub blobs: BTreeMap<String, Blob>,
    #[serde(default)]
    pub keys: Vec<KeyDef>,
    #[serde(default)]
    pub boot_patterns: Vec<PatternSpec>,
    #[serde(default)]
    pub playbooks: Vec<PlaybookDef>,
    #[serde(default)]
    pub actions: Vec<Action>,
    #[serde(default)]
    pub assertions: Vec<Assertion>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeviceClass {
    #[default]
    Nvme,
    DmaController,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeviceSection {
    pub class: DeviceClass,
    pub spoof: Spoof,
    pub model: String,
    pub serial: String,
    pub ready_latency_ms: u64,
    pub shutdown_budget_ms: u64,
    pub private_quota: u64,
}

impl Default for DeviceSection {
    fn default() -> Self {
        Self {
            class: DeviceClass::Nvme,
            spoof: Spoof::None,
            model: "eNVMe Research Drive".into(),
            serial: "ENVME0001".into(),
            ready_latency_ms: 0,
            shutdown_budget_ms: 2000,
            private_quota: 16 << 20,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HostSection {
    pub memory_mib: u64,
    /// Seed choosing the kernel's page; defaults to the scenario seed.
    pub kernel_seed: Option<u64>,
    /// Attach a second device (a NIC, dev1) with an MMIO window in RAM.
    pub peer_device: bool,
    /// IOMMU groups by device number, applied when the kernel enables it.
    pub iommu_groups: Vec<Vec<u32>>,
    pub ready_timeout_ms: u64,
    pub io_timeout_ms: u64,
    pub shutdown_timeout_ms: u64,
    pub bootloader_config: String,
    pub init: String,
}

impl Default for HostSection {
    fn default() -> Self {
        Self {
            memory_mib: 64,
            kernel_seed: None,
            peer_device: false,
            iommu_groups: Vec::new(),
            ready_timeout_ms: 500,
            io_timeout_ms: 1000,
            shutdown_timeout_ms: 5000,
            bootloader_config: "/boot/grub/grub.cfg".into(),
            init: "/sbin/init".into(),
        }
    }
}

/// A byte string. Exactly one source field is set; `pad_to` and `repeat`
/// post-process it.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Blob {
    pub text: Option<String>,
    pub hex: Option<String>,
    /// That many ChaCha20 bytes from `seed` (or a seed derived from the
    /// scenario seed and the blob name).
    pub random: Option<usize>,
    pub seed: Option<u64>,
    pub file: Option<PathBuf>,
    pub concat: Option<Vec<BlobRef>>,
    pub repeat: Option<usize>,
    pub pad_to: Option<usize>,
}

/// Either the name of a blob or key, or an inline blob.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum BlobRef {
    Name(String),
    Inline(Box<Blob>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeyDef {
    pub id: String,
    pub text: Option<String>,
    pub hex: Option<String>,
    pub random: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriggerDef {
    pub key: Option<String>,
    pub sequence: Option<Vec<String>>,
    pub time_ms: Option<u64>,
    pub event: Option<String>,
    #[serde(default = "one")]
    pub after: u32,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlaybookDef {
    pub id: String,
    pub trigger: TriggerDef,
    pub requires: Option<String>,
    #[serde(default)]
    pub steps: Vec<StepDef>,
}

fn grub_path() -> String {
    "/boot/grub/grub.cfg".into()
}

fn boot_gate() -> String {
    "boot".into()
}

fn default_stride() -> usize {
    1 << 20
}

fn default_inject_offset() -> u64 {
    2048
}

fn default_hook_ms() -> u64 {
    50
}

fn default_probe_len() -> usize {
    4096
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum StepDef {
    InstallShadow {
        path: Option<String>,
        lbas: Option<Vec<[u64; 2]>>,
        payload: BlobRef,
        policy: Policy,
        gate: Option<String>,
    },
    PatchGrub {
        #[serde(default = "grub_path")]
        path: String,
        #[serde(default = "boot_gate")]
        gate: String,
        #[serde(default)]
        in_place: bool,
    },
    Dos {
        mode: DosKind,
        #[serde(default)]
        seed: u64,
    },
    Mine {
        #[serde(default)]
        globs: Vec<String>,
        #[serde(default)]
        content: Vec<String>,
    },
    ScanInject {
        /// Defaults to the simulated kernel's signature.
        signature: Option<BlobRef>,
        #[serde(default = "default_stride")]
        stride: usize,
        /// Module image; defaults to a minimal module. Ignored if `scan_only`.
        payload: Option<BlobRef>,
        #[serde(default)]
        scan_only: bool,
        #[serde(default = "default_inject_offset")]
        offset: u64,
    },
    PeerProbe {
        /// Defaults to the start of the peer device's MMIO window.
        address: Option<u64>,
        #[serde(default = "default_probe_len")]
        len: usize,
    },
    ReplaceOnShutdown {
        path: String,
        payload: BlobRef,
        #[serde(default = "default_hook_ms")]
        elapsed_ms: u64,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Action {
    Boot,
    Shutdown,
    Reboot,
    /// Host driver bring-up without booting (a workstation attaching the disk).
    Attach,
    WriteBlob {
        lba: u64,
        data: BlobRef,
        /// Block offsets inside the blob where a new write command starts.
        #[serde(default)]
        split_blocks: Vec<u64>,
    },
    ReadFile {
        path: String,
    },
    /// Reads a file's extents straight from the image manifest, without
    /// touching partition table or filesystem metadata.
    ReadExtents {
        path: String,
    },
    ReadLba {
        lba: u64,
        count: u64,
    },
    Trace {
        file: Option<PathBuf>,
        text: Option<String>,
    },
    /// Replays the builder's boot read sequence for `init`.
    BootTrace {
        #[serde(default = "default_init")]
        init: String,
    },
    Wait {
        ms: u64,
    },
    DropCaches,
    /// Queues a host-side write into the kernel page (offset from the kernel
    /// image start), applied the next time the host runs.
    ScriptMutation {
        offset: u64,
        data: BlobRef,
    },
}

fn default_init() -> String {
    "/sbin/init".into()
}

/// An event selector: a kind, optionally narrowed by actor and a detail
/// subset.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum EventMatch {
    Kind(String),
    Full {
        event: String,
        actor: Option<String>,
        detail: Option<toml::Value>,
    },
}

impl EventMatch {
    pub fn kind(&self) -> &str {
        match self {
            EventMatch::Kind(k) => k,
            EventMatch::Full { event, .. } => event,
        }
    }

    pub fn actor(&self) -> Option<&str> {
        match self {
            EventMatch::Kind(_) => None,
            EventMatch::Full { actor, .. } => actor.as_deref(),
        }
    }

    pub fn detail(&self) -> Option<Value> {
        match self {
            EventMatch::Full { detail: Some(d), .. } => serde_json::to_value(d).ok(),
            _ => None,
        }
    }
}

/// A digest to compare: a field of the nth matching event, or a literal
/// (`genuine:<path>` for a planted file, `blob:<name>`, or 64 hex digits).
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum DigestRef {
    Literal(String),
    Event {
        event: EventMatch,
        /// Negative counts from the end.
        #[serde(default)]
        nth: i64,
        #[serde(default = "sha_field")]
        field: String,
    },
}

fn sha_field() -> String {
    "sha256".into()
}

#[derive(Debug, Clone)]
pub struct Assertion {
    pub name: String,
    pub check: Check,
}

// serde's flatten cannot be combined with deny_unknown_fields, so the name is
// split off by hand and the rest parsed strictly as a `Check`.
impl<'de> Deserialize<'de> for Assertion {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let mut t = toml::Table::deserialize(d)?;
        let name = match t.remove("name") {
            Some(toml::Value::String(s)) => s,
            Some(_) => return Err(D::Error::custom("assertion name must be a string")),
            None => return Err(D::Error::missing_field("name")),
        };
        let check = Check::deserialize(toml::Value::Table(t))
            .map_err(|e| D::Error::custom(format!("assertion {name}: {}", e.message())))?;
        Ok(Assertion { name, check })
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Check {
    /// At least `min` (default 1) matching events, or exactly `count`.
    Event {
        event: EventMatch,
        count: Option<usize>,
        min: Option<usize>,
    },
    NoEvent {
        event: EventMatch,
    },
    /// First occurrences appear in this order.
    Order {
        events: Vec<EventMatch>,
    },
    /// Every matching event lies after an `after` event with a `before`
    /// event following it and none in between.
    Between {
        event: EventMatch,
        after: EventMatch,
        before: EventMatch,
    },
    DigestEqual {
        a: DigestRef,
        b: DigestRef,
    },
    DigestDiffers {
        a: DigestRef,
        b: DigestRef,
    },
}

impl Check {
    pub fn name(&self) -> &'static str {
        match self {
            Check::Event { .. } => "event",
            Check::NoEvent { .. } => "no-event",
            Check::Order { .. } => "order",
            Check::Between { .. } => "between",
            Check::DigestEqual { .. } => "digest-equal",
            Check::DigestDiffers { .. } => "digest-differs",
        }
    }
}

fn fnv(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

pub fn random_bytes(seed: u64, len: usize) -> Vec<u8> {
    let mut v = vec![0u8; len];
    ChaCha20Rng::seed_from_u64(seed).fill_bytes(&mut v);
    v
}

/// Resolves blob references against the scenario's blobs and keys.
pub struct Blobs<'a> {
    pub cfg: &'a ScenarioConfig,
    pub base: &'a Path,
    pub seed: u64,
}

impl Blobs<'_> {
    pub fn key(&self, k: &KeyDef) -> Result<Vec<u8>, ConfigError> {
        let b = Blob {
            text: k.text.clone(),
            hex: k.hex.clone(),
            random: k.random,
            seed: k.seed,
            ..Default::default()
        };
        self.blob(&b, &format!("key:{}", k.id), 0)
    }

    pub fn resolve(&self, r: &BlobRef) -> Result<Vec<u8>, ConfigError> {
        self.resolve_at(r, 0)
    }

    fn resolve_at(&self, r: &BlobRef, depth: u32) -> Result<Vec<u8>, ConfigError> {
        if depth > 16 {
            return Err(invalid("blob references nest too deeply"));
        }
        match r {
            BlobRef::Inline(b) => self.blob(b, "inline", depth),
            BlobRef::Name(n) => {
                if let Some(b) = self.cfg.blobs.get(n) {
                    return self.blob(b, n, depth);
                }
                if let Some(k) = self.cfg.keys.iter().find(|k| &k.id == n) {
                    return self.key(k);
                }
                Err(invalid(format!("unknown blob or key {n}")))
            }
        }
    }

    fn blob(&self, b: &Blob, name: &str, depth: u32) -> Result<Vec<u8>, ConfigError> {
        let sources = [
            b.text.is_some(),
            b.hex.is_some(),
            b.random.is_some(),
            b.file.is_some(),
            b.concat.is_some(),
        ];
        if sources.iter().filter(|&&s| s).count() != 1 {
            return Err(invalid(format!(
                "blob {name}: exactly one of text, hex, random, file, concat is required"
            )));
        }
        let mut out = if let Some(t) = &b.text {
            t.as_bytes().to_vec()
        } else if let Some(h) = &b.hex {
            let clean: String = h.chars().filter(|c| !c.is_whitespace()).collect();
            hex::decode(&clean).map_err(|e| invalid(format!("blob {name}: bad hex: {e}")))?
        } else if let Some(n) = b.random {
            random_bytes(b.seed.unwrap_or(self.seed ^ fnv(name)), n)
        } else if let Some(f) = &b.file {
            let p = self.base.join(f);
            std::fs::read(&p).map_err(|source| ConfigError::Io {
                path: p.display().to_string(),
                source,
            })?
        } else {
            let mut v = Vec::new();
            for part in b.concat.as_deref().unwrap_or_default() {
                v.extend(self.resolve_at(part, depth + 1)?);
            }
            v
        };
        if let Some(r) = b.repeat {
            out = out.repeat(r);
        }
        if let Some(p) = b.pad_to {
            if out.len() > p {
                return Err(invalid(format!("blob {name}: {} bytes exceed pad_to {p}", out.len())));
            }
            out.resize(p, 0);
        }
        Ok(out)
    }
}

impl ScenarioConfig {
    /// Parses and validates; toml errors carry line and column.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text).map_err(|e| match e {
            ConfigError::Parse(m) => ConfigError::Parse(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let mut names = std::collections::BTreeSet::new();
        for a in &self.assertions {
            if !names.insert(a.name.as_str()) {
                return Err(invalid(format!("assertion name {} is not unique", a.name)));
            }
        }
        let mut ids = std::collections::BTreeSet::new();
        for p in &self.playbooks {
            if !ids.insert(p.id.as_str()) {
                return Err(invalid(format!("playbook id {} is not unique", p.id)));
            }
            let t = &p.trigger;
            let set = [t.key.is_some(), t.sequence.is_some(), t.time_ms.is_some(), t.event.is_some()];
            if set.iter().filter(|&&s| s).count() != 1 {
                return Err(invalid(format!(
                    "playbook {}: trigger needs exactly one of key, sequence, time_ms, event",
                    p.id
                )));
            }
            for s in &p.steps {
                if let StepDef::InstallShadow { path, lbas, policy, gate, .. } = s {
                    if path.is_some() == lbas.is_some() {
                        return Err(invalid(format!(
                            "playbook {}: install-shadow needs exactly one of path, lbas",
                            p.id
                        )));
                    }
                    if *policy == Policy::BootGated
                        && !gate
                            .as_ref()
                            .is_some_and(|g| self.boot_patterns.iter().any(|b| &b.id == g))
                    {
                        return Err(invalid(format!(
                            "playbook {}: boot-gated shadow needs a gate naming a boot pattern",
                            p.id
                        )));
                    }
                }
                if let StepDef::PatchGrub { gate, in_place: false, .. } = s {
                    if !self.boot_patterns.iter().any(|b| &b.id == gate) {
                        return Err(invalid(format!("playbook {}: unknown boot pattern {gate}", p.id)));
                    }
                }
            }
        }
        for a in &self.actions {
            if let Action::Trace { file, text } = a {
                if file.is_some() == text.is_some() {
                    return Err(invalid("trace action needs exactly one of file, text"));
                }
            }
        }
        Ok(())
    }

    /// Checks fixture files referenced relative to `base` exist.
    pub fn check_files(&self, base: &Path) -> Result<(), ConfigError> {
        let mut files: Vec<PathBuf> = self.blobs.values().filter_map(|b| b.file.clone()).collect();
        files.extend(self.image.files.iter().filter_map(|f| f.source.clone().map(PathBuf::from)));
        files.extend(self.actions.iter().filter_map(|a| match a {
            Action::Trace { file: Some(f), .. } => Some(f.clone()),
            _ => None,
        }));
        for f in files {
            let p = base.join(&f);
            if !p.is_file() {
                return Err(invalid(format!("fixture file {} does not exist", p.display())));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_errors_carry_line() {
        let err = ScenarioConfig::parse("name = \"x\"\ndescription = \"d\"\n[device]\nspoof = 3\n").unwrap_err();
        assert!(err.to_string().contains("line 4"), "{err}");
    }

    #[test]
    fn duplicate_assertion_names_rejected() {
        let t = r#"
name = "x"
description = "d"
[[assertions]]
name = "a"
kind = "no-event"
event = "boom"
[[assertions]]
name = "a"
kind = "no-event"
event = "bang"
"#;
        assert!(matches!(ScenarioConfig::parse(t), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn blobs_resolve_and_concat() {
        let t = r#"
name = "x"
description = "d"
[blobs.a]
text = "ab"
[blobs.b]
concat = ["a", { hex = "00ff" }, "k"]
pad_to = 24
[[keys]]
id = "k"
text = "0123456789abcdef"
"#;
        let cfg = ScenarioConfig::parse(t).unwrap();
        let b = Blobs { cfg: &cfg, base: Path::new("."), seed: 0 };
        let v = b.resolve(&BlobRef::Name("b".into())).unwrap();
        assert_eq!(&v[..4], b"ab\x00\xff");
        assert_eq!(&v[4..20], b"0123456789abcdef");
        assert_eq!(v.len(), 24);
    }
}
