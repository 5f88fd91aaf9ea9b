//! Wires a scenario together, performs its actions and checks assertions.

use std::path::Path;
use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::config::{Action, Blobs, Check, ConfigError, DeviceClass, DigestRef, EventMatch, ScenarioConfig, StepDef};
use crate::backend::BlockStore;
use crate::event::{Actor, Event, EventLog, SimTime};
use crate::host::driver::{DriverConfig, DriverState, InitOutcome};
use crate::host::trace;
use crate::host::{DeviceId, RegionKind, KERNEL_SIGNATURE, MIB, MODULE_MAGIC};
use crate::image::{self, Manifest};
use crate::malice::{ActivationKey, Malice, MaliceConfig, MineRule, Playbook, ShadowTarget, Step, Trigger};
use crate::nvme::regs::{CLASS_DMA_CONTROLLER, CLASS_NVME};
use crate::nvme::ControllerConfig;
use crate::platform::{Platform, PlatformConfig};

#[derive(Debug, Clone, Serialize)]
pub struct AssertionOutcome {
    pub name: String,
    pub kind: String,
    pub passed: bool,
    pub message: String,
    /// The first event that violates the assertion, when there is one.
    pub violating_event: Option<Event>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub passed: bool,
    pub assertions: Vec<AssertionOutcome>,
    pub events: usize,
    pub log_path: Option<String>,
    pub wall_clock_ms: u128,
}

#[derive(Debug)]
pub struct RunOutput {
    pub report: RunReport,
    pub log: EventLog,
    pub manifest: Manifest,
    pub platform: Platform,
}

fn sha256_hex(d: &[u8]) -> String {
    hex::encode(Sha256::digest(d))
}

/// A minimal loadable module image for DMA injection.
pub fn default_module() -> Vec<u8> {
    let mut m = MODULE_MAGIC.to_vec();
    m.extend_from_slice(b"envme-implant\0");
    m.resize(256, 0xCC);
    m
}

struct Ctx<'a> {
    blobs: Blobs<'a>,
}

fn to_step(ctx: &Ctx, s: &StepDef, peer_mmio: Option<u64>) -> Result<Step, ConfigError> {
    let inv = |m: String| ConfigError::Invalid(m);
    Ok(match s {
        StepDef::InstallShadow {
            path,
            lbas,
            payload,
            policy,
            gate,
        } => Step::InstallShadow {
            target: match (path, lbas) {
                (Some(p), _) => ShadowTarget::Path(p.clone()),
                (None, Some(l)) => ShadowTarget::Lbas(l.iter().map(|[a, b]| *a..*b).collect()),
                (None, None) => return Err(inv("install-shadow without target".into())),
            },
            payload: ctx.blobs.resolve(payload)?,
            policy: *policy,
            gate: gate.clone(),
        },
        StepDef::PatchGrub { path, gate, in_place } => Step::PatchGrub {
            path: path.clone(),
            gate: gate.clone(),
            in_place: *in_place,
        },
        StepDef::Dos { mode, seed } => Step::Dos(mode.mode(*seed)),
        StepDef::Mine { globs, content } => Step::Mine(
            globs
                .iter()
                .map(|g| MineRule::Glob(g.clone()))
                .chain(content.iter().map(|c| MineRule::Content(c.clone())))
                .collect(),
        ),
        StepDef::ScanInject {
            signature,
            stride,
            payload,
            scan_only,
            offset,
        } => Step::ScanInject {
            signature: match signature {
                Some(b) => ctx.blobs.resolve(b)?,
                None => KERNEL_SIGNATURE.to_vec(),
            },
            stride: *stride,
            payload: if *scan_only {
                None
            } else {
                Some(match payload {
                    Some(b) => ctx.blobs.resolve(b)?,
                    None => default_module(),
                })
            },
            offset: *offset,
        },
        StepDef::PeerProbe { address, len } => Step::PeerProbe {
            address: address
                .or(peer_mmio)
                .ok_or_else(|| inv("peer-probe needs an address or a peer device".into()))?,
            len: *len,
        },
        StepDef::ReplaceOnShutdown {
            path,
            payload,
            elapsed_ms,
        } => Step::ReplaceOnShutdown {
            path: path.clone(),
            payload: ctx.blobs.resolve(payload)?,
            elapsed: SimTime::from_millis(*elapsed_ms),
        },
    })
}

/// Builds the platform for a scenario.
pub fn setup(cfg: &ScenarioConfig, base: &Path, seed: u64) -> Result<(Platform, Manifest), ConfigError> {
    let inv = |m: String| ConfigError::Invalid(m);
    cfg.check_files(base)?;
    let built = image::build(&cfg.image, base).map_err(|e| inv(format!("image: {e}")))?;
    let store =
        BlockStore::from_image(cfg.image.block_size, built.image).map_err(|e| inv(format!("store: {e}")))?;
    let ctx = Ctx {
        blobs: Blobs { cfg, base, seed },
    };
    let peer = cfg.host.peer_device.then_some(DeviceId(1));
    let memory = cfg.host.memory_mib * MIB;
    let peer_mmio = peer.map(|_| memory - MIB);

    let mut keys = Vec::new();
    for k in &cfg.keys {
        keys.push(ActivationKey {
            id: k.id.clone(),
            bytes: ctx.blobs.key(k)?,
        });
    }
    let mut playbooks = Vec::new();
    for p in &cfg.playbooks {
        let t = &p.trigger;
        let trigger = if let Some(k) = &t.key {
            Trigger::Key(k.clone())
        } else if let Some(s) = &t.sequence {
            Trigger::Sequence(s.clone())
        } else if let Some(ms) = t.time_ms {
            Trigger::Time(SimTime::from_millis(ms))
        } else if let Some(e) = &t.event {
            Trigger::Event {
                kind: e.clone(),
                after: t.after,
            }
        } else {
            return Err(inv(format!("playbook {} has no trigger", p.id)));
        };
        playbooks.push(Playbook {
            id: p.id.clone(),
            trigger,
            requires: p.requires.clone(),
            steps: p
                .steps
                .iter()
                .map(|s| to_step(&ctx, s, peer_mmio))
                .collect::<Result<_, _>>()?,
        });
    }
    let malice = if keys.is_empty() && playbooks.is_empty() && cfg.boot_patterns.is_empty() {
        None
    } else {
        let mc = MaliceConfig {
            keys,
            playbooks,
            boot_patterns: cfg.boot_patterns.clone(),
            private_quota: cfg.device.private_quota,
        };
        Some(Malice::new(mc, &store).map_err(|e| inv(e.to_string()))?)
    };

    let controller = ControllerConfig {
        device: DeviceId(0),
        model: cfg.device.model.clone(),
        serial: cfg.device.serial.clone(),
        class_code: match cfg.device.class {
            DeviceClass::Nvme => CLASS_NVME,
            DeviceClass::DmaController => CLASS_DMA_CONTROLLER,
        },
        spoof: cfg.device.spoof,
        ready_latency: SimTime::from_millis(cfg.device.ready_latency_ms),
        shutdown_budget: SimTime::from_millis(cfg.device.shutdown_budget_ms),
        ..Default::default()
    };
    let pcfg = PlatformConfig {
        memory,
        controller,
        driver: DriverConfig {
            ready_timeout: SimTime::from_millis(cfg.host.ready_timeout_ms),
            io_timeout: SimTime::from_millis(cfg.host.io_timeout_ms),
            shutdown_timeout: SimTime::from_millis(cfg.host.shutdown_timeout_ms),
            ..Default::default()
        },
        peer,
        iommu_groups: cfg
            .host
            .iommu_groups
            .iter()
            .map(|g| g.iter().map(|&d| DeviceId(d)).collect())
            .collect(),
        kernel_seed: cfg.host.kernel_seed.unwrap_or(seed),
        bootloader_config: cfg.host.bootloader_config.clone(),
        init_path: cfg.host.init.clone(),
    };
    let mut platform = Platform::new(pcfg, store, malice).map_err(inv)?;
    if let Some(m) = &platform.ctrl.malice {
        for w in m.warnings().to_vec() {
            platform.host.log.push(Actor::Malice, "key-warning", json!({ "warning": w }));
        }
    }
    Ok((platform, built.manifest))
}

fn ensure_attached(p: &mut Platform) -> bool {
    if p.driver.state() == DriverState::Ready {
        return true;
    }
    p.driver.init(&mut p.host, &mut p.ctrl) == InitOutcome::Ready
}

fn perform(p: &mut Platform, manifest: &Manifest, cfg: &ScenarioConfig, base: &Path, seed: u64, a: &Action) -> Result<(), ConfigError> {
    let blobs = Blobs { cfg, base, seed };
    match a {
        Action::Boot => {
            p.boot();
        }
        Action::Shutdown => p.shutdown(),
        Action::Reboot => {
            p.reboot();
        }
        Action::Attach => {
            ensure_attached(p);
        }
        Action::WriteBlob { lba, data, split_blocks } => {
            let mut data = blobs.resolve(data)?;
            let bs = manifest.device_block_size as usize;
            data.resize(data.len().div_ceil(bs) * bs, 0);
            let blocks = (data.len() / bs) as u64;
            let mut cuts: Vec<u64> = split_blocks.iter().copied().filter(|&c| c > 0 && c < blocks).collect();
            cuts.sort_unstable();
            cuts.dedup();
            cuts.push(blocks);
            if !ensure_attached(p) {
                p.host.log.push(Actor::Host, "host-write-failed", json!({ "lba": lba, "error": "not attached" }));
                return Ok(());
            }
            let mut prev = 0;
            for c in &cuts {
                let chunk = &data[prev as usize * bs..*c as usize * bs];
                if let Err(e) = p.driver.write(&mut p.host, &mut p.ctrl, lba + prev, chunk) {
                    p.host.log.push(
                        Actor::Host,
                        "host-write-failed",
                        json!({ "lba": lba + prev, "error": e.to_string() }),
                    );
                    return Ok(());
                }
                prev = *c;
            }
            p.host.log.push(
                Actor::Host,
                "host-write",
                json!({ "lba": lba, "blocks": blocks, "commands": cuts.len() }),
            );
        }
        Action::ReadFile { path } => {
            let r = if ensure_attached(p) {
                p.read_file(path)
            } else {
                Err("not attached".into())
            };
            match r {
                Ok(d) => p.host.log.push(
                    Actor::Host,
                    "file-read",
                    json!({ "path": path, "sha256": sha256_hex(&d), "bytes": d.len() }),
                ),
                Err(e) => p
                    .host
                    .log
                    .push(Actor::Host, "file-read-failed", json!({ "path": path, "error": e })),
            };
        }
        Action::ReadExtents { path } => {
            let f = manifest
                .file(path)
                .ok_or_else(|| ConfigError::Invalid(format!("read-extents: {path} is not in the image")))?
                .clone();
            let mut out = Vec::new();
            let mut err = None;
            if ensure_attached(p) {
                for r in &f.lbas {
                    match p.driver.read(&mut p.host, &mut p.ctrl, r[0], r[1] - r[0]) {
                        Ok(d) => out.extend(d),
                        Err(e) => {
                            err = Some(e.to_string());
                            break;
                        }
                    }
                }
            } else {
                err = Some("not attached".into());
            }
            out.truncate(f.size as usize);
            match err {
                None => p.host.log.push(
                    Actor::Host,
                    "extents-read",
                    json!({ "path": path, "sha256": sha256_hex(&out), "bytes": out.len() }),
                ),
                Some(e) => p
                    .host
                    .log
                    .push(Actor::Host, "extents-read-failed", json!({ "path": path, "error": e })),
            };
        }
        Action::ReadLba { lba, count } => {
            let r = if ensure_attached(p) {
                p.driver.read(&mut p.host, &mut p.ctrl, *lba, *count).map_err(|e| e.to_string())
            } else {
                Err("not attached".into())
            };
            match r {
                Ok(d) => p.host.log.push(
                    Actor::Host,
                    "host-read",
                    json!({ "lba": lba, "count": count, "sha256": sha256_hex(&d) }),
                ),
                Err(e) => p.host.log.push(
                    Actor::Host,
                    "host-read-failed",
                    json!({ "lba": lba, "count": count, "error": e }),
                ),
            };
        }
        Action::Trace { file, text } => {
            let (text, dir) = match (file, text) {
                (Some(f), _) => {
                    let path = base.join(f);
                    let t = std::fs::read_to_string(&path).map_err(|source| ConfigError::Io {
                        path: path.display().to_string(),
                        source,
                    })?;
                    (t, path.parent().map(Path::to_path_buf).unwrap_or_default())
                }
                (None, Some(t)) => (t.clone(), base.to_path_buf()),
                (None, None) => return Err(ConfigError::Invalid("empty trace action".into())),
            };
            let ops = trace::parse(&text).map_err(|e| ConfigError::Invalid(e.to_string()))?;
            if ensure_attached(p) {
                let out = p.replay(&ops, &dir).map_err(|e| ConfigError::Invalid(e.to_string()))?;
                p.host.log.push(
                    Actor::Host,
                    "trace-done",
                    json!({ "completed": out.completed, "errors": out.errors }),
                );
            }
        }
        Action::BootTrace { init } => {
            let ops = manifest
                .boot_trace(init)
                .ok_or_else(|| ConfigError::Invalid(format!("boot-trace: {init} is not in the image")))?;
            if ensure_attached(p) {
                let out = p.replay(&ops, base).map_err(|e| ConfigError::Invalid(e.to_string()))?;
                // The init file as the replayed reads delivered it.
                let file = manifest.file(init).expect("boot trace needs the file");
                let bs = manifest.device_block_size as u64;
                let mut data = Vec::new();
                if let Some(span) = file.lbas.first().map(|r| r[0]) {
                    if let Some((_, d)) = out.reads.iter().rev().find(|(l, _)| *l == span) {
                        for r in &file.lbas {
                            let (s, e) = (((r[0] - span) * bs) as usize, ((r[1] - span) * bs) as usize);
                            data.extend_from_slice(&d[s..e.min(d.len())]);
                        }
                    }
                }
                data.truncate(file.size as usize);
                p.host.log.push(
                    Actor::Host,
                    "trace-done",
                    json!({
                        "completed": out.completed,
                        "errors": out.errors,
                        "path": init,
                        "bytes": data.len(),
                        "sha256": hex::encode(Sha256::digest(&data)),
                    }),
                );
            }
        }
        Action::Wait { ms } => p.advance(SimTime::from_millis(*ms)),
        Action::DropCaches => p.drop_caches(),
        Action::ScriptMutation { offset, data } => {
            let data = blobs.resolve(data)?;
            match p.host.mem.region(&RegionKind::Kernel) {
                Some(_) => {
                    let addr = p.host.kernel_addr().unwrap_or(0) + offset;
                    p.host.script_mutation(addr, data);
                }
                None => return Err(ConfigError::Invalid("host has no kernel region".into())),
            }
        }
    }
    Ok(())
}

fn matches(m: &EventMatch, e: &Event) -> bool {
    e.kind == m.kind()
        && m.actor().is_none_or(|a| e.actor.to_string() == a)
        && m.detail().is_none_or(|d| e.detail_matches(&d))
}

fn first_match<'a>(log: &'a [Event], m: &EventMatch) -> Option<&'a Event> {
    log.iter().find(|e| matches(m, e))
}

fn resolve_digest(
    d: &DigestRef,
    log: &[Event],
    manifest: &Manifest,
    blobs: &Blobs,
) -> Result<String, String> {
    match d {
        DigestRef::Literal(s) => {
            if let Some(path) = s.strip_prefix("genuine:") {
                manifest
                    .file(path)
                    .map(|f| f.sha256.clone())
                    .ok_or_else(|| format!("{path} is not in the image"))
            } else if let Some(name) = s.strip_prefix("blob:") {
                blobs
                    .resolve(&super::config::BlobRef::Name(name.to_string()))
                    .map(|b| sha256_hex(&b))
                    .map_err(|e| e.to_string())
            } else if s.len() == 64 && s.chars().all(|c| c.is_ascii_hexdigit()) {
                Ok(s.to_ascii_lowercase())
            } else {
                Err(format!("cannot interpret digest {s}"))
            }
        }
        DigestRef::Event { event, nth, field } => {
            let hits: Vec<&Event> = log.iter().filter(|e| matches(event, e)).collect();
            let idx = if *nth < 0 { hits.len() as i64 + nth } else { *nth };
            let e = usize::try_from(idx)
                .ok()
                .and_then(|i| hits.get(i))
                .ok_or_else(|| format!("no occurrence {nth} of {}", event.kind()))?;
            e.detail
                .get(field)
                .and_then(Value::as_str)
                .map(str::to_string)
                .ok_or_else(|| format!("event {} has no field {field}", e.seq))
        }
    }
}

fn check(c: &Check, log: &[Event], manifest: &Manifest, blobs: &Blobs) -> (bool, String, Option<Event>) {
    match c {
        Check::Event { event, count, min } => {
            let n = log.iter().filter(|e| matches(event, e)).count();
            match count {
                Some(want) if n != *want => {
                    let extra = log.iter().filter(|e| matches(event, e)).nth(*want).cloned();
                    (false, format!("{} occurred {n} times, expected {want}", event.kind()), extra)
                }
                Some(_) => (true, format!("{} occurred {n} times", event.kind()), None),
                None => {
                    let want = min.unwrap_or(1);
                    (n >= want, format!("{} occurred {n} times (min {want})", event.kind()), None)
                }
            }
        }
        Check::NoEvent { event } => match first_match(log, event) {
            Some(e) => (false, format!("unexpected {} at seq {}", e.kind, e.seq), Some(e.clone())),
            None => (true, format!("no {}", event.kind()), None),
        },
        Check::Order { events } => {
            let mut last: Option<&Event> = None;
            for m in events {
                match first_match(log, m) {
                    None => return (false, format!("{} never occurred", m.kind()), None),
                    Some(e) => {
                        if let Some(l) = last {
                            if e.seq <= l.seq {
                                return (
                                    false,
                                    format!("{} (seq {}) is not after {} (seq {})", e.kind, e.seq, l.kind, l.seq),
                                    Some(e.clone()),
                                );
                            }
                        }
                        last = Some(e);
                    }
                }
            }
            (true, "in order".into(), None)
        }
        Check::Between { event, after, before } => {
            let mut open = false;
            let mut pending: Option<&Event> = None;
            let mut seen = 0;
            for e in log {
                if matches(after, e) {
                    open = true;
                }
                if matches(event, e) {
                    if !open {
                        return (false, format!("{} at seq {} outside the window", e.kind, e.seq), Some(e.clone()));
                    }
                    seen += 1;
                    pending = Some(e);
                }
                if matches(before, e) {
                    open = false;
                    pending = None;
                }
            }
            if let Some(e) = pending {
                return (false, format!("window around seq {} never closed", e.seq), Some(e.clone()));
            }
            if seen == 0 {
                return (false, format!("{} never occurred", event.kind()), None);
            }
            (true, format!("{seen} occurrence(s) inside the window"), None)
        }
        Check::DigestEqual { a, b } | Check::DigestDiffers { a, b } => {
            let want_equal = matches!(c, Check::DigestEqual { .. });
            match (
                resolve_digest(a, log, manifest, blobs),
                resolve_digest(b, log, manifest, blobs),
            ) {
                (Ok(x), Ok(y)) => {
                    let ok = (x == y) == want_equal;
                    (ok, format!("{} {} {}", &x[..12.min(x.len())], if x == y { "==" } else { "!=" }, &y[..12.min(y.len())]), None)
                }
                (Err(e), _) | (_, Err(e)) => (false, e, None),
            }
        }
    }
}

/// Runs a parsed scenario. `seed` overrides the config's seed.
pub fn run_config(cfg: &ScenarioConfig, base: &Path, seed: Option<u64>) -> Result<RunOutput, ConfigError> {
    let started = Instant::now();
    let seed = seed.unwrap_or(cfg.seed);
    let (mut platform, manifest) = setup(cfg, base, seed)?;
    platform
        .host
        .log
        .push(Actor::Scenario, "scenario-start", json!({ "name": cfg.name, "seed": seed }));
    for a in &cfg.actions {
        perform(&mut platform, &manifest, cfg, base, seed, a)?;
    }
    let blobs = Blobs { cfg, base, seed };
    let log = platform.host.log.clone();
    let events = log.events();
    let assertions: Vec<AssertionOutcome> = cfg
        .assertions
        .iter()
        .map(|a| {
            let (passed, message, violating_event) = check(&a.check, events, &manifest, &blobs);
            AssertionOutcome {
                name: a.name.clone(),
                kind: a.check.name().into(),
                passed,
                message,
                violating_event,
            }
        })
        .collect();
    let report = RunReport {
        scenario: cfg.name.clone(),
        seed,
        passed: assertions.iter().all(|a| a.passed),
        assertions,
        events: events.len(),
        log_path: None,
        wall_clock_ms: started.elapsed().as_millis(),
    };
    Ok(RunOutput {
        report,
        log,
        manifest,
        platform,
    })
}
