//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails.

use std::collections::{BTreeMap, VecDeque};
use std::ops::Range;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use envme::backend::BlockStore;
use envme::diskfs::{parse_partitions, to_absolute_lbas, Ext2Fs, MemDevice};
use envme::host::driver::{Driver, DriverConfig, InitOutcome};
use envme::host::{DeviceId, Host, HostMemory, IommuConfig, RegionKind, KERNEL_SIGNATURE, MIB};
use envme::image::{self, FileSpec, ImageSpec};
use envme::malice::{self, ActivationKey, Automaton, Malice, MaliceConfig, Playbook, Policy, ShadowTarget, Step, StreamMatcher, Trigger};
use envme::nvme::regs;
use envme::nvme::wire::{admin_opcode, io_opcode, SubmissionEntry, CQE_SIZE, FEATURE_NUM_QUEUES, SQE_SIZE};
use envme::nvme::{Controller, ControllerConfig};
use envme::scenario;
use envme::sweep::{self, Exec, SyntheticStream};

type Check = fn() -> Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------------------
// 1. Queue semantics

const QUEUE_SIZES: [u16; 4] = [2, 3, 4, 64];

/// Host-side view of one IO queue pair, driven by hand rather than through
/// the driver so every doorbell write is under the schedule's control.
struct RawPair {
    qid: u16,
    sq_base: u64,
    cq_base: u64,
    sq_size: u16,
    cq_size: u16,
    written: u16,
    rung: u16,
    /// SQ head as last reported by a completion.
    sq_head: u16,
    cq_head: u16,
    /// Reaped but not yet acknowledged through the CQ head doorbell.
    unacked: bool,
    reaped: u64,
    next_cid: u16,
    in_flight: VecDeque<u16>,
    submitted: Vec<u16>,
    completed: Vec<u16>,
}

impl RawPair {
    fn free_slots(&self) -> u16 {
        let used = (self.written + self.sq_size - self.sq_head) % self.sq_size;
        self.sq_size - 1 - used
    }
}

fn queue_schedule(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let io_depth = QUEUE_SIZES[rng.random_range(0..4)];
    let mut host = Host::new(HostMemory::with_default_layout(16 * MIB, None).unwrap());
    let mut ctrl = Controller::new(ControllerConfig::default(), BlockStore::in_memory(512, 256).unwrap());
    let mut drv = Driver::new(DriverConfig {
        io_depth,
        admin_depth: QUEUE_SIZES[rng.random_range(0..4)],
        ..Default::default()
    });
    ensure(drv.init(&mut host, &mut ctrl) == InitOutcome::Ready, || "init failed".into())?;
    let extra = rng.random_range(0..3u16);
    if extra > 0 {
        drv.admin(&mut host, &mut ctrl, SubmissionEntry {
            opcode: admin_opcode::SET_FEATURES,
            cdw10: FEATURE_NUM_QUEUES as u32,
            cdw11: extra as u32 | (extra as u32) << 16,
            ..Default::default()
        })
        .map_err(|e| e.to_string())?;
    }
    for qid in 2..2 + extra {
        let sq = QUEUE_SIZES[rng.random_range(0..4)];
        let cq = QUEUE_SIZES[rng.random_range(0..4)];
        drv.create_io_pair(&mut host, &mut ctrl, qid, sq, cq).map_err(|e| e.to_string())?;
    }
    let buf = host.mem.region(&RegionKind::DataBuffers).unwrap().range.start;
    let mut pairs: Vec<RawPair> = (1..2 + extra)
        .map(|qid| {
            let q = drv.queue(qid).unwrap();
            RawPair {
                qid,
                sq_base: q.sq_base,
                cq_base: q.cq_base,
                sq_size: q.sq_size,
                cq_size: q.cq_size,
                written: 0,
                rung: 0,
                sq_head: 0,
                cq_head: 0,
                unacked: false,
                reaped: 0,
                next_cid: 1,
                in_flight: VecDeque::new(),
                submitted: Vec::new(),
                completed: Vec::new(),
            }
        })
        .collect();

    // Reads up to `max` new completions; the phase bit of the k-th
    // completion on a CQ of size n must be 1 for even k / n, 0 for odd.
    let reap = |host: &mut Host, p: &mut RawPair, max: usize| -> Result<(), String> {
        for _ in 0..max {
            let raw = host.mem.read(p.cq_base + p.cq_head as u64 * CQE_SIZE as u64, CQE_SIZE).to_vec();
            let dw3 = u32::from_le_bytes(raw[12..16].try_into().unwrap());
            let phase = (dw3 >> 16) & 1 == 1;
            let expected = (p.reaped / p.cq_size as u64) % 2 == 0;
            if phase != expected {
                break;
            }
            let cid = dw3 as u16;
            let status = (dw3 >> 17) & 0x7FFF;
            ensure(status == 0, || format!("q{} cid {cid} status {status:#x}", p.qid))?;
            let want = p.in_flight.pop_front();
            ensure(want == Some(cid), || {
                format!("q{}: completion cid {cid}, expected {want:?}", p.qid)
            })?;
            p.sq_head = u16::from_le_bytes(raw[8..10].try_into().unwrap());
            p.completed.push(cid);
            p.reaped += 1;
            p.cq_head = (p.cq_head + 1) % p.cq_size;
            p.unacked = true;
        }
        Ok(())
    };

    let steps = rng.random_range(20..120);
    for _ in 0..steps {
        let p = &mut pairs[rng.random_range(0..(1 + extra) as usize)];
        match rng.random_range(0..4) {
            0 => {
                let n = rng.random_range(0..=p.free_slots());
                for _ in 0..n {
                    let cid = p.next_cid;
                    p.next_cid = p.next_cid.wrapping_add(1).max(1);
                    let sqe = if rng.random_bool(0.5) {
                        SubmissionEntry {
                            opcode: io_opcode::FLUSH,
                            cid,
                            nsid: 1,
                            ..Default::default()
                        }
                    } else {
                        SubmissionEntry::io(io_opcode::READ, cid, rng.random_range(0..256), 1, buf, 0)
                    };
                    host.mem.write(p.sq_base + p.written as u64 * SQE_SIZE as u64, &sqe.encode());
                    p.written = (p.written + 1) % p.sq_size;
                    p.submitted.push(cid);
                    p.in_flight.push_back(cid);
                }
            }
            1 => {
                // Publish any prefix of the unpublished entries.
                let pending = (p.written + p.sq_size - p.rung) % p.sq_size;
                if pending > 0 {
                    let k = rng.random_range(1..=pending);
                    p.rung = (p.rung + k) % p.sq_size;
                    ctrl.mmio_write(&mut host, regs::sq_tail_doorbell(p.qid), 4, p.rung as u64);
                }
            }
            2 => reap(&mut host, p, rng.random_range(1..=p.cq_size as usize))?,
            _ => {
                if p.unacked {
                    ctrl.mmio_write(&mut host, regs::cq_head_doorbell(p.qid), 4, p.cq_head as u64);
                    p.unacked = false;
                }
            }
        }
    }
    // Drain.
    for p in pairs.iter_mut() {
        p.rung = p.written;
        ctrl.mmio_write(&mut host, regs::sq_tail_doorbell(p.qid), 4, p.rung as u64);
        let mut guard = 0;
        while !p.in_flight.is_empty() {
            reap(&mut host, p, usize::MAX)?;
            ctrl.mmio_write(&mut host, regs::cq_head_doorbell(p.qid), 4, p.cq_head as u64);
            guard += 1;
            ensure(guard < 10_000, || format!("q{}: {} completions never arrived", p.qid, p.in_flight.len()))?;
        }
    }
    for p in &pairs {
        let mut a = p.submitted.clone();
        let mut b = p.completed.clone();
        a.sort_unstable();
        b.sort_unstable();
        ensure(a == b, || format!("q{}: completed multiset differs from submitted", p.qid))?;
        ensure(p.submitted == p.completed, || format!("q{}: order not preserved", p.qid))?;
    }
    ensure(host.log.count("cq-overflow") == 0, || "cq overflow".into())?;
    Ok(())
}

fn criterion_queues() -> Result<String, String> {
    let seeds: Vec<u64> = (0..1000).collect();
    let results = sweep::par_map(Exec::Parallel, &seeds, |&s| queue_schedule(s).map_err(|e| format!("seed {s}: {e}")));
    let failures: Vec<String> = results.into_iter().filter_map(Result::err).collect();
    ensure(failures.is_empty(), || format!("{} of 1000 failed; first: {}", failures.len(), failures[0]))?;
    Ok("1000 schedules on sizes {2,3,4,64}".into())
}

// ---------------------------------------------------------------------------
// 2. Matcher equivalence

/// Naive single-pass search over the whole stream: (end offset, key index).
fn naive_matches(stream: &[u8], keys: &[Vec<u8>]) -> Vec<(u64, usize)> {
    let mut out = Vec::new();
    for (k, key) in keys.iter().enumerate() {
        if key.len() > stream.len() {
            continue;
        }
        for i in 0..=stream.len() - key.len() {
            if stream[i] == key[0] && &stream[i..i + key.len()] == key.as_slice() {
                out.push(((i + key.len()) as u64, k));
            }
        }
    }
    out.sort_unstable();
    out
}

fn stream_matches(stream: &[u8], keys: &[Vec<u8>], splits: &[usize]) -> Vec<(u64, usize)> {
    let mut m = StreamMatcher::new(Automaton::new(keys));
    let mut out = Vec::new();
    let mut prev = 0;
    for &s in splits.iter().chain(std::iter::once(&stream.len())) {
        out.extend(m.scan(&stream[prev..s]).into_iter().map(|x| (x.end, x.pattern)));
        prev = s;
    }
    out.sort_unstable();
    out
}

fn matcher_case(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = rng.random_range(0..=64 * 1024);
    // Small alphabets make accidental partial matches and overlaps common.
    let alphabet: u8 = if rng.random_bool(0.5) { 2 } else { 255 };
    let mut stream: Vec<u8> = (0..len).map(|_| rng.random_range(0..=alphabet)).collect();
    let nkeys = rng.random_range(1..=16);
    let mut keys: Vec<Vec<u8>> = Vec::new();
    for _ in 0..nkeys {
        let klen = rng.random_range(16..=256);
        let key = match (keys.last(), rng.random_range(0..4)) {
            // Prefix or suffix of an earlier key.
            (Some(k), 0) if k.len() > 16 => k[..rng.random_range(16..k.len())].to_vec(),
            (Some(k), 1) if k.len() > 16 => k[rng.random_range(0..k.len() - 16)..].to_vec(),
            _ => (0..klen).map(|_| rng.random_range(0..=alphabet)).collect(),
        };
        keys.push(key);
    }
    let nsplits = rng.random_range(0..=32.min(len));
    let mut splits: Vec<usize> = (0..nsplits).map(|_| rng.random_range(1..len.max(2))).collect();
    splits.retain(|&s| s < len);
    splits.sort_unstable();
    splits.dedup();
    // Plant keys straddling command boundaries.
    for &s in splits.iter().take(8) {
        let key = &keys[rng.random_range(0..keys.len())];
        let back = rng.random_range(1..key.len());
        if s >= back && s - back + key.len() <= len {
            stream[s - back..s - back + key.len()].copy_from_slice(key);
        }
    }
    let want = naive_matches(&stream, &keys);
    let got = stream_matches(&stream, &keys, &splits);
    ensure(got == want, || format!("{} matches, oracle {}", got.len(), want.len()))
}

fn criterion_matcher() -> Result<String, String> {
    let results = sweep::par_range(Exec::Parallel, 10_000, |s| matcher_case(s).map_err(|e| format!("case {s}: {e}")));
    let failures: Vec<String> = results.into_iter().filter_map(Result::err).collect();
    ensure(failures.is_empty(), || format!("{} of 10000 failed; first: {}", failures.len(), failures[0]))?;
    // Every boundary position inside keys of the extreme lengths.
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for klen in [16usize, 17, 128, 255, 256] {
        let key: Vec<u8> = (0..klen).map(|_| rng.random()).collect();
        let mut stream = vec![0xEEu8; 1024];
        stream[300..300 + klen].copy_from_slice(&key);
        for cut in 301..300 + klen {
            let got = stream_matches(&stream, std::slice::from_ref(&key), &[cut]);
            ensure(got == vec![(300 + klen as u64, 0)], || format!("key len {klen}, boundary {cut}"))?;
        }
    }
    Ok("10000 random cases plus every boundary for key lengths 16..256".into())
}

// ---------------------------------------------------------------------------
// 3. Exactly-once shadowing

const SHADOW_BLOCKS: u64 = 2048;
const FURTHER_IOS: usize = 10_000;

struct Rig {
    host: Host,
    ctrl: Controller,
    drv: Driver,
}

impl Rig {
    fn new(store: BlockStore, malice: Option<Malice>) -> Self {
        let mut host = Host::new(HostMemory::with_default_layout(16 * MIB, None).unwrap());
        let mut ctrl = Controller::new(ControllerConfig::default(), store);
        if let Some(m) = malice {
            ctrl = ctrl.attach_malice(m);
        }
        let mut drv = Driver::new(DriverConfig::default());
        assert_eq!(drv.init(&mut host, &mut ctrl), InitOutcome::Ready);
        Rig { host, ctrl, drv }
    }
    fn read(&mut self, lba: u64, n: u64) -> Vec<u8> {
        self.drv.read(&mut self.host, &mut self.ctrl, lba, n).unwrap()
    }
    fn write(&mut self, lba: u64, d: &[u8]) {
        self.drv.write(&mut self.host, &mut self.ctrl, lba, d).unwrap()
    }
}

fn random_io(rng: &mut ChaCha8Rng) -> (u64, u64) {
    let n = rng.random_range(1..=32);
    (rng.random_range(0..SHADOW_BLOCKS - n), n)
}

fn shadow_schedule(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = vec![0u8; (SHADOW_BLOCKS * 512) as usize];
    rng.fill_bytes(&mut init);
    let store = || BlockStore::from_image(512, init.clone()).unwrap();

    let mut ranges: Vec<Range<u64>> = Vec::new();
    let mut at = 64;
    for _ in 0..rng.random_range(1..=3) {
        let s = at + rng.random_range(0..200);
        let e = s + rng.random_range(1..=16);
        ranges.push(s..e);
        at = e + 1;
    }
    let blocks: u64 = ranges.iter().map(|r| r.end - r.start).sum();
    let mut payload = vec![0u8; (blocks * 512) as usize];
    rng.fill_bytes(&mut payload);
    let mut key = vec![0u8; malice::RECOMMENDED_KEY_LEN];
    rng.fill_bytes(&mut key);
    let cfg = MaliceConfig {
        keys: vec![ActivationKey {
            id: "k".into(),
            bytes: key.clone(),
        }],
        playbooks: vec![Playbook {
            id: "p".into(),
            trigger: Trigger::Key("k".into()),
            requires: None,
            steps: vec![Step::InstallShadow {
                target: ShadowTarget::Lbas(ranges.clone()),
                payload: payload.clone(),
                policy: Policy::FirstReadOnce,
                gate: None,
            }],
        }],
        ..Default::default()
    };
    let m = Malice::new(cfg, &store()).map_err(|e| e.to_string())?;
    let mut evil = Rig::new(store(), Some(m));
    let mut clean = Rig::new(store(), None);
    let mut key_block = key.clone();
    key_block.resize(512, 0);
    evil.write(0, &key_block);
    clean.write(0, &key_block);

    // Payload bytes for an absolute LBA, in rule order.
    let payload_of = |lba: u64| -> Option<&[u8]> {
        let mut off = 0;
        for r in &ranges {
            if r.contains(&lba) {
                let i = (off + lba - r.start) as usize * 512;
                return Some(&payload[i..i + 512]);
            }
            off += r.end - r.start;
        }
        None
    };
    let overlaps = |lba: u64, n: u64| ranges.iter().any(|r| lba < r.end && r.start < lba + n);

    let mut reads: Vec<(u64, u64)> = (0..rng.random_range(1..60))
        .map(|_| {
            if rng.random_bool(0.3) {
                let r = &ranges[rng.random_range(0..ranges.len())];
                let n = rng.random_range(1..=8);
                (r.start.saturating_sub(rng.random_range(0..4)), n)
            } else {
                random_io(&mut rng)
            }
        })
        .collect();
    if !reads.iter().any(|&(l, n)| overlaps(l, n)) {
        reads.push((ranges[0].start, 1));
    }
    let first = reads.iter().position(|&(l, n)| overlaps(l, n)).unwrap();
    let mut observed = Vec::new();
    for (i, &(lba, n)) in reads.iter().enumerate() {
        let got = evil.read(lba, n);
        let want = clean.read(lba, n);
        if got != want {
            observed.push(i);
            ensure(i == first, || format!("read {i} saw payload, first overlapping read is {first}"))?;
            for b in 0..n {
                let blk = &got[b as usize * 512..(b as usize + 1) * 512];
                let expect = payload_of(lba + b).unwrap_or(&want[b as usize * 512..(b as usize + 1) * 512]);
                ensure(blk == expect, || format!("read {i} block {} is neither payload nor genuine", lba + b))?;
            }
        }
    }
    ensure(observed.len() == 1, || format!("{} reads observed the payload", observed.len()))?;

    for _ in 0..FURTHER_IOS {
        let (lba, n) = random_io(&mut rng);
        if rng.random_bool(0.4) {
            let mut d = vec![0u8; n as usize * 512];
            rng.fill_bytes(&mut d);
            evil.write(lba, &d);
            clean.write(lba, &d);
        } else {
            ensure(evil.read(lba, n) == clean.read(lba, n), || format!("post-consumption read at {lba} differs"))?;
        }
    }
    let a = evil.ctrl.store.read_raw(0, SHADOW_BLOCKS).unwrap();
    let b = clean.ctrl.store.read_raw(0, SHADOW_BLOCKS).unwrap();
    ensure(a == b, || "backing stores differ".into())
}

fn criterion_shadow() -> Result<String, String> {
    let results = sweep::par_range(Exec::Parallel, 1000, |s| shadow_schedule(s).map_err(|e| format!("seed {s}: {e}")));
    let failures: Vec<String> = results.into_iter().filter_map(Result::err).collect();
    ensure(failures.is_empty(), || format!("{} of 1000 failed; first: {}", failures.len(), failures[0]))?;
    Ok(format!("1000 schedules, {FURTHER_IOS} further IOs each"))
}

// ---------------------------------------------------------------------------
// 4. Filesystem oracle

/// Blocks a file needs before it reaches the triple-indirect tree on 1 KiB
/// blocks: 12 direct, 256 single, 256^2 double.
const TRIPLE_START: u64 = 12 + 256 + 256 * 256;

fn fs_image(seed: u64) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut sizes: Vec<u64> = vec![
        0,
        rng.random_range(1..=12 * 1024),
        12 * 1024 + rng.random_range(0..2),
        rng.random_range(12 * 1024..268 * 1024),
        268 * 1024 + rng.random_range(0..2),
        rng.random_range(268 * 1024..2 * MIB),
    ];
    let triple = seed % 5 == 0;
    if triple {
        sizes.push(TRIPLE_START * 1024 + rng.random_range(0..3000 * 1024));
    }
    let mut files = Vec::new();
    let mut digests = BTreeMap::new();
    for (i, size) in sizes.iter().enumerate() {
        let mut data = vec![0u8; *size as usize];
        rng.fill_bytes(&mut data);
        let name = format!("f{i}.bin");
        std::fs::write(dir.path().join(&name), &data).map_err(|e| e.to_string())?;
        let path = format!("/d{}/f{i}", i % 3);
        digests.insert(path.clone(), hex::encode(Sha256::digest(&data)));
        files.push(FileSpec {
            path,
            source: Some(name),
            gap_before: rng.random_range(0..4),
            fragment_every: rng.random_bool(0.3).then(|| rng.random_range(1..64)),
            mode: 0o644,
            ..Default::default()
        });
    }
    let spec = ImageSpec {
        size_mib: if triple { 96 } else { 16 },
        seed,
        files,
        ..Default::default()
    };
    let built = image::build(&spec, dir.path()).map_err(|e| e.to_string())?;
    drop(dir);
    let img = &built.image;
    let mut dev = MemDevice::new(img, 512);
    let parts = parse_partitions(&mut dev).map_err(|e| e.to_string())?;
    let part = parts.first().ok_or("no partition")?.clone();
    let fs = Ext2Fs::open(&mut dev, &part).map_err(|e| e.to_string())?;
    for (path, digest) in &digests {
        let map = fs.resolve_path(&mut dev, path).map_err(|e| format!("{path}: {e}"))?;
        let mf = built.manifest.file(path).ok_or(format!("{path} missing from manifest"))?;
        ensure(map.extents == mf.extents, || format!("{path}: extents differ from manifest"))?;
        ensure(map.file_size == mf.size, || format!("{path}: size differs"))?;
        let lbas = to_absolute_lbas(&map, &part, 512).map_err(|e| e.to_string())?;
        let want: Vec<[u64; 2]> = lbas.iter().map(|r| [r.start, r.end]).collect();
        ensure(want == mf.lbas, || format!("{path}: absolute LBAs differ from manifest"))?;
        let mut h = Sha256::new();
        let mut left = map.file_size;
        for r in &lbas {
            let bytes = ((r.end - r.start) * 512).min(left);
            let s = (r.start * 512) as usize;
            h.update(&img[s..s + bytes as usize]);
            left -= bytes;
        }
        ensure(left == 0, || format!("{path}: extents short by {left} bytes"))?;
        ensure(hex::encode(h.finalize()) == *digest, || format!("{path}: content hash differs"))?;
    }
    Ok(digests.len())
}

fn criterion_fs() -> Result<String, String> {
    let results = sweep::par_range(Exec::Parallel, 100, |s| fs_image(s).map_err(|e| format!("image {s}: {e}")));
    let mut files = 0;
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(n) => files += n,
            Err(e) => failures.push(e),
        }
    }
    ensure(failures.is_empty(), || format!("{} of 100 failed; first: {}", failures.len(), failures[0]))?;
    Ok(format!("100 images, {files} files, 20 reaching triple-indirect"))
}

// ---------------------------------------------------------------------------
// 5. IOMMU

fn flat_search(mem: &[u8], sig: &[u8]) -> Vec<u64> {
    (0..=mem.len() - sig.len())
        .filter(|&i| mem[i] == sig[0] && &mem[i..i + sig.len()] == sig)
        .map(|i| i as u64)
        .collect()
}

fn criterion_iommu() -> Result<String, String> {
    let dev = DeviceId(0);
    // IOMMU on: the normal IO flow works, a kernel scan faults.
    let mut host = Host::new(HostMemory::with_default_layout(32 * MIB, None).unwrap());
    let mut cfg = IommuConfig::enabled();
    for kind in [RegionKind::QueueArea, RegionKind::DataBuffers] {
        cfg = cfg.allow(dev, host.mem.region(&kind).unwrap().range.clone());
    }
    host.iommu_configure(cfg).map_err(|e| e.to_string())?;
    host.load_kernel(5);
    let mut ctrl = Controller::new(ControllerConfig::default(), BlockStore::in_memory(512, 8192).unwrap());
    let mut drv = Driver::new(DriverConfig::default());
    ensure(drv.init(&mut host, &mut ctrl) == InitOutcome::Ready, || "init under IOMMU failed".into())?;
    let data: Vec<u8> = (0..64 * 1024).map(|i| (i % 251) as u8).collect();
    drv.write(&mut host, &mut ctrl, 100, &data).map_err(|e| e.to_string())?;
    ensure(drv.read(&mut host, &mut ctrl, 100, 128).map_err(|e| e.to_string())? == data, || "readback differs".into())?;
    drv.flush(&mut host, &mut ctrl).map_err(|e| e.to_string())?;
    let faults_before = host.dma_stats().faults;
    let scan = malice::scan_host_memory(&mut host, dev, KERNEL_SIGNATURE, 1 << 20);
    let faults = host.dma_stats().faults - faults_before;
    ensure(faults >= 1, || "kernel scan raised no DMA fault".into())?;
    ensure(scan.hits.is_empty(), || "kernel signature visible through the IOMMU".into())?;

    // IOMMU off: scan hits equal a flat search, across strides and layouts.
    let mut cases = 0;
    for seed in 0..12u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut host = Host::new(HostMemory::with_default_layout(8 * MIB, None).unwrap());
        let size = host.mem.size();
        host.load_kernel(seed);
        let sig = if seed % 2 == 0 { KERNEL_SIGNATURE.to_vec() } else { b"QQQQ".to_vec() };
        for _ in 0..rng.random_range(0..6) {
            // Some plants straddle page and window edges.
            let at = if rng.random_bool(0.5) {
                (rng.random_range(1..size / 4096) * 4096).saturating_sub(rng.random_range(1..sig.len() as u64))
            } else {
                rng.random_range(0..size - sig.len() as u64)
            };
            host.mem.write(at, &sig);
        }
        let stride = [4096usize, 10_007, 1 << 20, 3 << 20][seed as usize % 4];
        let want = flat_search(host.mem.as_bytes(), &sig);
        let got = malice::scan_host_memory(&mut host, dev, &sig, stride);
        ensure(got.hits == want, || format!("seed {seed}: {} hits, oracle {}", got.hits.len(), want.len()))?;
        ensure(got.pages_faulted == 0, || "faults with the IOMMU off".into())?;
        cases += 1;
    }
    Ok(format!("{faults} faults under IOMMU; {cases} flat-search comparisons with it off"))
}

// ---------------------------------------------------------------------------
// 6. End-to-end scenarios

fn criterion_scenarios() -> Result<String, String> {
    let names = [
        "cookie-activation",
        "init-shadow",
        "shutdown-window",
        "iommu-bypass-grub",
        "dos-cipher",
        "spoof-never-ready",
    ];
    for n in names {
        let out = scenario::run_named(n, None).map_err(|e| format!("{n}: {e}"))?;
        let failed: Vec<&str> = out.report.assertions.iter().filter(|a| !a.passed).map(|a| a.name.as_str()).collect();
        ensure(out.report.passed, || format!("{n}: failed {failed:?}"))?;
    }
    Ok(format!("{} scenarios exit 0", names.len()))
}

// ---------------------------------------------------------------------------
// 7. Key collisions

fn criterion_collisions() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED);
    let mut key = vec![0u8; 128];
    rng.fill_bytes(&mut key);
    let len = 1_000_000_000u64;
    let segment = 16 << 20;
    // Controls: copies straddling a segment edge and at the stream's ends.
    let plants = vec![0, segment - 50, 7 * segment + 12_345, len - 128];
    let stream = SyntheticStream {
        seed: rng.next_u64(),
        len,
        key,
        plants: plants.clone(),
    };
    let r = sweep::collision_sweep(&stream, segment, 4096, Exec::Parallel);
    let planted: Vec<u64> = plants.iter().map(|p| p + 128).collect();
    let spurious = r.matches.iter().filter(|m| !planted.contains(m)).count();
    ensure(spurious == 0, || format!("{spurious} spurious activations"))?;
    ensure(r.matches == planted, || format!("control copies found: {} of {}", r.matches.len(), planted.len()))?;
    Ok(format!("{} bytes, 0 spurious, {} control copies found", r.bytes, planted.len()))
}

fn main() -> ExitCode {
    let criteria: [(&str, Check, Option<Duration>); 7] = [
        ("queue semantics", criterion_queues, Some(Duration::from_secs(10))),
        ("matcher equivalence", criterion_matcher, Some(Duration::from_secs(30))),
        ("exactly-once shadowing", criterion_shadow, None),
        ("filesystem oracle", criterion_fs, None),
        ("iommu properties", criterion_iommu, None),
        ("end-to-end scenarios", criterion_scenarios, Some(Duration::from_secs(60))),
        ("key collisions", criterion_collisions, None),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut all = true;
    for (i, (name, check, budget)) in criteria.iter().enumerate() {
        if !only.is_empty() && !only.iter().any(|o| name.contains(o.as_str())) {
            continue;
        }
        let t = Instant::now();
        let r = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        let took = t.elapsed();
        let r = match (r, budget) {
            (Ok(_), Some(b)) if took > *b => Err(format!("took {took:.2?}, budget {b:?}")),
            (r, _) => r,
        };
        let (tag, msg) = match &r {
            Ok(m) => ("PASS", m),
            Err(m) => ("FAIL", m),
        };
        all &= r.is_ok();
        println!("criterion {} {name}: {tag} ({msg}) [{took:.2?}]", i + 1);
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
