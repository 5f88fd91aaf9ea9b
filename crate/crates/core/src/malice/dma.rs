//! Device-initiated DMA against host memory: signature scan and payload
//! injection with read-back verification.

use serde::Serialize;

use crate::host::{DeviceId, DmaFault, Host, PAGE_SIZE};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScanResult {
    /// Start addresses of every occurrence found, ascending.
    pub hits: Vec<u64>,
    pub bytes_read: u64,
    pub pages_faulted: u64,
    /// Fraction of host memory that could be read.
    pub coverage: f64,
}

/// Scans host memory for `sig` in windows of `stride` bytes. Consecutive
/// windows overlap by `sig.len() - 1` bytes so a signature straddling a
/// window edge is still found, and reported once (by the window holding its
/// first byte). A faulting window is retried page by page.
pub fn scan_host_memory(host: &mut Host, dev: DeviceId, sig: &[u8], stride: usize) -> ScanResult {
    assert!(!sig.is_empty());
    let stride = stride.max(PAGE_SIZE as usize);
    let size = host.mem.size();
    let mut hits = Vec::new();
    let mut readable = 0u64;
    let mut faulted = 0u64;
    let overlap = sig.len() as u64 - 1;
    let finder = memchr::memmem::Finder::new(sig);
    let scan_window = |host: &mut Host, start: u64, own: u64, hits: &mut Vec<u64>| -> Result<(), DmaFault> {
        let end = (start + own + overlap).min(size);
        let buf = host.dma_read(dev, start, (end - start) as usize)?;
        for off in finder.find_iter(&buf) {
            if (off as u64) < own {
                hits.push(start + off as u64);
            }
        }
        Ok(())
    };
    let mut start = 0u64;
    while start < size {
        let own = (stride as u64).min(size - start);
        match scan_window(host, start, own, &mut hits) {
            Ok(()) => readable += own,
            Err(_) => {
                let mut page = start;
                while page < start + own {
                    let len = (PAGE_SIZE).min(start + own - page);
                    // Page-level retry: the overlap tail may cross into a
                    // faulting page, so fall back to the page alone.
                    let ok = scan_window(host, page, len, &mut hits).is_ok() || {
                        match host.dma_read(dev, page, len as usize) {
                            Ok(buf) => {
                                for off in finder.find_iter(&buf) {
                                    hits.push(page + off as u64);
                                }
                                true
                            }
                            Err(_) => false,
                        }
                    };
                    if ok {
                        readable += len;
                    } else {
                        faulted += 1;
                    }
                    page += len;
                }
            }
        }
        start += own;
    }
    hits.sort_unstable();
    hits.dedup();
    ScanResult {
        hits,
        bytes_read: readable,
        pages_faulted: faulted,
        coverage: if size == 0 { 0.0 } else { readable as f64 / size as f64 },
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "outcome", rename_all = "kebab-case")]
pub enum InjectOutcome {
    Verified,
    /// Read-back differed: the host changed the bytes after the write.
    Mismatch { first_diff: u64 },
    Fault { address: u64, reason: String },
}

/// Writes `payload` at `addr`, lets the host run, then reads it back.
pub fn inject_payload(host: &mut Host, dev: DeviceId, addr: u64, payload: &[u8]) -> InjectOutcome {
    if let Err(f) = host.dma_write(dev, addr, payload) {
        return InjectOutcome::Fault {
            address: f.address,
            reason: format!("{:?}", f.reason),
        };
    }
    host.run_actor();
    match host.dma_read(dev, addr, payload.len()) {
        Ok(back) if back == payload => InjectOutcome::Verified,
        Ok(back) => {
            let i = back.iter().zip(payload).position(|(a, b)| a != b).unwrap_or(0);
            InjectOutcome::Mismatch {
                first_diff: addr + i as u64,
            }
        }
        Err(f) => InjectOutcome::Fault {
            address: f.address,
            reason: format!("{:?}", f.reason),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::host::{HostMemory, IommuConfig, MIB};
    use proptest::prelude::*;

    fn host() -> Host {
        Host::new(HostMemory::with_default_layout(8 * MIB, None).unwrap())
    }

    fn naive(mem: &[u8], sig: &[u8]) -> Vec<u64> {
        (0..=mem.len() - sig.len())
            .filter(|&i| &mem[i..i + sig.len()] == sig)
            .map(|i| i as u64)
            .collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn complete_when_unrestricted(
            places in proptest::collection::vec(0u64..(8 * MIB - 64), 1..6),
            stride_pages in 1usize..40,
        ) {
            let mut h = host();
            let sig = b"\x7fSIGNATURE-kernel-0123456789abcdef";
            for &p in &places {
                h.mem.write(p, sig);
            }
            let want = naive(h.mem.as_bytes(), sig);
            let got = scan_host_memory(&mut h, DeviceId(1), sig, stride_pages * 4096 + 13);
            prop_assert_eq!(got.hits, want);
            prop_assert_eq!(got.coverage, 1.0);
            prop_assert_eq!(got.pages_faulted, 0);
        }
    }

    #[test]
    fn straddling_window_edge_found_once() {
        let mut h = host();
        let sig = [0xA5u8; 40];
        h.mem.write(65536 - 20, &sig);
        let got = scan_host_memory(&mut h, DeviceId(1), &sig, 65536);
        assert_eq!(got.hits, vec![65536 - 20]);
    }

    #[test]
    fn iommu_limits_coverage_and_logs_faults() {
        let mut h = host();
        let qa = h.mem.region(&crate::host::RegionKind::QueueArea).unwrap().range.clone();
        h.iommu_configure(IommuConfig::enabled().allow(DeviceId(1), qa.clone()))
            .unwrap();
        let got = scan_host_memory(&mut h, DeviceId(1), b"needle-needle-needle", 1 << 20);
        let expect = (qa.end - qa.start) as f64 / (8 * MIB) as f64;
        assert!((got.coverage - expect).abs() < 1e-9);
        assert!(h.log.count("dma-fault") as u64 >= got.pages_faulted);
    }

    #[test]
    fn inject_verifies_or_reports_mutation() {
        let mut h = host();
        assert_eq!(inject_payload(&mut h, DeviceId(1), 8192, b"abc"), InjectOutcome::Verified);
        h.script_mutation(8193, vec![b'Z']);
        assert_eq!(
            inject_payload(&mut h, DeviceId(1), 8192, b"abc"),
            InjectOutcome::Mismatch { first_diff: 8193 }
        );
    }
}
