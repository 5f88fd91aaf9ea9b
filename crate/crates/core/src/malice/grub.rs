//! Bootloader configuration patching: add IOMMU-disable tokens to every kernel
//! command line.

pub const IOMMU_OFF_TOKENS: [&str; 2] = ["amd_iommu=off", "intel_iommu=off"];

fn is_kernel_line(trimmed: &str) -> bool {
    let mut words = trimmed.split_whitespace();
    matches!(words.next(), Some("linux" | "linux16" | "linuxefi"))
}

fn add_missing(line: &str, present: &[&str]) -> String {
    let mut out = line.to_string();
    for t in IOMMU_OFF_TOKENS {
        if !present.contains(&t) {
            out.push(' ');
            out.push_str(t);
        }
    }
    out
}

fn patch_line(line: &str) -> String {
    let trimmed = line.trim_start();
    if is_kernel_line(trimmed) {
        let tokens: Vec<&str> = trimmed.split_whitespace().collect();
        let body = line.trim_end();
        let tail = &line[body.len()..];
        return add_missing(body, &tokens) + tail;
    }
    for key in ["GRUB_CMDLINE_LINUX_DEFAULT=\"", "GRUB_CMDLINE_LINUX=\""] {
        if let Some(rest) = trimmed.strip_prefix(key) {
            if let Some(close) = rest.find('"') {
                let indent = &line[..line.len() - trimmed.len()];
                let inner = &rest[..close];
                let tokens: Vec<&str> = inner.split_whitespace().collect();
                let mut patched = inner.to_string();
                for t in IOMMU_OFF_TOKENS {
                    if !tokens.contains(&t) {
                        if !patched.is_empty() {
                            patched.push(' ');
                        }
                        patched.push_str(t);
                    }
                }
                return format!("{indent}{key}{patched}{}", &rest[close..]);
            }
        }
    }
    line.to_string()
}

/// Patches every kernel command line. Idempotent; non-UTF-8 input is returned
/// unchanged.
pub fn patch_config(cfg: &[u8]) -> Vec<u8> {
    let Ok(text) = std::str::from_utf8(cfg) else {
        return cfg.to_vec();
    };
    text.split_inclusive('\n')
        .map(|l| match l.strip_suffix('\n') {
            Some(body) => patch_line(body) + "\n",
            None => patch_line(l),
        })
        .collect::<String>()
        .into_bytes()
}

/// The kernel command line from the first `linux` entry, as the host's
/// bootloader would pass it (tokens after the kernel image path).
pub fn kernel_cmdline(cfg: &[u8]) -> Option<Vec<String>> {
    let text = String::from_utf8_lossy(cfg);
    text.lines().find(|l| is_kernel_line(l.trim_start())).map(|l| {
        l.split_whitespace()
            .skip(2)
            .map(str::to_string)
            .collect()
    })
}

/// Whether a command line disables the IOMMU.
pub fn cmdline_disables_iommu(cmdline: &[String]) -> bool {
    cmdline.iter().any(|t| IOMMU_OFF_TOKENS.contains(&t.as_str()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const CFG: &str = "set timeout=0\nmenuentry 'Linux' {\n\tlinux /boot/vmlinuz root=/dev/nvme0n1p1 ro quiet\n\tinitrd /boot/initrd.img\n}\n";

    #[test]
    fn patches_linux_lines_only() {
        let out = String::from_utf8(patch_config(CFG.as_bytes())).unwrap();
        assert!(out.contains("\tlinux /boot/vmlinuz root=/dev/nvme0n1p1 ro quiet amd_iommu=off intel_iommu=off\n"));
        assert!(out.contains("\tinitrd /boot/initrd.img\n"));
        assert_eq!(out.len(), CFG.len() + " amd_iommu=off intel_iommu=off".len());
        let cmd = kernel_cmdline(out.as_bytes()).unwrap();
        assert!(cmdline_disables_iommu(&cmd));
        assert!(!cmdline_disables_iommu(&kernel_cmdline(CFG.as_bytes()).unwrap()));
    }

    #[test]
    fn defaults_file_form() {
        let out = patch_config(b"GRUB_CMDLINE_LINUX_DEFAULT=\"quiet\"\n");
        assert_eq!(out, b"GRUB_CMDLINE_LINUX_DEFAULT=\"quiet amd_iommu=off intel_iommu=off\"\n");
        let out = patch_config(b"GRUB_CMDLINE_LINUX=\"\"");
        assert_eq!(out, b"GRUB_CMDLINE_LINUX=\"amd_iommu=off intel_iommu=off\"");
    }

    #[test]
    fn partially_patched_line_gets_the_rest() {
        let out = patch_config(b"linux /k amd_iommu=off\r\n");
        assert_eq!(out, b"linux /k amd_iommu=off intel_iommu=off\r\n");
    }

    proptest! {
        #[test]
        fn idempotent(lines in proptest::collection::vec("[ \t]{0,2}(linux|linux16|initrd|set|echo)( [a-z=/_0-9]{1,12}){0,4}", 0..8)) {
            let cfg = lines.join("\n");
            let once = patch_config(cfg.as_bytes());
            prop_assert_eq!(patch_config(&once), once.clone());
            let kernel_lines = lines.iter().filter(|l| is_kernel_line(l.trim_start())).count();
            prop_assert_eq!(once.len(), cfg.len() + kernel_lines * " amd_iommu=off intel_iommu=off".len());
        }
    }
}
