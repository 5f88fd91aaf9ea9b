//! Scenario files: a device, a host, a disk image, malice configuration, a
//! list of actions and assertions over the resulting event log.

pub mod config;
pub mod run;

use std::path::Path;

pub use config::{ConfigError, ScenarioConfig};
pub use run::{run_config, setup, AssertionOutcome, RunOutput, RunReport};

macro_rules! bundled {
    ($($name:literal),* $(,)?) => {
        &[$(($name, include_str!(concat!("../../scenarios/", $name, ".toml")))),*]
    };
}

/// Scenarios shipped with the crate, by name.
pub const BUNDLED: &[(&str, &str)] = bundled!(
    "cookie-activation",
    "init-shadow",
    "shutdown-window",
    "boot-gated-shadow",
    "dma-inject",
    "iommu-blocks",
    "iommu-bypass-grub",
    "dos-brick",
    "dos-cipher",
    "mining-ssh",
    "spoof-never-ready",
);

pub fn bundled_source(name: &str) -> Option<&'static str> {
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

pub fn bundled(name: &str) -> Option<Result<ScenarioConfig, ConfigError>> {
    bundled_source(name).map(ScenarioConfig::parse)
}

/// `(name, description)` of every bundled scenario.
pub fn list() -> Vec<(&'static str, String)> {
    BUNDLED
        .iter()
        .map(|(n, s)| {
            let d = ScenarioConfig::parse(s).map(|c| c.description).unwrap_or_else(|e| format!("invalid: {e}"));
            (*n, d)
        })
        .collect()
}

/// Runs a bundled scenario by name, or a scenario file by path.
pub fn run_named(name_or_path: &str, seed: Option<u64>) -> Result<RunOutput, ConfigError> {
    if let Some(src) = bundled_source(name_or_path) {
        let cfg = ScenarioConfig::parse(src)?;
        return run_config(&cfg, Path::new("."), seed);
    }
    let path = Path::new(name_or_path);
    let cfg = ScenarioConfig::load(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    run_config(&cfg, base, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_scenarios_parse() {
        for (name, src) in BUNDLED {
            let cfg = ScenarioConfig::parse(src).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(cfg.name, *name);
            assert!(!cfg.assertions.is_empty(), "{name} has no assertions");
        }
    }
}
